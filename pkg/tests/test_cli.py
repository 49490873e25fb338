import io
import json

import numpy as np
import pandas as pd
import pytest

from fluidsched.core.errors import StateFileError
from fluidsched.core.fluid_model import SystemState
from fluidsched.core.simulator import TraceKind, TraceSpec
from fluidsched.main import EXIT_INFEASIBLE, EXIT_INVARIANT, EXIT_IO, EXIT_OK, EXIT_PARSE, main
from fluidsched.services import reports
from fluidsched.services.state_files import dump_state, parse_state, parse_trace_spec

REQUIRED_CSV_COLUMNS = [
    "epoch", "pipe", "policy", "w", "predicted_delay", "realized_delay",
    "predicted_drops_paper", "realized_drops", "fallback_flag",
]


def run(capsys, *argv):
    code = main([str(arg) for arg in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def conforms(value, node, root):
    """Check a decoded JSON value against the subset of JSON Schema the published files use"""
    if "$ref" in node:
        return conforms(value, root["$defs"][node["$ref"].rsplit("/", 1)[-1]], root)
    if "anyOf" in node:
        return any(conforms(value, option, root) for option in node["anyOf"])
    if "enum" in node and value not in node["enum"]:
        return False
    if "const" in node and value != node["const"]:
        return False
    kind = node.get("type")
    if kind == "object":
        if not isinstance(value, dict):
            return False
        properties = node.get("properties", {})
        if node.get("additionalProperties") is False and set(value) - set(properties):
            return False
        if set(node.get("required", ())) - set(value):
            return False
        return all(conforms(v, properties[k], root) for k, v in value.items() if k in properties)
    if kind == "array":
        return isinstance(value, list) and all(conforms(v, node.get("items", {}), root) for v in value)
    checks = {
        "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        "integer": lambda v: isinstance(v, int) and not isinstance(v, bool),
        "boolean": lambda v: isinstance(v, bool),
        "string": lambda v: isinstance(v, str),
        "null": lambda v: v is None,
    }
    return kind is None or checks[kind](value)


def assert_follows_schema(value, name):
    schema = reports.published_schema(name)
    assert conforms(value, schema, schema), f"output does not follow {name}"


def test_classify_json_follows_published_schema(capsys, fixtures_dir):
    code, out, _ = run(capsys, "classify", fixtures_dir / "steady_symmetric.toml", "--json")
    assert code == EXIT_OK
    report = json.loads(out)
    assert_follows_schema(report, "classify_report")
    schema = reports.published_schema("classify_report")
    assert set(report) == set(schema["properties"])
    assert set(schema["required"]) <= set(report)
    assert report["format_version"] == 1
    assert report["steady"] is True
    assert report["decomposable"] is False
    assert report["box_lo"] == pytest.approx([0.4, 0.4])
    assert report["box_hi"] == pytest.approx([0.9, 0.9])


def test_classify_text(capsys, fixtures_dir):
    code, out, _ = run(capsys, "classify", fixtures_dir / "boundary_symmetric.toml")
    assert code == EXIT_OK
    assert "decomposable: true" in out
    assert "strictly_decomposable: false" in out
    assert "steady: true" in out


def test_malformed_state_exits_with_parse_error(capsys, fixtures_dir):
    code, _, err = run(capsys, "classify", fixtures_dir / "malformed.toml")
    assert code == EXIT_PARSE
    assert "malformed.toml:3:" in err


def test_backlog_above_buffer_is_an_invariant_error(capsys, fixtures_dir):
    code, _, err = run(capsys, "classify", fixtures_dir / "backlog_exceeds_buffer.toml")
    assert code == EXIT_INVARIANT
    assert "exceeds buffer size" in err


def test_missing_state_file(capsys, tmp_path):
    code, _, err = run(capsys, "classify", tmp_path / "absent.toml")
    assert code == EXIT_IO
    assert "i/o error" in err


def test_solve_symmetric_state(capsys, fixtures_dir):
    code, out, _ = run(capsys, "solve", fixtures_dir / "steady_symmetric.toml", "--json")
    assert code == EXIT_OK
    report = json.loads(out)
    assert report["problem"] == "sum"
    assert report["w"] == pytest.approx([0.5, 0.5], abs=1e-12)
    assert report["fixed_faces"] == []
    assert report["verification"] is None


def test_solve_with_binding_lower_bound_and_verification(capsys, fixtures_dir):
    code, out, _ = run(capsys, "solve", fixtures_dir / "binding_lower.toml", "--verify", "--json")
    assert code == EXIT_OK
    report = json.loads(out)
    assert_follows_schema(report, "solve_report")
    assert report["w"] == pytest.approx([0.9, 0.1], abs=1e-12)
    assert report["fixed_faces"] == [{"pipe": 0, "side": "lower"}]
    assert report["objective"] == pytest.approx(9.5 / 0.9 + 50.0, rel=1e-12)
    check = report["verification"]
    assert check["certificate_ok"] is True
    assert check["oracle_mode"] == "grid"
    assert -1e-9 * report["objective"] <= check["oracle_gap"] <= 1e-3 * report["objective"]
    assert check["quadrature_max_rel_error"] < 1e-7


def test_solve_minmax_text(capsys, fixtures_dir):
    code, out, _ = run(capsys, "solve", fixtures_dir / "steady_asymmetric.toml", "--problem", "minmax", "--verify")
    assert code == EXIT_OK
    assert "problem: minmax" in out
    assert "certificate: ok" in out


def test_nullification_needs_common_decomposability(capsys, fixtures_dir):
    code, _, err = run(capsys, "solve", fixtures_dir / "steady_symmetric.toml", "--problem", "null-sum")
    assert code == EXIT_INFEASIBLE
    assert "Criteria 1" in err


def test_nullification_on_decomposable_state(capsys, tmp_path):
    path = tmp_path / "light.toml"
    path.write_text(dump_state(SystemState.from_arrays([0.2, 0.2], [1.0, 1.0], 10.0, 5.0)))
    code, out, _ = run(capsys, "solve", path, "--problem", "null-minmax", "--json")
    assert code == EXIT_OK
    assert json.loads(out)["w"] == pytest.approx([0.5, 0.5], abs=1e-9)


def test_simulate_csv_matches_prediction_on_constant_trace(capsys, fixtures_dir):
    code, out, _ = run(
        capsys, "simulate", fixtures_dir / "steady_symmetric.toml", fixtures_dir / "constant_trace.json",
    )
    assert code == EXIT_OK
    frame = pd.read_csv(io.StringIO(out))
    assert list(frame.columns[:len(REQUIRED_CSV_COLUMNS)]) == REQUIRED_CSV_COLUMNS
    assert len(frame) == 2
    assert frame["policy"].tolist() == ["sum-optimal", "sum-optimal"]
    np.testing.assert_allclose(frame["realized_delay"], frame["predicted_delay"], rtol=1e-6)
    assert frame["fallback_flag"].tolist() == [0, 0]


def test_simulate_static_policy_json(capsys, fixtures_dir):
    code, out, _ = run(
        capsys, "simulate", fixtures_dir / "steady_asymmetric.toml",
        fixtures_dir / "asymmetric_constant_trace.json",
        "--policy", "static:0.5,0.25,0.25", "--epochs", 2, "--json",
    )
    assert code == EXIT_OK
    epochs = json.loads(out)
    for epoch in epochs:
        assert_follows_schema(epoch, "epoch_report")
    assert [e["epoch"] for e in epochs] == [0, 1]
    assert all(e["allocation"] == [0.5, 0.25, 0.25] for e in epochs)
    assert "queue_path" not in epochs[0]


def test_simulation_csv_is_reproducible(capsys, fixtures_dir, tmp_path):
    state = fixtures_dir / "steady_symmetric.toml"
    trace = fixtures_dir / "poisson_trace.json"
    first, second, reseeded = tmp_path / "first.csv", tmp_path / "second.csv", tmp_path / "reseeded.csv"
    for out, extra in ((first, []), (second, []), (reseeded, ["--seed", 8])):
        code, _, _ = run(capsys, "simulate", state, trace, "--epochs", 3, "--out", out, *extra)
        assert code == EXIT_OK
    assert first.read_bytes() == second.read_bytes()
    assert first.read_bytes() != reseeded.read_bytes()


def test_compare_defaults_to_every_dynamic_policy(capsys, fixtures_dir):
    code, out, _ = run(
        capsys, "compare", fixtures_dir / "steady_asymmetric.toml",
        fixtures_dir / "asymmetric_constant_trace.json", "--epochs", 2,
    )
    assert code == EXIT_OK
    table = pd.read_csv(io.StringIO(out))
    assert table["policy"].tolist() == [
        "sum-optimal", "minmax-optimal", "equal-split", "proportional-backlog", "proportional-intensity",
    ]
    assert (table["epochs"] == 2).all()


def test_compare_selected_policies_json(capsys, fixtures_dir):
    code, out, _ = run(
        capsys, "compare", fixtures_dir / "steady_symmetric.toml", fixtures_dir / "constant_trace.json",
        "--policy", "equal-split", "--policy", "static:0.4,0.6", "--json",
    )
    assert code == EXIT_OK
    rows = json.loads(out)
    assert [row["policy"] for row in rows] == ["equal-split", "static:0.4,0.6"]
    for row in rows:
        assert_follows_schema(row, "comparison_row")
    assert rows[0]["epochs"] == 1
    assert rows[0]["fallbacks"] == 0


def test_simulation_input_errors(capsys, fixtures_dir, tmp_path):
    state = fixtures_dir / "steady_symmetric.toml"
    broken = tmp_path / "broken.json"
    broken.write_text('{"kind": "constant",\n "rates": [0.6, 0.6]\n "duration": 20}\n')
    code, _, err = run(capsys, "simulate", state, broken)
    assert code == EXIT_PARSE
    assert "broken.json:3:" in err

    incomplete = tmp_path / "incomplete.json"
    incomplete.write_text(json.dumps({"kind": "constant", "duration": 20.0, "resolution": 0.1}))
    code, _, _ = run(capsys, "simulate", state, incomplete)
    assert code == EXIT_INVARIANT

    code, _, err = run(capsys, "simulate", state, fixtures_dir / "constant_trace.json", "--epochs", 3)
    assert code == EXIT_INVARIANT
    assert "epochs need" in err

    code, _, err = run(capsys, "simulate", state, fixtures_dir / "constant_trace.json", "--policy", "fifo")
    assert code == EXIT_INVARIANT
    assert "unknown policy" in err


def test_unknown_subcommand_is_a_usage_error(capsys):
    with pytest.raises(SystemExit) as caught:
        main(["optimize"])
    assert caught.value.code == EXIT_PARSE


@pytest.mark.parametrize("name", sorted(reports.SCHEMAS))
def test_published_schemas_match_models(name):
    published = reports.published_schema(name)
    generated = reports.SCHEMAS[name].model_json_schema()
    assert set(published["properties"]) == set(generated["properties"])
    assert set(published["required"]) == set(generated["required"])


def test_schema_subcommand_prints_published_file(capsys):
    code, out, _ = run(capsys, "schema", "solve_report")
    assert code == EXIT_OK
    assert json.loads(out) == reports.published_schema("solve_report")
    code, out, _ = run(capsys, "schema")
    assert set(json.loads(out)) == set(reports.SCHEMAS)


def test_state_file_round_trip():
    state = SystemState.from_arrays(
        [0.1, 1 / 3, 0.0], [0.7, 2.0, 5.0], 7.5, 5.0, labels=['say "hi"', None, "back\\slash"],
    )
    assert parse_state(dump_state(state)) == state


@pytest.mark.parametrize(
    "text, line",
    [
        ("version = 2\nn = 1\nt_upd = 1.0\nm = 1.0\n[[pipe]]\na = 0.1\nb = 0.1\n", 1),
        ("version = 1\nn = 2\nt_upd = 1.0\nm = 1.0\n[[pipe]]\na = 0.1\nb = 0.1\n", 2),
        ("version = 1\nn = 1\nt_upd = 1.0\nm = 1.0\n[[pipe]]\na = 0.1\nb = 0.1\nc = 0.1\n", 8),
        ("version = 1\nn = 1\nt_upd = 1.0\n[[pipe]]\na = 0.1\nb = 0.1\n", None),
    ],
)
def test_state_structure_errors(text, line):
    with pytest.raises(StateFileError) as caught:
        parse_state(text, "inline.toml")
    assert caught.value.line == line
    assert str(caught.value).startswith("inline.toml")


def test_trace_spec_must_be_an_object():
    with pytest.raises(StateFileError):
        parse_trace_spec("[1, 2]")


def test_seed_defaults_to_environment(monkeypatch, fresh_settings):
    monkeypatch.setenv("FLUIDSCHED_SEED", "42")
    spec = TraceSpec(kind=TraceKind.POISSON_BUCKETED, rates=(0.5,), duration=1.0, resolution=0.1)
    assert spec.seed == 42


def test_input_files_with_invalid_utf8_are_parse_errors(capsys, fixtures_dir, tmp_path):
    path = tmp_path / "latin.toml"
    path.write_bytes(
        b'version = 1\nn = 1\nt_upd = 10.0\nm = 5.0\n[[pipe]]\nlabel = "\xff\xfe"\na = 0.5\nb = 1.0\n'
    )
    code, _, err = run(capsys, "classify", path)
    assert code == EXIT_PARSE
    assert "latin.toml:6:10: not valid UTF-8" in err

    trace = tmp_path / "trace.json"
    trace.write_bytes(b'{"kind": "constant", "rates": [0.5], "note": "\xe9"}')
    code, _, err = run(capsys, "simulate", fixtures_dir / "steady_symmetric.toml", trace)
    assert code == EXIT_PARSE
    assert "trace.json:1:47: not valid UTF-8" in err


def test_solve_pins_idle_empty_pipe(capsys, tmp_path):
    path = tmp_path / "idle.toml"
    path.write_text(dump_state(SystemState.from_arrays([0.9, 0.0], [4.5, 0.0], 10.0, 5.0)))
    code, out, _ = run(capsys, "classify", path, "--json")
    assert json.loads(out)["steady"] is True
    for problem in ("sum", "minmax"):
        code, out, _ = run(capsys, "solve", path, "--problem", problem, "--verify", "--json")
        assert code == EXIT_OK
        report = json.loads(out)
        assert report["w"] == pytest.approx([1.0, 0.0], abs=1e-12)
        assert report["verification"]["certificate_ok"] is True
        assert abs(report["verification"]["oracle_gap"]) <= 1e-9


def test_solve_minmax_verification_runs_grid_oracle(capsys, fixtures_dir):
    code, out, _ = run(
        capsys, "solve", fixtures_dir / "steady_asymmetric.toml", "--problem", "minmax", "--verify", "--json",
    )
    assert code == EXIT_OK
    report = json.loads(out)
    assert_follows_schema(report, "solve_report")
    check = report["verification"]
    assert check["oracle_mode"] == "grid"
    assert -1e-9 * report["objective"] <= check["oracle_gap"] <= 1e-5


def test_infinite_delays_are_written_as_null(capsys, fixtures_dir):
    state = fixtures_dir / "steady_symmetric.toml"
    trace = fixtures_dir / "constant_trace.json"
    code, out, _ = run(capsys, "simulate", state, trace, "--policy", "static:1,0", "--json")
    assert code == EXIT_OK
    [epoch] = json.loads(out)
    assert_follows_schema(epoch, "epoch_report")
    assert epoch["realized_delay"][1] is None
    assert epoch["predicted_delay"][1] is None

    code, out, _ = run(capsys, "compare", state, trace, "--policy", "static:1,0", "--json")
    assert code == EXIT_OK
    [row] = json.loads(out)
    assert_follows_schema(row, "comparison_row")
    assert row["sum_mean_delay"] is None
