"""Report models and writers for the command line"""
import json
import sys
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Type, Union

import pandas as pd
from pydantic import BaseModel, ConfigDict

from fluidsched.core.fluid_model import SystemState
from fluidsched.core.optimizer import SolveResult
from fluidsched.core.simulator import EpochReport
from fluidsched.core.state_analysis import StateClass, feasible_box

REPORT_FORMAT_VERSION = 1


class ClassifyReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    format_version: int
    n: int
    t_upd: float
    m: float
    total_a: float
    total_b: float
    sum_w_prime: float
    sum_w_star: float
    sum_w_star_plus: float
    decomposable: bool
    strictly_decomposable: bool
    avoidable: bool
    nonincreasable: bool
    steady: bool
    nodrop_pipes: List[int]
    box_lo: List[float]
    box_hi: List[float]
    polytope_nonempty: bool


class FaceEntry(BaseModel):
    pipe: int
    side: str


class Verification(BaseModel):
    certificate_ok: bool
    certificate_diagnostic: str = ""
    oracle_mode: Optional[str] = None
    oracle_objective: Optional[float] = None
    oracle_gap: Optional[float] = None
    quadrature_max_rel_error: Optional[float] = None


class SolveReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    format_version: int
    problem: str
    w: List[float]
    objective: float
    sum_mean_delay: float
    max_mean_delay: float
    fixed_faces: List[FaceEntry]
    nodes_visited: int
    subproblems: int
    verification: Optional[Verification] = None


class ComparisonRow(BaseModel):
    """One policy of a compare run"""

    model_config = ConfigDict(frozen=True)

    policy: str
    epochs: int
    sum_mean_delay: float
    predicted_sum_first_epoch: float
    total_drops: float
    total_drops_paper: float
    fallbacks: int


SCHEMAS: Dict[str, Type[BaseModel]] = {
    "classify_report": ClassifyReport,
    "solve_report": SolveReport,
    "epoch_report": EpochReport,
    "comparison_row": ComparisonRow,
}


def classify_report(state: SystemState, verdict: StateClass) -> ClassifyReport:
    box = feasible_box(state)
    return ClassifyReport(
        format_version=REPORT_FORMAT_VERSION,
        n=state.n,
        t_upd=state.t_upd,
        m=state.m,
        **verdict.model_dump(exclude={"nodrop_pipes"}),
        nodrop_pipes=list(verdict.nodrop_pipes),
        box_lo=list(box.lo),
        box_hi=list(box.hi),
        polytope_nonempty=box.nonempty(),
    )


def solve_report(
    result: SolveResult,
    mean_delays: Sequence[float],
    verification: Optional[Verification] = None,
) -> SolveReport:
    return SolveReport(
        format_version=REPORT_FORMAT_VERSION,
        problem=result.problem.value,
        w=list(result.w),
        objective=result.objective,
        sum_mean_delay=sum(mean_delays),
        max_mean_delay=max(mean_delays),
        fixed_faces=[FaceEntry(pipe=i, side=side.value) for i, side in result.fixed_faces],
        nodes_visited=result.nodes_visited,
        subproblems=result.subproblems,
        verification=verification,
    )


def render_classify(state: SystemState, report: ClassifyReport) -> str:
    lines = [
        f"n: {report.n}",
        f"t_upd: {report.t_upd:g}",
        f"m: {report.m:g}",
        f"A: {report.total_a:.12g}",
        f"B: {report.total_b:.12g}",
        f"A + B/t_upd: {report.sum_w_prime:.12g}",
        f"sum w*+: {report.sum_w_star_plus:.12g}",
        f"decomposable: {_flag(report.decomposable)}",
        f"strictly_decomposable: {_flag(report.strictly_decomposable)}",
        f"avoidable: {_flag(report.avoidable)}",
        f"nonincreasable: {_flag(report.nonincreasable)}",
        f"steady: {_flag(report.steady)}",
        f"nodrop_pipes: {', '.join(map(str, report.nodrop_pipes)) or '-'}",
        f"polytope_nonempty: {_flag(report.polytope_nonempty)}",
    ]
    for i, pipe in enumerate(state.pipes):
        lines += [
            "",
            f"[pipe {i}]" + (f" {pipe.label}" if pipe.label else ""),
            f"a: {pipe.a:.12g}",
            f"b: {pipe.b:.12g}",
            f"box: [{report.box_lo[i]:.12g}, {report.box_hi[i]:.12g}]",
        ]
    return "\n".join(lines) + "\n"


def render_solve(report: SolveReport) -> str:
    faces = {entry.pipe: entry.side for entry in report.fixed_faces}
    lines = [
        f"problem: {report.problem}",
        f"objective: {report.objective:.12g}",
        f"sum_mean_delay: {report.sum_mean_delay:.12g}",
        f"max_mean_delay: {report.max_mean_delay:.12g}",
        f"nodes_visited: {report.nodes_visited}",
    ]
    for i, w in enumerate(report.w):
        lines.append(f"pipe {i}: w={w:.12g}" + (f" [{faces[i]}]" if i in faces else ""))
    check = report.verification
    if check is not None:
        lines.append(f"certificate: {'ok' if check.certificate_ok else 'FAILED'}")
        if check.certificate_diagnostic:
            lines.append(f"certificate_diagnostic: {check.certificate_diagnostic}")
        if check.oracle_objective is not None:
            lines.append(f"oracle ({check.oracle_mode}): {check.oracle_objective:.12g}")
            lines.append(f"oracle_gap: {check.oracle_gap:.3e}")
        if check.quadrature_max_rel_error is not None:
            lines.append(f"quadrature_max_rel_error: {check.quadrature_max_rel_error:.3e}")
    return "\n".join(lines) + "\n"


def epoch_reports_json(reports: Sequence[EpochReport]) -> str:
    return json.dumps(
        [json.loads(r.model_dump_json(exclude={"queue_path"})) for r in reports], indent=2
    ) + "\n"


def comparison_json(table: pd.DataFrame) -> str:
    rows = [ComparisonRow.model_validate(record) for record in table.to_dict(orient="records")]
    return json.dumps([json.loads(row.model_dump_json()) for row in rows], indent=2) + "\n"


def frame_csv(frame: pd.DataFrame) -> str:
    return frame.to_csv(index=False, lineterminator="\n")


def emit(text: str, out: Optional[Union[str, Path]] = None) -> None:
    """Write to ``out`` or stdout"""
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def published_schema(name: str) -> dict:
    source = resources.files("fluidsched").joinpath("schemas", f"{name}.schema.json")
    return json.loads(source.read_text(encoding="utf-8"))


def _flag(value: bool) -> str:
    return "true" if value else "false"
