"""Command-line application"""
import argparse
import json
import sys
from typing import List, Optional

from pydantic import ValidationError

from fluidsched.config import get_settings
from fluidsched.core import fluid_model
from fluidsched.core.errors import DomainError, InfeasibleError, StateFileError
from fluidsched.core.fluid_model import SystemState
from fluidsched.core.optimizer import AllocationOptimizer, ProblemKind, SolveResult, SumDelayProblem
from fluidsched.core.policies import Policy, PolicyKind
from fluidsched.core.simulator import TraceSpec, generate_trace, reports_frame, simulator
from fluidsched.core.state_analysis import classify_state, predict_state
from fluidsched.services import reports
from fluidsched.services.state_files import load_state, load_trace_spec
from fluidsched.utils.logger import logger, setup_logger

settings = get_settings()

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_PARSE = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4

# largest pipe count the grid oracle handles; descent beyond
GRID_ORACLE_LIMIT = 6


def cmd_classify(args: argparse.Namespace) -> int:
    state = load_state(args.state)
    report = reports.classify_report(state, classify_state(state))
    if args.json:
        reports.emit(report.model_dump_json(indent=2) + "\n", args.out)
    else:
        reports.emit(reports.render_classify(state, report), args.out)
    return EXIT_OK


def cmd_solve(args: argparse.Namespace) -> int:
    state = load_state(args.state)
    optimizer = AllocationOptimizer()
    optimizer.slack = args.violation_slack
    optimizer.bisection_tol = args.bisection_tol
    optimizer.descent_tol = args.descent_tol
    kind = ProblemKind(args.problem)

    if kind in (ProblemKind.SUM, ProblemKind.MINMAX):
        problem = SumDelayProblem.from_state(state)
        if kind is ProblemKind.SUM:
            result = optimizer.solve_sum_mean_delay(problem)
        else:
            result = optimizer.solve_minmax_mean_delay(problem)
    else:
        problem = None
        result = optimizer.solve_nullification(kind, state)

    allocation = result.allocation()
    delays = [p.mean_delay for p in predict_state(state, allocation)]
    verification = _verify(optimizer, state, problem, result, args) if args.verify else None
    report = reports.solve_report(result, delays, verification)
    logger.info(f"Solved {kind.value} for {state.n} pipes: objective={result.objective:.12g}")

    if args.json:
        reports.emit(report.model_dump_json(indent=2) + "\n", args.out)
    else:
        reports.emit(reports.render_solve(report), args.out)
    if verification is not None and not verification.certificate_ok:
        return EXIT_INVARIANT
    return EXIT_OK


def _verify(
    optimizer: AllocationOptimizer,
    state: SystemState,
    problem: Optional[SumDelayProblem],
    result: SolveResult,
    args: argparse.Namespace,
) -> reports.Verification:
    mode = args.oracle
    if mode == "auto":
        mode = "grid" if (problem.n if problem is not None else state.n) <= GRID_ORACLE_LIMIT else "descent"

    if result.problem is ProblemKind.SUM:
        check = optimizer.check_kkt(problem, result.w, args.tol)
        oracle = optimizer.oracle_solve(problem, args.resolution, mode=mode)
        ok, diagnostic = check.ok, check.diagnostic
    elif result.problem is ProblemKind.MINMAX:
        ok = optimizer.verify_minmax(problem, result.w, args.tol)
        diagnostic = ""
        oracle = (
            optimizer.oracle_minmax(problem, args.resolution)
            if problem.n <= GRID_ORACLE_LIMIT else None
        )
        mode = "grid"
    else:
        ok = optimizer.verify_nullification(result.problem, state, result.w, args.tol)
        diagnostic = ""
        oracle = (
            optimizer.oracle_nullification(result.problem, state, args.resolution)
            if state.n <= GRID_ORACLE_LIMIT else None
        )
        mode = "grid"

    quadrature = None
    if result.problem in (ProblemKind.SUM, ProblemKind.MINMAX):
        errors = []
        for pipe, w in zip(state.pipes, result.w):
            closed = fluid_model.mean_local_delay(pipe, w, state.t_upd, state.m)
            numeric = fluid_model.integrated_mean_delay(pipe, w, state.t_upd, state.m)
            errors.append(abs(numeric - closed) / closed if closed > 0.0 else abs(numeric))
        quadrature = max(errors)

    return reports.Verification(
        certificate_ok=ok,
        certificate_diagnostic=diagnostic,
        oracle_mode=mode if oracle is not None else None,
        oracle_objective=oracle.objective if oracle is not None else None,
        oracle_gap=oracle.objective - result.objective if oracle is not None else None,
        quadrature_max_rel_error=quadrature,
    )


def _trace_for(args: argparse.Namespace):
    spec = load_trace_spec(args.trace)
    if args.seed is not None:
        spec = TraceSpec.model_validate({**spec.model_dump(), "seed": args.seed})
    return generate_trace(spec)


def cmd_simulate(args: argparse.Namespace) -> int:
    state = load_state(args.state)
    trace = _trace_for(args)
    policy = Policy.parse(args.policy)
    epoch_reports = simulator.run_simulation(state, trace, policy, args.epochs)
    if args.json:
        reports.emit(reports.epoch_reports_json(epoch_reports), args.out)
    else:
        reports.emit(reports.frame_csv(reports_frame(epoch_reports)), args.out)
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    state = load_state(args.state)
    trace = _trace_for(args)
    names = args.policy or [k.value for k in PolicyKind if k is not PolicyKind.STATIC]
    policies = [Policy.parse(name) for name in names]
    table = simulator.compare_policies(state, trace, policies, args.epochs)
    if args.json:
        reports.emit(reports.comparison_json(table), args.out)
    else:
        reports.emit(reports.frame_csv(table), args.out)
    return EXIT_OK


def cmd_schema(args: argparse.Namespace) -> int:
    names = [args.name] if args.name else sorted(reports.SCHEMAS)
    published = {name: reports.published_schema(name) for name in names}
    document = published[names[0]] if args.name else published
    reports.emit(json.dumps(document, indent=2) + "\n", args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fluidsched",
        description="Fluid-model capacity allocation: classify states, solve allocation problems, simulate policies",
    )
    parser.add_argument("--log-level", default=None, help="logger level (default: settings.log_level)")
    commands = parser.add_subparsers(dest="command", required=True)

    classify = commands.add_parser("classify", help="criteria verdicts and feasible box of a state")
    classify.add_argument("state", help="state file (TOML)")
    classify.add_argument("--json", action="store_true", help="machine-readable output")
    classify.add_argument("--out", default=None, help="write to this file instead of stdout")
    classify.set_defaults(handler=cmd_classify)

    solve = commands.add_parser("solve", help="solve one of the allocation problems")
    solve.add_argument("state", help="state file (TOML)")
    solve.add_argument("--problem", choices=[k.value for k in ProblemKind], default=ProblemKind.SUM.value)
    solve.add_argument("--verify", action="store_true", help="run the oracle and the optimality certificate")
    solve.add_argument("--json", action="store_true", help="machine-readable output")
    solve.add_argument("--out", default=None, help="write to this file instead of stdout")
    solve.add_argument("--tol", type=float, default=settings.kkt_tol, help="certificate tolerance")
    solve.add_argument("--resolution", type=float, default=settings.oracle_resolution, help="oracle grid step")
    solve.add_argument("--oracle", choices=["auto", "grid", "descent"], default="auto")
    solve.add_argument("--violation-slack", type=float, default=settings.violation_slack)
    solve.add_argument("--bisection-tol", type=float, default=settings.bisection_tol)
    solve.add_argument("--descent-tol", type=float, default=settings.descent_tol)
    solve.set_defaults(handler=cmd_solve)

    for name, handler, help_text in (
        ("simulate", cmd_simulate, "run one policy epoch by epoch"),
        ("compare", cmd_compare, "aggregate several policies on one trace"),
    ):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("state", help="state file (TOML)")
        sub.add_argument("trace", help="trace spec file (JSON)")
        if name == "simulate":
            sub.add_argument("--policy", default=PolicyKind.SUM_OPTIMAL.value,
                             help="policy name, or static:w1,w2,...")
        else:
            sub.add_argument("--policy", action="append", default=None,
                             help="policy to compare (repeatable; default: every non-static policy)")
        sub.add_argument("--epochs", type=int, default=1)
        sub.add_argument("--seed", type=int, default=None, help="override the trace seed")
        sub.add_argument("--json", action="store_true", help="JSON instead of CSV")
        sub.add_argument("--out", default=None, help="write to this file instead of stdout")
        sub.set_defaults(handler=handler)

    schema = commands.add_parser("schema", help="print the published JSON schemas")
    schema.add_argument("name", nargs="?", choices=sorted(reports.SCHEMAS))
    schema.add_argument("--out", default=None)
    schema.set_defaults(handler=cmd_schema)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.log_level:
        setup_logger(args.log_level)

    try:
        return args.handler(args)
    except StateFileError as e:
        logger.error(f"Parse error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except InfeasibleError as e:
        logger.error(f"Infeasible: {e}")
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ValidationError, DomainError) as e:
        logger.error(f"Invalid input: {e}")
        print(f"invalid: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except OSError as e:
        logger.error(f"I/O error: {e}")
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
