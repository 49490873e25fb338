"""Acceptance sweeps for the closed forms and the allocation solvers"""
import sys
import time

import numpy as np
from scipy import integrate

from fluidsched.core import fluid_model
from fluidsched.core.fluid_model import BehaviorCase, PipeState
from fluidsched.core.optimizer import SumDelayProblem, allocation_optimizer, simplex_minimum
from fluidsched.core.state_analysis import random_steady_states

T_UPD, BUFFER = 10.0, 5.0
MAX_GAP = 1e-5


def check_solver_accuracy(count: int = 500, seed: int = 2024) -> bool:
    """Exact vs grid oracle, KKT certificate and closed-form delays"""

    results = []

    for k, state in enumerate(random_steady_states(count, seed, t_upd=T_UPD, m=BUFFER)):
        problem = SumDelayProblem.from_state(state)
        exact = allocation_optimizer.solve_sum_mean_delay(problem)
        oracle = allocation_optimizer.oracle_solve(problem, resolution=1e-4)
        kkt = allocation_optimizer.check_kkt(problem, exact.w, 1e-8)

        quadrature = max(
            abs(fluid_model.integrated_mean_delay(p, w, T_UPD, BUFFER)
                - fluid_model.mean_local_delay(p, w, T_UPD, BUFFER))
            / max(fluid_model.mean_local_delay(p, w, T_UPD, BUFFER), 1e-300)
            for p, w in zip(state.pipes, exact.w)
        )

        gap = oracle.objective - exact.objective
        results.append({
            "n": state.n,
            "gap": gap,
            "oracle_ok": -1e-9 * exact.objective <= gap <= MAX_GAP,
            "kkt_ok": kkt.ok,
            "quadrature": quadrature,
            "nodes": exact.nodes_visited,
        })

        if not (results[-1]["oracle_ok"] and kkt.ok):
            print(f"Instance {k}: n={state.n}, gap={gap:.3e}, kkt={kkt.diagnostic or 'ok'}")

    # Summary
    oracle_rate = sum(r["oracle_ok"] for r in results) / len(results)
    kkt_rate = sum(r["kkt_ok"] for r in results) / len(results)
    worst_gap = max(r["gap"] for r in results)
    worst_quadrature = max(r["quadrature"] for r in results)

    print(f"\nInstances: {len(results)}")
    print(f"Oracle agreement: {oracle_rate:.1%} (worst gap {worst_gap:.3e})")
    print(f"KKT certificate: {kkt_rate:.1%}")
    print(f"Closed form vs quadrature: worst relative error {worst_quadrature:.3e}")
    print(f"Max face-search nodes: {max(r['nodes'] for r in results)}")
    return oracle_rate == 1.0 and kkt_rate == 1.0 and worst_quadrature <= 1e-7


def check_minmax_accuracy(count: int = 100, seed: int = 2025) -> bool:
    """Min-max bisection vs its grid oracle on up to four pipes"""
    failures = 0
    worst_gap = 0.0
    for k, state in enumerate(random_steady_states(count, seed, max_n=4, t_upd=T_UPD, m=BUFFER)):
        problem = SumDelayProblem.from_state(state)
        exact = allocation_optimizer.solve_minmax_mean_delay(problem)
        oracle = allocation_optimizer.oracle_minmax(problem, resolution=1e-4)
        gap = oracle.objective - exact.objective
        worst_gap = max(worst_gap, gap)
        if not (-1e-9 * exact.objective <= gap <= MAX_GAP and allocation_optimizer.verify_minmax(problem, exact.w)):
            failures += 1
            print(f"Min-max instance {k}: n={state.n}, gap={gap:.3e}")

    print(f"\nMin-max instances: {count}, failures: {failures}, worst gap {worst_gap:.3e}")
    return failures == 0


def check_closed_forms(count: int = 10_000, seed: int = 7) -> bool:
    """Closed-form mean delays and drops against quadrature"""
    rng = np.random.default_rng(seed)
    started = time.perf_counter()
    worst_delay = worst_drops = 0.0

    for _ in range(count):
        pipe = PipeState(a=float(rng.uniform(0.0, 1.0)), b=float(rng.uniform(0.0, BUFFER)))
        w = float(rng.uniform(0.01, 1.0))
        closed = fluid_model.mean_local_delay(pipe, w, T_UPD, BUFFER)
        numeric = fluid_model.integrated_mean_delay(pipe, w, T_UPD, BUFFER)
        worst_delay = max(worst_delay, abs(numeric - closed) / max(closed, 1e-300))

        t_cross = fluid_model.crossing_time(pipe, w, T_UPD, BUFFER)
        if fluid_model.classify(pipe, w, T_UPD, BUFFER) is BehaviorCase.OVERFILLS and t_cross < T_UPD:
            excess, _ = integrate.quad(lambda t: (pipe.a - w) * (t - t_cross), t_cross, T_UPD)
            drops = fluid_model.dropped_volume(pipe, w, T_UPD, BUFFER)
            worst_drops = max(worst_drops, abs(excess - drops) / drops)

    print(f"\nClosed forms on {count} pairs: worst delay error {worst_delay:.3e}, "
          f"worst drop error {worst_drops:.3e}, {time.perf_counter() - started:.1f}s")
    return worst_delay <= 1e-7 and worst_drops <= 1e-7


def check_adversarial_timing(n: int = 10) -> bool:
    """Box that every coordinate of the simplex minimum violates"""
    c = np.arange(1, n + 1, dtype=float) ** 2
    v = simplex_minimum(c)
    half = np.arange(n) < n // 2
    lo = np.where(half, 1.5 * v, 0.0)
    hi = np.where(half, 1.0, 0.7 * v)
    problem = SumDelayProblem.from_arrays(c, lo, hi)

    started = time.perf_counter()
    result = allocation_optimizer.solve_sum_mean_delay(problem)
    elapsed = time.perf_counter() - started
    certified = allocation_optimizer.verify_kkt(problem, result.w)

    print(f"\nAdversarial n={n}: nodes={result.nodes_visited}, subproblems={result.subproblems}, "
          f"{elapsed:.3f}s, kkt={certified}")
    return certified and elapsed < 1.0


if __name__ == "__main__":
    checks = [check_closed_forms(), check_solver_accuracy(), check_minmax_accuracy(), check_adversarial_timing()]
    sys.exit(0 if all(checks) else 1)
