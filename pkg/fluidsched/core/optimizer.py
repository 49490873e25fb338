"""Capacity allocation solvers

Problem 1 (sum of mean delays) is solved exactly by recursing over the faces
of the feasible box that the unconstrained simplex minimum violates. Problem 2
(min-max mean delay) and the two nullification problems use level bisection
and projected descent. Every solver output can be checked against an
independent grid / descent oracle and a KKT-style certificate.
"""
import math
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from fluidsched.config import get_settings
from fluidsched.core import fluid_model
from fluidsched.core.errors import DomainError, InfeasibleError
from fluidsched.core.fluid_model import Allocation, SystemState
from fluidsched.core.state_analysis import FeasibleBox, classify_state, feasible_box
from fluidsched.utils.logger import logger

settings = get_settings()

DECOMPOSABILITY = "Criteria 1 (common decomposability): A + B/t_upd <= 1"


class BoundSide(str, Enum):
    LOWER = "lower"
    UPPER = "upper"


class ProblemKind(str, Enum):
    SUM = "sum"
    MINMAX = "minmax"
    NULL_SUM = "null-sum"
    NULL_MINMAX = "null-minmax"


Face = Tuple[int, BoundSide]


class SumDelayProblem(BaseModel):
    """min sum(c_i / w_i) over the box intersected with sum(w) = budget"""

    model_config = ConfigDict(frozen=True)

    c: Tuple[float, ...] = Field(min_length=1)
    box: FeasibleBox
    budget: float = Field(default=1.0, gt=0.0, allow_inf_nan=False)
    # state indices of the coordinates; None when every pipe of the state is one
    support: Optional[Tuple[int, ...]] = None
    n_state: Optional[int] = None

    @model_validator(mode="after")
    def _positive_loads(self) -> "SumDelayProblem":
        if len(self.c) != self.box.n:
            raise ValueError(f"{len(self.c)} loads for a box of {self.box.n} pipes")
        for i, ci in enumerate(self.c):
            if not (math.isfinite(ci) and ci > 0.0):
                raise ValueError(f"pipe {i}: load c={ci} must be positive")
        if (self.support is None) != (self.n_state is None):
            raise ValueError("support and n_state go together")
        if self.support is not None:
            if len(self.support) != len(self.c):
                raise ValueError(f"{len(self.support)} support indices for {len(self.c)} loads")
            if list(self.support) != sorted(set(self.support)) or not 0 <= self.support[0] <= self.support[-1] < self.n_state:
                raise ValueError(f"support {self.support} is not an increasing index set below {self.n_state}")
        return self

    @classmethod
    def from_state(cls, state: SystemState) -> "SumDelayProblem":
        """
        Problem over the loaded pipes of a state

        A pipe with a = b = 0 has zero load and a box pinned at [0, 0], so it
        is left out and gets zero capacity in every solution.
        """
        c = state.a * state.t_upd / 2.0 + state.b
        box = feasible_box(state)
        loaded = np.flatnonzero(c > 0.0)
        if loaded.size == state.n:
            return cls(c=tuple(float(x) for x in c), box=box)
        if loaded.size == 0:
            raise InfeasibleError(
                "every pipe is idle and empty, no allocation can use the budget",
                criterion="sum(hi) < budget",
            )
        idle = np.flatnonzero(c <= 0.0)
        logger.debug(f"Pinning idle pipes {idle.tolist()} at zero capacity")
        return cls(
            c=tuple(float(x) for x in c[loaded]),
            box=FeasibleBox(
                lo=tuple(float(box.lo[i]) for i in loaded),
                hi=tuple(float(box.hi[i]) for i in loaded),
            ),
            support=tuple(int(i) for i in loaded),
            n_state=state.n,
        )

    @classmethod
    def from_arrays(
        cls,
        c: Sequence[float],
        lo: Sequence[float],
        hi: Sequence[float],
        budget: float = 1.0,
    ) -> "SumDelayProblem":
        box = FeasibleBox(lo=tuple(map(float, lo)), hi=tuple(map(float, hi)))
        return cls(c=tuple(map(float, c)), box=box, budget=budget)

    @property
    def n(self) -> int:
        return len(self.c)

    @property
    def c_vector(self) -> np.ndarray:
        return np.array(self.c, dtype=float)

    def objective(self, w: Sequence[float]) -> float:
        local, issue = self.restrict(w)
        return math.inf if issue else mean_duration(self.c_vector, local)

    def expand(self, w: Sequence[float]) -> np.ndarray:
        """Problem coordinates -> one capacity per pipe of the state"""
        w = np.asarray(w, dtype=float)
        if self.support is None:
            return w
        full = np.zeros(self.n_state)
        full[list(self.support)] = w
        return full

    def restrict(self, w: Sequence[float], tol: float = 0.0) -> Tuple[np.ndarray, str]:
        """State capacities -> problem coordinates, with an issue when an idle pipe gets capacity"""
        w = np.asarray(w, dtype=float)
        if self.support is None or w.shape != (self.n_state,):
            return w, ""
        idle = np.ones(self.n_state, dtype=bool)
        idle[list(self.support)] = False
        if np.any(np.abs(w[idle]) > tol):
            return w[list(self.support)], f"idle pipes {np.flatnonzero(idle).tolist()} must get zero capacity"
        return w[list(self.support)], ""

    def lift_faces(self, faces: Sequence[Face]) -> Tuple[Face, ...]:
        if self.support is None:
            return tuple(faces)
        return tuple((self.support[i], side) for i, side in faces)


class SolveResult(BaseModel):
    """Allocation returned by a solver"""

    model_config = ConfigDict(frozen=True)

    problem: ProblemKind
    w: Tuple[float, ...]
    objective: float
    fixed_faces: Tuple[Face, ...] = ()
    nodes_visited: int = 0
    subproblems: int = 0

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.w, dtype=float)

    def allocation(self) -> Allocation:
        return Allocation.from_vector(self.w)


class KKTCheck(BaseModel):
    model_config = ConfigDict(frozen=True)

    ok: bool
    multiplier: Optional[float] = None
    diagnostic: str = ""


def mean_duration(c: Sequence[float], w: Sequence[float]) -> float:
    """phi(w) = sum(c_i / w_i); infinite once a loaded pipe gets nothing"""
    c = np.asarray(c, dtype=float)
    w = np.asarray(w, dtype=float)
    if np.any(w <= 0.0):
        return math.inf
    return math.fsum(c / w)


def simplex_minimum(c: Sequence[float], budget: float = 1.0) -> np.ndarray:
    """Unconstrained minimizer of phi on sum(w) = budget: w_i ~ sqrt(c_i)"""
    c = np.asarray(c, dtype=float)
    if c.size == 0 or np.any(~np.isfinite(c)) or np.any(c <= 0.0):
        raise DomainError(f"loads must be positive, got {c.tolist()}")
    if not (math.isfinite(budget) and budget > 0.0):
        raise DomainError(f"budget must be positive, got {budget}")
    roots = np.sqrt(c)
    return budget * roots / roots.sum()


def project_box_hyperplane(
    y: np.ndarray, lo: np.ndarray, hi: np.ndarray, budget: float
) -> np.ndarray:
    """
    Euclidean projection onto {lo <= x <= hi, sum(x) = budget}

    The projection is clip(y - tau, lo, hi) for the shift tau that meets the
    budget; the clipped sum is piecewise linear in tau, so tau is found exactly
    between two sorted breakpoints.
    """
    breaks = np.unique(np.concatenate([y - hi, y - lo]))
    sums = np.array([np.clip(y - t, lo, hi).sum() for t in breaks])
    if budget >= sums[0]:
        return np.clip(y - breaks[0], lo, hi)
    if budget <= sums[-1]:
        return np.clip(y - breaks[-1], lo, hi)
    k = int(np.flatnonzero(sums <= budget)[0])
    t0, t1 = breaks[k - 1], breaks[k]
    s0, s1 = sums[k - 1], sums[k]
    tau = t0 + (s0 - budget) * (t1 - t0) / (s0 - s1)
    return np.clip(y - tau, lo, hi)


class _FaceSearch:
    """Memoized recursion over faces of the box violated by the simplex minimum"""

    def __init__(self, problem: SumDelayProblem, slack: float):
        self.c = problem.c_vector
        self.lo = problem.box.lo_vector
        self.hi = problem.box.hi_vector
        self.budget = problem.budget
        self.slack = slack
        self.memo: Dict[Tuple[Face, ...], Optional[Tuple[float, np.ndarray, Tuple[Face, ...]]]] = {}
        self.nodes_visited = 0

    def solve(self, fixed: Tuple[Face, ...] = ()):
        if fixed not in self.memo:
            self.memo[fixed] = self._evaluate(fixed)
        return self.memo[fixed]

    def _evaluate(self, fixed: Tuple[Face, ...]):
        n = self.c.size
        w = np.zeros(n)
        for i, side in fixed:
            w[i] = self.lo[i] if side is BoundSide.LOWER else self.hi[i]
        # zero capacity on a loaded pipe scores infinite
        if any(w[i] <= 0.0 for i, _ in fixed):
            return None

        taken = {i for i, _ in fixed}
        free = np.array([i for i in range(n) if i not in taken], dtype=int)
        remaining = self.budget - math.fsum(w[i] for i, _ in fixed)
        if remaining <= 0.0:
            return None
        lo, hi = self.lo[free], self.hi[free]
        if math.fsum(lo) > remaining + self.slack or math.fsum(hi) < remaining - self.slack:
            return None

        if free.size == 1:
            w[free[0]] = remaining
            return mean_duration(self.c, w), w, fixed

        self.nodes_visited += 1
        v = simplex_minimum(self.c[free], remaining)
        below = v < lo - self.slack
        above = v > hi + self.slack
        if not (below.any() or above.any()):
            w[free] = v
            return mean_duration(self.c, w), w, fixed

        best = None
        for k in np.flatnonzero(below | above):
            side = BoundSide.LOWER if below[k] else BoundSide.UPPER
            face = tuple(sorted(fixed + ((int(free[k]), side),)))
            candidate = self.solve(face)
            if candidate is not None and (best is None or candidate[0] < best[0]):
                best = candidate
        return best


class AllocationOptimizer:
    """Solvers for the four allocation problems"""

    def __init__(self):
        self.slack = settings.violation_slack
        self.bisection_tol = settings.bisection_tol
        self.descent_tol = settings.descent_tol
        self.descent_step_tol = settings.descent_step_tol
        self.max_iters = settings.max_descent_iters
        self.oracle_points = settings.oracle_points
        self.oracle_improvement = settings.oracle_improvement_tol
        self.oracle_max_passes = settings.oracle_max_passes

    # ------------------------------------------------------------------
    # Problem 1
    # ------------------------------------------------------------------

    def solve_sum_mean_delay(self, problem: SumDelayProblem) -> SolveResult:
        """
        Exact minimizer of sum(c_i / w_i) over the polytope

        Returns:
            SolveResult with the faces fixed at the optimum, the number of
            simplex minima computed and the number of distinct subproblems
        """
        self._require_nonempty(problem)
        search = _FaceSearch(problem, self.slack)
        best = search.solve()
        if best is None:
            raise InfeasibleError(
                "no face of the feasible box admits a finite objective",
                criterion="finite objective on the polytope",
            )
        objective, w, faces = best
        logger.debug(
            f"Face search done: N={problem.n}, objective={objective:.12g}, "
            f"nodes={search.nodes_visited}, subproblems={len(search.memo)}"
        )
        return SolveResult(
            problem=ProblemKind.SUM,
            w=tuple(float(x) for x in problem.expand(w)),
            objective=objective,
            fixed_faces=problem.lift_faces(faces),
            nodes_visited=search.nodes_visited,
            subproblems=len(search.memo),
        )

    def check_kkt(self, problem: SumDelayProblem, w: Sequence[float], tol: float = None) -> KKTCheck:
        """
        Stationarity certificate for Problem 1

        Needs one multiplier lam with c_i/w_i^2 == lam strictly inside the box,
        <= lam at a lower bound and >= lam at an upper bound.
        """
        tol = settings.kkt_tol if tol is None else tol
        w, infeasible = problem.restrict(w, tol)
        infeasible = infeasible or self._feasibility_issue(problem, w, tol)
        if infeasible:
            return KKTCheck(ok=False, diagnostic=infeasible)

        marginal = problem.c_vector / w ** 2
        at_lo = w <= problem.box.lo_vector + tol
        at_hi = w >= problem.box.hi_vector - tol
        return _multiplier_certificate(marginal, at_lo & ~at_hi, at_hi & ~at_lo, ~at_lo & ~at_hi, tol)

    def verify_kkt(self, problem: SumDelayProblem, w: Sequence[float], tol: float = None) -> bool:
        check = self.check_kkt(problem, w, tol)
        if not check.ok:
            logger.info(f"KKT check failed: {check.diagnostic}")
        return check.ok

    # ------------------------------------------------------------------
    # Oracles
    # ------------------------------------------------------------------

    def oracle_solve(
        self,
        problem: SumDelayProblem,
        resolution: float = None,
        mode: str = "grid",
    ) -> SolveResult:
        """
        Independent solution of Problem 1

        mode "grid" refines a lattice over the polytope until its step is
        below ``resolution`` and the incumbent stops improving; mode
        "descent" runs projected gradient descent until the step length drops
        below 1e-12.
        """
        resolution = settings.oracle_resolution if resolution is None else resolution
        if not resolution > 0:
            raise DomainError(f"resolution must be positive, got {resolution}")
        self._require_nonempty(problem)
        c = problem.c_vector
        lo, hi = problem.box.lo_vector, problem.box.hi_vector

        if mode == "grid":
            w, passes = self._grid_search(
                lambda rows: np.where(
                    np.all(rows > 0.0, axis=1),
                    (c / np.where(rows > 0.0, rows, 1.0)).sum(axis=1),
                    np.inf,
                ),
                lo, hi, problem.budget, resolution,
            )
        elif mode == "descent":
            w, passes = self._projected_descent(
                lambda x: _phi_and_gradient(c, x),
                lo, hi, problem.budget,
                grad_tol=0.0,
                step_tol=self.descent_step_tol,
            )
        else:
            raise DomainError(f"unknown oracle mode {mode!r}")

        return SolveResult(
            problem=ProblemKind.SUM,
            w=tuple(float(x) for x in problem.expand(w)),
            objective=mean_duration(c, w),
            fixed_faces=problem.lift_faces(_faces_at_bounds(w, lo, hi, self.slack)),
            nodes_visited=passes,
        )

    # ------------------------------------------------------------------
    # Problem 2
    # ------------------------------------------------------------------

    def solve_minmax_mean_delay(self, problem: SumDelayProblem) -> SolveResult:
        """Equalize c_i / w_i by bisection on the common level"""
        self._require_nonempty(problem)
        c = problem.c_vector
        lo, hi = problem.box.lo_vector, problem.box.hi_vector

        w, iterations = self._level_allocation(
            lambda level: np.clip(c / level, lo, hi),
            lo, hi, problem.budget,
            level_low=float(np.min(c / hi)),
        )
        return SolveResult(
            problem=ProblemKind.MINMAX,
            w=tuple(float(x) for x in problem.expand(w)),
            objective=float(np.max(c / w)),
            fixed_faces=problem.lift_faces(_faces_at_bounds(w, lo, hi, self.bisection_tol)),
            nodes_visited=iterations,
        )

    def verify_minmax(self, problem: SumDelayProblem, w: Sequence[float], tol: float = None) -> bool:
        tol = settings.kkt_tol if tol is None else tol
        w, issue = problem.restrict(w, tol)
        issue = issue or self._feasibility_issue(problem, w, tol)
        if issue:
            logger.info(f"Min-max check failed: {issue}")
            return False
        return _level_certificate(
            problem.c_vector / w, w, problem.box.lo_vector, problem.box.hi_vector, tol
        )

    def oracle_minmax(self, problem: SumDelayProblem, resolution: float = None) -> SolveResult:
        """Grid oracle for Problem 2"""
        resolution = settings.oracle_resolution if resolution is None else resolution
        if not resolution > 0:
            raise DomainError(f"resolution must be positive, got {resolution}")
        self._require_nonempty(problem)
        c = problem.c_vector
        lo, hi = problem.box.lo_vector, problem.box.hi_vector

        w, passes = self._grid_search(
            lambda rows: np.where(
                np.all(rows > 0.0, axis=1),
                (c / np.where(rows > 0.0, rows, 1.0)).max(axis=1),
                np.inf,
            ),
            lo, hi, problem.budget, resolution,
        )
        return SolveResult(
            problem=ProblemKind.MINMAX,
            w=tuple(float(x) for x in problem.expand(w)),
            objective=float(np.max(c / w)) if np.all(w > 0.0) else math.inf,
            fixed_faces=problem.lift_faces(_faces_at_bounds(w, lo, hi, self.slack)),
            nodes_visited=passes,
        )

    # ------------------------------------------------------------------
    # Problems 3 and 4
    # ------------------------------------------------------------------

    def solve_nullification(self, variant: ProblemKind, state: SystemState) -> SolveResult:
        """
        Allocations emptying every queue within the horizon

        variant SUM minimizes sum(b_i^2 / (w_i (w_i - a_i))), variant MINMAX
        its maximum, both over w_i >= w'_i on the simplex.
        """
        variant = _nullification_kind(variant)
        a, b, lo, hi = self._nullification_bounds(state)

        if variant is ProblemKind.NULL_SUM:
            if math.fsum(lo) >= 1.0 - self.bisection_tol:
                w, iterations = lo + (1.0 - math.fsum(lo)) / lo.size, 0
            else:
                w, iterations = self._projected_descent(
                    lambda x: _nullification_sum_and_gradient(a, b, x),
                    lo, hi, 1.0,
                    grad_tol=self.descent_tol,
                    step_tol=0.0,
                )
        else:
            loaded = b > 0.0
            if not loaded.any():
                w, iterations = lo + (1.0 - math.fsum(lo)) / lo.size, 0
            else:
                w, iterations = self._level_allocation(
                    lambda level: np.maximum(lo, (a + np.sqrt(a ** 2 + 4.0 * b ** 2 / level)) / 2.0),
                    lo, hi, 1.0,
                    level_low=None,
                    level_high=float(np.max(b[loaded] * state.t_upd / lo[loaded])),
                )

        levels = _nullification_levels(a, b, w)
        objective = math.fsum(levels) if variant is ProblemKind.NULL_SUM else float(np.max(levels))
        logger.debug(f"Nullification {variant.value} done: objective={objective:.12g}, iterations={iterations}")
        return SolveResult(
            problem=variant,
            w=tuple(float(x) for x in w),
            objective=objective,
            fixed_faces=_faces_at_bounds(w, lo, np.full_like(lo, np.inf), self.bisection_tol),
            nodes_visited=iterations,
        )

    def verify_nullification(
        self, variant: ProblemKind, state: SystemState, w: Sequence[float], tol: float = None
    ) -> bool:
        """Projected-gradient norm (sum) or level certificate (min-max)"""
        tol = settings.kkt_tol if tol is None else tol
        variant = _nullification_kind(variant)
        a, b, lo, hi = self._nullification_bounds(state)
        w = np.asarray(w, dtype=float)
        if abs(math.fsum(w) - 1.0) > tol or np.any(w < lo - tol):
            return False
        if variant is ProblemKind.NULL_SUM:
            _, grad = _nullification_sum_and_gradient(a, b, w)
            pg = w - project_box_hyperplane(w - grad, lo, hi, 1.0)
            return bool(np.linalg.norm(pg) < tol)
        return _level_certificate(_nullification_levels(a, b, w), w, lo, hi, tol)

    def oracle_nullification(
        self, variant: ProblemKind, state: SystemState, resolution: float = None
    ) -> SolveResult:
        """Grid oracle for Problems 3 and 4"""
        resolution = settings.oracle_resolution if resolution is None else resolution
        if not resolution > 0:
            raise DomainError(f"resolution must be positive, got {resolution}")
        variant = _nullification_kind(variant)
        a, b, lo, hi = self._nullification_bounds(state)
        loaded = b > 0.0

        def values(rows: np.ndarray) -> np.ndarray:
            x = rows[:, loaded]
            with np.errstate(divide="ignore", invalid="ignore"):
                terms = b[loaded] ** 2 / (x * (x - a[loaded]))
            terms = np.where(x > a[loaded], terms, np.inf)
            if variant is ProblemKind.NULL_SUM:
                return terms.sum(axis=1)
            return terms.max(axis=1) if terms.shape[1] else np.zeros(rows.shape[0])

        w, passes = self._grid_search(values, lo, hi, 1.0, resolution)
        levels = _nullification_levels(a, b, w)
        return SolveResult(
            problem=variant,
            w=tuple(float(x) for x in w),
            objective=math.fsum(levels) if variant is ProblemKind.NULL_SUM else float(np.max(levels)),
            nodes_visited=passes,
        )

    # ------------------------------------------------------------------
    # Shared machinery
    # ------------------------------------------------------------------

    def _require_nonempty(self, problem: SumDelayProblem) -> None:
        box = problem.box
        if box.lo_sum > problem.budget + self.slack:
            raise InfeasibleError(
                f"lower bounds sum to {box.lo_sum:.12g}, above the budget {problem.budget:.12g}",
                criterion="sum(lo) > budget",
            )
        if box.hi_sum < problem.budget - self.slack:
            raise InfeasibleError(
                f"upper bounds sum to {box.hi_sum:.12g}, below the budget {problem.budget:.12g}",
                criterion="sum(hi) < budget",
            )

    def _nullification_bounds(self, state: SystemState):
        verdict = classify_state(state)
        if not verdict.decomposable:
            raise InfeasibleError(
                f"A + B/t_upd = {verdict.sum_w_prime:.12g} exceeds 1, no allocation empties every queue",
                criterion=DECOMPOSABILITY,
            )
        a, b = state.a, state.b
        lo = np.array([fluid_model.thresholds(p, state.t_upd, state.m)[1] for p in state.pipes])
        return a, b, lo, np.ones_like(lo)

    @staticmethod
    def _feasibility_issue(problem: SumDelayProblem, w: np.ndarray, tol: float) -> str:
        if w.shape != (problem.n,):
            return f"expected {problem.n} capacities, got shape {w.shape}"
        if abs(math.fsum(w) - problem.budget) > tol:
            return f"capacities sum to {math.fsum(w):.12g}, budget is {problem.budget:.12g}"
        if not problem.box.contains(w, tol):
            return "allocation leaves the feasible box"
        if np.any(w <= 0.0):
            return "a loaded pipe gets zero capacity"
        return ""

    def _level_allocation(
        self,
        allocate: Callable[[float], np.ndarray],
        lo: np.ndarray,
        hi: np.ndarray,
        budget: float,
        level_low: Optional[float],
        level_high: Optional[float] = None,
    ) -> Tuple[np.ndarray, int]:
        """
        Bisection on a common level for a nonincreasing level -> allocation map

        Settles on the side whose allocation fits the budget, then hands the
        residual to pipes pinned at their lower bound.
        """
        tol = self.bisection_tol
        if math.fsum(lo) >= budget - tol:
            return _spread_residual(lo.copy(), lo, hi, budget), 0
        if math.fsum(hi) <= budget + tol:
            return _spread_residual(hi.copy(), lo, hi, budget), 0

        excess = lambda level: math.fsum(allocate(level)) - budget
        if level_high is None:
            level_high = 2.0 * level_low
        while excess(level_high) > 0.0:
            level_high *= 2.0
        if level_low is None:
            level_low = level_high / 2.0
        while excess(level_low) < 0.0:
            level_low /= 2.0

        # run to float resolution so the residual handed out below is round-off
        iterations = 0
        while level_high - level_low > 1e-15 * level_high and iterations < 2000:
            iterations += 1
            mid = 0.5 * (level_low + level_high)
            gap = excess(mid)
            if gap > 0.0:
                level_low = mid
            else:
                level_high = mid
                if gap == 0.0:
                    break

        return _spread_residual(allocate(level_high), lo, hi, budget), iterations

    def _grid_search(
        self,
        values: Callable[[np.ndarray], np.ndarray],
        lo: np.ndarray,
        hi: np.ndarray,
        budget: float,
        resolution: float,
    ) -> Tuple[np.ndarray, int]:
        """
        Best lattice point of {lo <= x <= hi, sum(x) = budget}

        One coordinate is solved from the budget; the others run over an even
        lattice that is re-centered on the incumbent and refined until its
        step is below ``resolution`` and a pass no longer improves the
        incumbent by more than ``oracle_improvement_tol`` (relative). Every
        lattice point is feasible, so the result bounds the true minimum from
        above.
        """
        n = lo.size
        lo_eff = np.maximum(lo, budget - (hi.sum() - hi))
        hi_eff = np.minimum(hi, budget - (lo.sum() - lo))
        if n == 1:
            return np.array([budget]), 0
        if n > 6:
            raise DomainError(f"grid oracle supports up to 6 pipes, got {n}")

        per_axis = max(2, int(self.oracle_points ** (1.0 / (n - 1))))
        per_axis -= per_axis % 2
        window_lo, window_hi = lo_eff.copy(), hi_eff.copy()
        dependent = int(np.argmax(hi_eff - lo_eff))
        best, best_value = None, math.inf
        previous_value = math.inf
        passes = 0

        while True:
            passes += 1
            axes = [i for i in range(n) if i != dependent]
            grids = [np.linspace(window_lo[i], window_hi[i], per_axis + 1) for i in axes]
            mesh = np.stack(np.meshgrid(*grids, indexing="ij"), axis=-1).reshape(-1, n - 1)
            last = budget - mesh.sum(axis=1)
            ok = (last >= lo[dependent]) & (last <= hi[dependent])
            rows = np.empty((int(ok.sum()), n))
            rows[:, axes] = mesh[ok]
            rows[:, dependent] = last[ok]

            if rows.shape[0]:
                scores = values(rows)
                k = int(np.argmin(scores))
                if scores[k] < best_value:
                    best, best_value = rows[k].copy(), float(scores[k])

            steps = (window_hi - window_lo) / per_axis
            if best is None:
                if passes > 60:
                    raise InfeasibleError("grid oracle found no feasible lattice point", criterion="polytope too thin")
                per_axis *= 2
                continue
            converged = previous_value - best_value <= self.oracle_improvement * max(1.0, abs(best_value))
            if np.max(steps[axes]) <= resolution and converged:
                break
            if passes >= self.oracle_max_passes:
                logger.warning(f"Grid oracle stopped after {passes} passes at {best_value:.12g}")
                break
            previous_value = best_value

            # next window spans a fixed share of the current lattice around the incumbent
            reach = max(2, per_axis // 8)
            margin = reach * np.maximum(steps, np.max(steps[axes]) * (np.arange(n) == dependent))
            window_lo = np.maximum(lo_eff, best - margin)
            window_hi = np.minimum(hi_eff, best + margin)
            # solve for the coordinate furthest from its bounds
            dependent = int(np.argmax(np.minimum(best - lo, hi - best)))

        return best, passes

    def _projected_descent(
        self,
        objective: Callable[[np.ndarray], Tuple[float, np.ndarray]],
        lo: np.ndarray,
        hi: np.ndarray,
        budget: float,
        grad_tol: float,
        step_tol: float,
    ) -> Tuple[np.ndarray, int]:
        """Projected gradient with Barzilai-Borwein steps and backtracking"""
        project = lambda y: project_box_hyperplane(y, lo, hi, budget)
        spread = hi.sum() - lo.sum()
        theta = (budget - lo.sum()) / spread if spread > 0.0 else 0.0
        x = project(lo + theta * (hi - lo))
        f, g = objective(x)
        step = 1.0 / max(float(np.linalg.norm(g)), 1e-12)

        iteration = 0
        while iteration < self.max_iters:
            iteration += 1
            if grad_tol > 0.0 and np.linalg.norm(x - project(x - g)) < grad_tol:
                break
            while True:
                z = project(x - step * g)
                fz, gz = objective(z)
                d = z - x
                if math.isfinite(fz) and fz <= f + float(g @ d) + float(d @ d) / (2.0 * step):
                    break
                step *= 0.5
                if step < 1e-300:
                    break
            if not math.isfinite(fz):
                break
            moved = float(np.linalg.norm(d))
            s, y = d, gz - g
            curvature = float(s @ y)
            step = float(s @ s) / curvature if curvature > 0.0 else 2.0 * step
            x, f, g = z, fz, gz
            if moved <= step_tol:
                break
        else:
            logger.warning(f"Projected descent hit the iteration cap ({self.max_iters})")

        return x, iteration


def _phi_and_gradient(c: np.ndarray, x: np.ndarray) -> Tuple[float, np.ndarray]:
    if np.any(x <= 0.0):
        return math.inf, np.zeros_like(x)
    return math.fsum(c / x), -c / x ** 2


def _nullification_levels(a: np.ndarray, b: np.ndarray, w: np.ndarray) -> np.ndarray:
    loaded = b > 0.0
    levels = np.zeros_like(w)
    levels[loaded] = b[loaded] ** 2 / (w[loaded] * (w[loaded] - a[loaded]))
    return levels


def _nullification_sum_and_gradient(a: np.ndarray, b: np.ndarray, w: np.ndarray):
    loaded = b > 0.0
    if np.any(w[loaded] <= a[loaded]):
        return math.inf, np.zeros_like(w)
    x, al, bl = w[loaded], a[loaded], b[loaded]
    grad = np.zeros_like(w)
    grad[loaded] = -bl ** 2 * (2.0 * x - al) / (x ** 2 * (x - al) ** 2)
    return math.fsum(bl ** 2 / (x * (x - al))), grad


def _nullification_kind(variant) -> ProblemKind:
    if isinstance(variant, ProblemKind):
        kind = variant
    else:
        kind = {"sum": ProblemKind.NULL_SUM, "minmax": ProblemKind.NULL_MINMAX}.get(variant)
        kind = kind or next((k for k in ProblemKind if k.value == variant), None)
    if kind not in (ProblemKind.NULL_SUM, ProblemKind.NULL_MINMAX):
        raise DomainError(f"not a nullification problem: {variant!r}")
    return kind


def _spread_residual(w: np.ndarray, lo: np.ndarray, hi: np.ndarray, budget: float) -> np.ndarray:
    """Hand budget - sum(w) to pipes at their lower bound first, then to the rest"""
    residual = budget - math.fsum(w)
    if residual <= 0.0:
        return w
    for group in (w <= lo, np.ones_like(w, dtype=bool)):
        room = np.where(group, np.maximum(hi - w, 0.0), 0.0)
        room = np.where(np.isfinite(room), room, 1.0)
        total = room.sum()
        if total <= 0.0:
            continue
        give = min(residual, total)
        w = w + give * room / total
        residual -= give
        if residual <= 0.0:
            break
    return w


def _faces_at_bounds(w: np.ndarray, lo: np.ndarray, hi: np.ndarray, tol: float) -> Tuple[Face, ...]:
    faces: List[Face] = []
    for i, (wi, li, hi_i) in enumerate(zip(w, lo, hi)):
        if wi <= li + tol:
            faces.append((i, BoundSide.LOWER))
        elif wi >= hi_i - tol:
            faces.append((i, BoundSide.UPPER))
    return tuple(faces)


def _multiplier_certificate(
    marginal: np.ndarray,
    at_lo: np.ndarray,
    at_hi: np.ndarray,
    interior: np.ndarray,
    tol: float,
) -> KKTCheck:
    floor = float(marginal[at_lo].max()) if at_lo.any() else -math.inf
    ceiling = float(marginal[at_hi].min()) if at_hi.any() else math.inf

    if interior.any():
        inner = marginal[interior]
        lam = float(np.median(inner))
        scale = max(1.0, abs(lam))
        spread = float(inner.max() - inner.min())
        if spread > tol * scale:
            return KKTCheck(ok=False, multiplier=lam, diagnostic=f"interior marginals differ by {spread:.3g}")
    else:
        lam = floor if math.isfinite(floor) else ceiling
        scale = max(1.0, abs(lam)) if math.isfinite(lam) else 1.0

    if floor > lam + tol * scale:
        return KKTCheck(ok=False, multiplier=lam, diagnostic=f"a pipe at its lower bound has marginal {floor:.12g} > {lam:.12g}")
    if ceiling < lam - tol * scale:
        return KKTCheck(ok=False, multiplier=lam, diagnostic=f"a pipe at its upper bound has marginal {ceiling:.12g} < {lam:.12g}")
    return KKTCheck(ok=True, multiplier=lam)


def _level_certificate(
    levels: np.ndarray, w: np.ndarray, lo: np.ndarray, hi: np.ndarray, tol: float
) -> bool:
    """
    A min-max allocation is optimal when some top-level pipe is capped at its
    upper bound, or no other pipe can give capacity away
    """
    top = float(levels.max())
    scale = max(1.0, abs(top))
    leaders = levels >= top - tol * scale
    if np.any(leaders & (w >= hi - tol)):
        return True
    donors = ~leaders & (w > lo + tol)
    return not bool(donors.any())


# Global instance
allocation_optimizer = AllocationOptimizer()
