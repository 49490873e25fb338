"""Whole-system classification of a state"""
import math
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from fluidsched.core import fluid_model
from fluidsched.core.errors import DomainError
from fluidsched.core.fluid_model import (
    Allocation,
    BehaviorCase,
    PipePrediction,
    SystemState,
)


class Criterion(str, Enum):
    """Aggregate criteria on a state and the property each one decides"""

    DECOMPOSABILITY = "decomposability"   # some allocation empties every queue
    AVOIDABILITY = "avoidability"         # some allocation drops nothing
    NONINCREASE = "nonincrease"           # some allocation grows no queue


class StateClass(BaseModel):
    """Aggregate totals and criteria verdicts for one state"""

    model_config = ConfigDict(frozen=True)

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
    nodrop_pipes: Tuple[int, ...]


class FeasibleBox(BaseModel):
    """Per-pipe capacity intervals; with the simplex they cut out the polytope"""

    model_config = ConfigDict(frozen=True)

    lo: Tuple[float, ...]
    hi: Tuple[float, ...]

    @model_validator(mode="after")
    def _ordered(self) -> "FeasibleBox":
        if len(self.lo) != len(self.hi):
            raise ValueError("lo and hi must have the same length")
        for i, (lo, hi) in enumerate(zip(self.lo, self.hi)):
            if not 0.0 <= lo <= hi:
                raise ValueError(f"pipe {i}: need 0 <= lo <= hi, got [{lo}, {hi}]")
        return self

    @property
    def n(self) -> int:
        return len(self.lo)

    @property
    def lo_vector(self) -> np.ndarray:
        return np.array(self.lo, dtype=float)

    @property
    def hi_vector(self) -> np.ndarray:
        return np.array(self.hi, dtype=float)

    @property
    def lo_sum(self) -> float:
        return math.fsum(self.lo)

    @property
    def hi_sum(self) -> float:
        return math.fsum(self.hi)

    def nonempty(self, budget: float = 1.0, tol: float = 0.0) -> bool:
        """Whether the box meets the hyperplane sum(w) = budget"""
        return self.lo_sum <= budget + tol and self.hi_sum >= budget - tol

    def contains(self, w: Sequence[float], tol: float = 1e-9) -> bool:
        w = np.asarray(w, dtype=float)
        return bool(
            np.all(w >= self.lo_vector - tol) and np.all(w <= self.hi_vector + tol)
        )


def _threshold_vectors(state: SystemState) -> Tuple[np.ndarray, np.ndarray]:
    pairs = [fluid_model.thresholds(pipe, state.t_upd, state.m) for pipe in state.pipes]
    return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])


def classify_state(state: SystemState) -> StateClass:
    w_star, _ = _threshold_vectors(state)
    total_a = math.fsum(state.a)
    total_b = math.fsum(state.b)
    sum_w_prime = total_a + total_b / state.t_upd
    sum_w_star_plus = math.fsum(np.maximum(w_star, 0.0))
    avoidable = sum_w_star_plus <= 1.0
    strictly_decomposable = sum_w_prime < 1.0

    return StateClass(
        total_a=total_a,
        total_b=total_b,
        sum_w_prime=sum_w_prime,
        sum_w_star=total_a + (total_b - state.m * state.n) / state.t_upd,
        sum_w_star_plus=sum_w_star_plus,
        decomposable=sum_w_prime <= 1.0,
        strictly_decomposable=strictly_decomposable,
        avoidable=avoidable,
        nonincreasable=total_a <= 1.0,
        # boundary A + B/T = 1 is both decomposable and steady
        steady=avoidable and not strictly_decomposable,
        nodrop_pipes=tuple(int(i) for i in np.flatnonzero(w_star <= 0.0)),
    )


def feasible_box(state: SystemState) -> FeasibleBox:
    w_star, w_prime = _threshold_vectors(state)
    return FeasibleBox(
        lo=tuple(float(x) for x in np.maximum(w_star, 0.0)),
        hi=tuple(float(x) for x in w_prime),
    )


def allocation_cases(state: SystemState, allocation: Allocation) -> List[BehaviorCase]:
    _check_size(state, allocation)
    return [
        fluid_model.classify(pipe, w, state.t_upd, state.m)
        for pipe, w in zip(state.pipes, allocation.w)
    ]


def uniform_case(state: SystemState, allocation: Allocation) -> Optional[BehaviorCase]:
    """The shared case if every pipe behaves alike, else None"""
    cases = set(allocation_cases(state, allocation))
    return cases.pop() if len(cases) == 1 else None


def predict_state(state: SystemState, allocation: Allocation) -> List[PipePrediction]:
    _check_size(state, allocation)
    return [
        fluid_model.predict(pipe, w, state.t_upd, state.m)
        for pipe, w in zip(state.pipes, allocation.w)
    ]


def lower_bound_witness(bounds: Sequence[float]) -> Optional[Allocation]:
    """
    Allocation meeting w_i >= bounds_i, or None when none exists

    Leftover capacity is spread equally, so every pipe keeps its bound.
    """
    floors = np.maximum(np.asarray(bounds, dtype=float), 0.0)
    total = math.fsum(floors)
    if total > 1.0:
        return None
    return Allocation.from_vector(floors + (1.0 - total) / floors.size)


def criterion_witness(state: SystemState, criterion: Criterion) -> Optional[Allocation]:
    """Constructive witness for one of the aggregate criteria"""
    w_star, w_prime = _threshold_vectors(state)
    bounds = {
        Criterion.DECOMPOSABILITY: w_prime,
        Criterion.AVOIDABILITY: w_star,
        Criterion.NONINCREASE: state.a,
    }[criterion]
    return lower_bound_witness(bounds)


def random_steady_states(
    count: int, seed: int = 0, max_n: int = 5, t_upd: float = 10.0, m: float = 5.0
) -> List[SystemState]:
    """Reproducible steady states with 2..max_n pipes, drawn by rejection"""
    rng = np.random.default_rng(seed)
    states: List[SystemState] = []
    while len(states) < count:
        n = int(rng.integers(2, max_n + 1))
        a = rng.uniform(0.05, 0.6, size=n)
        b = rng.uniform(0.2, 0.9 * m, size=n)
        state = SystemState.from_arrays(a, b, t_upd, m)
        if classify_state(state).steady:
            states.append(state)
    return states


def _check_size(state: SystemState, allocation: Allocation) -> None:
    if len(allocation) != state.n:
        raise DomainError(
            f"allocation has {len(allocation)} entries for {state.n} pipes"
        )
