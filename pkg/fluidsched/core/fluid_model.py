"""Closed-form local predictions for a single pipe

A pipe with frozen arrival intensity ``a`` and backlog ``b`` served at
capacity ``w`` follows the line ``s(t) = b + (a - w) t`` clamped to
``[0, m]``. Its delay is ``D(t) = s(t) / w``. Depending on ``w`` the line
either reaches the buffer size before the horizon (overfills), stays inside
the buffer (confined), or empties the queue (nullifies).
"""
import math
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import integrate

from fluidsched.config import get_settings
from fluidsched.core.errors import DomainError

settings = get_settings()


class BehaviorCase(str, Enum):
    """Position of the predicted queue line over the horizon"""

    OVERFILLS = "overfills"
    CONFINED = "confined"
    NULLIFIES = "nullifies"


class PipeState(BaseModel):
    """One queue at decision time"""

    model_config = ConfigDict(frozen=True)

    a: float = Field(ge=0.0, le=1.0, allow_inf_nan=False)
    b: float = Field(ge=0.0, allow_inf_nan=False)
    label: Optional[str] = None


class SystemState(BaseModel):
    """N pipes sharing one unit-capacity processor"""

    model_config = ConfigDict(frozen=True)

    pipes: Tuple[PipeState, ...] = Field(min_length=1)
    t_upd: float = Field(gt=0.0, allow_inf_nan=False)
    m: float = Field(gt=0.0, allow_inf_nan=False)

    @model_validator(mode="after")
    def _backlogs_fit_buffer(self) -> "SystemState":
        for i, pipe in enumerate(self.pipes):
            if pipe.b > self.m:
                raise ValueError(
                    f"pipe {i}: backlog b={pipe.b} exceeds buffer size m={self.m}"
                )
        return self

    @classmethod
    def from_arrays(
        cls,
        a: Sequence[float],
        b: Sequence[float],
        t_upd: float,
        m: float,
        labels: Optional[Sequence[Optional[str]]] = None,
    ) -> "SystemState":
        if len(a) != len(b):
            raise DomainError(f"got {len(a)} intensities but {len(b)} backlogs")
        labels = labels or [None] * len(a)
        pipes = tuple(
            PipeState(a=float(ai), b=float(bi), label=label)
            for ai, bi, label in zip(a, b, labels)
        )
        return cls(pipes=pipes, t_upd=t_upd, m=m)

    @property
    def n(self) -> int:
        return len(self.pipes)

    @property
    def a(self) -> np.ndarray:
        return np.array([pipe.a for pipe in self.pipes], dtype=float)

    @property
    def b(self) -> np.ndarray:
        return np.array([pipe.b for pipe in self.pipes], dtype=float)


class Allocation(BaseModel):
    """Capacity vector on the standard simplex"""

    model_config = ConfigDict(frozen=True)

    w: Tuple[float, ...] = Field(min_length=1)

    @field_validator("w")
    @classmethod
    def _on_simplex(cls, w: Tuple[float, ...]) -> Tuple[float, ...]:
        if any(not math.isfinite(x) or x < 0.0 for x in w):
            raise ValueError("capacities must be finite and nonnegative")
        total = math.fsum(w)
        if abs(total - 1.0) > settings.simplex_tol:
            raise ValueError(f"capacities sum to {total!r}, expected 1")
        return w

    @classmethod
    def from_vector(cls, w: Sequence[float]) -> "Allocation":
        """Build from a solver vector, zeroing round-off negatives"""
        vector = np.asarray(w, dtype=float)
        if vector.size and vector.min() >= -settings.simplex_tol:
            vector = np.clip(vector, 0.0, None)
        return cls(w=tuple(float(x) for x in vector))

    @classmethod
    def equal_split(cls, n: int) -> "Allocation":
        return cls(w=(1.0 / n,) * n)

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.w, dtype=float)

    def __len__(self) -> int:
        return len(self.w)


class PipePrediction(BaseModel):
    """Local forecast for one pipe under one capacity value"""

    model_config = ConfigDict(frozen=True)

    case: BehaviorCase
    w: float
    w_star: float
    w_prime: float
    mean_delay: float = Field(ge=0.0)
    dropped: float = Field(ge=0.0)
    dropped_constant_rate: float = Field(ge=0.0)
    # 0 when the queue starts full (overfills) or empty (nullifies)
    crossing_time: Optional[float] = Field(default=None, ge=0.0)


def _check_domain(pipe: PipeState, t_upd: float, m: float) -> None:
    if not t_upd > 0:
        raise DomainError(f"t_upd must be positive, got {t_upd}")
    if not m > 0:
        raise DomainError(f"buffer size must be positive, got {m}")
    if pipe.b > m:
        raise DomainError(f"backlog b={pipe.b} exceeds buffer size m={m}")


def _check_capacity(w: float) -> None:
    if not 0.0 <= w <= 1.0:
        raise DomainError(f"capacity must lie in [0, 1], got {w}")


def thresholds(pipe: PipeState, t_upd: float, m: float) -> Tuple[float, float]:
    """
    Case thresholds of a pipe

    Returns:
        (w_star, w_prime): below w_star the queue overfills, above w_prime
        it empties before the horizon. w_star may be negative, which marks
        a guaranteed no-drop pipe.
    """
    _check_domain(pipe, t_upd, m)
    return pipe.a - (m - pipe.b) / t_upd, pipe.a + pipe.b / t_upd


def classify(pipe: PipeState, w: float, t_upd: float, m: float) -> BehaviorCase:
    """Behavior case of a pipe; both thresholds belong to CONFINED"""
    _check_capacity(w)
    w_star, w_prime = thresholds(pipe, t_upd, m)
    if w < w_star:
        return BehaviorCase.OVERFILLS
    if w > w_prime:
        return BehaviorCase.NULLIFIES
    return BehaviorCase.CONFINED


def crossing_time(
    pipe: PipeState, w: float, t_upd: float, m: float
) -> Optional[float]:
    """
    Time the queue line hits m (overfills) or 0 (nullifies)

    Lies in [0, t_upd). It is 0 exactly when the line starts on the bound it
    would cross: b = m for an overfilling pipe, b = 0 for a nullifying one.
    None for a confined pipe.
    """
    case = classify(pipe, w, t_upd, m)
    if case is BehaviorCase.OVERFILLS:
        return (m - pipe.b) / (pipe.a - w)
    if case is BehaviorCase.NULLIFIES:
        return pipe.b / (w - pipe.a)
    return None


def predicted_queue_size(
    pipe: PipeState, w: float, t: float, t_upd: float, m: float
) -> float:
    _check_capacity(w)
    _check_domain(pipe, t_upd, m)
    if not 0.0 <= t <= t_upd:
        raise DomainError(f"t={t} outside the horizon [0, {t_upd}]")
    return min(max(pipe.b + (pipe.a - w) * t, 0.0), m)


def predicted_delay(
    pipe: PipeState, w: float, t: float, t_upd: float, m: float
) -> float:
    """Clamped delay forecast D(t); an empty queue has zero delay"""
    size = predicted_queue_size(pipe, w, t, t_upd, m)
    if size == 0.0:
        return 0.0
    if w == 0.0:
        return math.inf
    return size / w


def delay_antiderivative(pipe: PipeState, w: float, t: float) -> float:
    """Antiderivative of the unclamped delay line, F(0) = 0"""
    if not 0.0 < w <= 1.0:
        raise DomainError(f"capacity must lie in (0, 1], got {w}")
    return (pipe.a - w) / (2.0 * w) * t ** 2 + pipe.b / w * t


def mean_local_delay(pipe: PipeState, w: float, t_upd: float, m: float) -> float:
    """
    Time average of D(t) over the horizon

    Zero capacity gives ``math.inf`` unless the pipe is idle and empty.
    """
    case = classify(pipe, w, t_upd, m)
    a, b = pipe.a, pipe.b
    if w == 0.0:
        return 0.0 if a == 0.0 and b == 0.0 else math.inf
    if case is BehaviorCase.OVERFILLS:
        return m / w - (m - b) ** 2 / (2.0 * w * (a - w) * t_upd)
    if case is BehaviorCase.NULLIFIES:
        return b ** 2 / (2.0 * w * (w - a) * t_upd)
    return max(0.0, (a * t_upd / 2.0 + b) / w - t_upd / 2.0)


def dropped_volume(pipe: PipeState, w: float, t_upd: float, m: float) -> float:
    """
    Predicted drops over the horizon

    Integrates the growing excess ``(a - w) t`` over the window after the
    buffer fills, i.e.

        T²/2 (a - w) + (m - b)² / (2 (a - w)) - (m - b) T

    evaluated in the factored form ``(a - w) (T - t*)² / 2``.
    """
    if classify(pipe, w, t_upd, m) is not BehaviorCase.OVERFILLS:
        return 0.0
    rate = pipe.a - w
    t_star = (m - pipe.b) / rate
    return rate * (t_upd - t_star) ** 2 / 2.0


def dropped_volume_constant_rate(
    pipe: PipeState, w: float, t_upd: float, m: float
) -> float:
    """Conserved overflow: excess rate times the time spent full"""
    if classify(pipe, w, t_upd, m) is not BehaviorCase.OVERFILLS:
        return 0.0
    rate = pipe.a - w
    return rate * (t_upd - (m - pipe.b) / rate)


def integrated_mean_delay(
    pipe: PipeState, w: float, t_upd: float, m: float
) -> float:
    """Numerical twin of mean_local_delay by adaptive quadrature"""
    if w == 0.0:
        return mean_local_delay(pipe, w, t_upd, m)
    kink = crossing_time(pipe, w, t_upd, m)
    points = [kink] if kink is not None and 0.0 < kink < t_upd else None
    slope = pipe.a - w
    area, _ = integrate.quad(
        lambda t: min(max(pipe.b + slope * t, 0.0), m) / w,
        0.0,
        t_upd,
        points=points,
        epsabs=0.0,
        epsrel=1e-12,
        limit=200,
    )
    return area / t_upd


def predict(pipe: PipeState, w: float, t_upd: float, m: float) -> PipePrediction:
    w_star, w_prime = thresholds(pipe, t_upd, m)
    return PipePrediction(
        case=classify(pipe, w, t_upd, m),
        w=w,
        w_star=w_star,
        w_prime=w_prime,
        mean_delay=mean_local_delay(pipe, w, t_upd, m),
        dropped=dropped_volume(pipe, w, t_upd, m),
        dropped_constant_rate=dropped_volume_constant_rate(pipe, w, t_upd, m),
        crossing_time=crossing_time(pipe, w, t_upd, m),
    )
