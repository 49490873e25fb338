"""Epoch-based policy evaluation on arrival traces"""
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from fluidsched.config import get_settings
from fluidsched.core.errors import DomainError
from fluidsched.core.fluid_model import BehaviorCase, SystemState
from fluidsched.core.policies import Policy, PolicyEngine, policy_engine
from fluidsched.core.state_analysis import predict_state
from fluidsched.utils.logger import logger

REPORT_COLUMNS = [
    "epoch",
    "pipe",
    "policy",
    "w",
    "predicted_delay",
    "realized_delay",
    "predicted_drops_paper",
    "realized_drops",
    "fallback_flag",
    "case",
    "intensity_estimate",
    "queue_start",
    "queue_end",
    "predicted_drops_constant",
    "realized_drops_paper",
]


class TraceKind(str, Enum):
    CONSTANT = "constant"
    PIECEWISE_CONSTANT = "piecewise-constant"
    POISSON_BUCKETED = "poisson-bucketed"
    ON_OFF = "on-off"


Rates = Tuple[float, ...]


class TraceSpec(BaseModel):
    """Recipe for a per-pipe arrival-rate table"""

    model_config = ConfigDict(frozen=True)

    kind: TraceKind
    duration: float = Field(gt=0.0, allow_inf_nan=False)
    resolution: float = Field(gt=0.0, allow_inf_nan=False)
    seed: int = Field(default_factory=lambda: get_settings().seed, ge=0, lt=2 ** 64)

    # constant, poisson-bucketed
    rates: Optional[Rates] = None
    # piecewise-constant: levels[k] holds between breakpoints[k-1] and breakpoints[k]
    breakpoints: Rates = ()
    levels: Optional[Tuple[Rates, ...]] = None
    # on-off, starting in the on phase; no off_duration means off forever
    on_rates: Optional[Rates] = None
    off_rates: Optional[Rates] = None
    on_duration: Optional[float] = Field(default=None, gt=0.0)
    off_duration: Optional[float] = Field(default=None, gt=0.0)
    # poisson-bucketed granularity (data units per task)
    task_size: float = Field(default=0.01, gt=0.0)

    @model_validator(mode="after")
    def _kind_parameters(self) -> "TraceSpec":
        if self.resolution > self.duration:
            raise ValueError("resolution exceeds duration")
        vectors = self._rate_vectors()
        if not vectors:
            raise ValueError(f"trace kind {self.kind.value} is missing its rates")
        sizes = {len(v) for v in vectors}
        if len(sizes) != 1 or 0 in sizes:
            raise ValueError("every rate vector needs one entry per pipe")
        for vector in vectors:
            if any(not math.isfinite(x) or x < 0.0 for x in vector):
                raise ValueError("rates must be finite and nonnegative")
        if self.kind is TraceKind.PIECEWISE_CONSTANT:
            if len(self.levels) != len(self.breakpoints) + 1:
                raise ValueError("need exactly one more level than breakpoints")
            if any(t1 <= t0 for t0, t1 in zip(self.breakpoints, self.breakpoints[1:])):
                raise ValueError("breakpoints must increase")
        if self.kind is TraceKind.ON_OFF and self.on_duration is None:
            raise ValueError("on-off traces need on_duration")
        return self

    def _rate_vectors(self) -> List[Rates]:
        if self.kind in (TraceKind.CONSTANT, TraceKind.POISSON_BUCKETED):
            return [self.rates] if self.rates is not None else []
        if self.kind is TraceKind.PIECEWISE_CONSTANT:
            return list(self.levels or ())
        vectors = [self.on_rates] if self.on_rates is not None else []
        if vectors and self.off_rates is not None:
            vectors.append(self.off_rates)
        return vectors

    @property
    def n_pipes(self) -> int:
        return len(self._rate_vectors()[0])


@dataclass(frozen=True)
class ArrivalTrace:
    """Step function of inflow rates: rates[k, i] holds on [k h, (k+1) h)"""

    resolution: float
    rates: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.rates.shape[0]

    @property
    def n_pipes(self) -> int:
        return self.rates.shape[1]

    @property
    def duration(self) -> float:
        return self.n_steps * self.resolution

    def segment(self, start: int, count: int) -> np.ndarray:
        return self.rates[start:start + count]


class EpochReport(BaseModel):
    """Realized and predicted per-pipe quantities for one epoch"""

    model_config = ConfigDict(frozen=True)

    epoch: int
    policy: str
    fallback: bool
    allocation: Rates
    intensity_estimate: Rates
    queue_start: Rates
    queue_end: Rates
    inflow: Rates
    served: Rates
    realized_delay: Rates
    realized_drops: Rates
    realized_drops_paper: Rates
    predicted_case: Tuple[BehaviorCase, ...]
    predicted_delay: Rates
    predicted_drops_paper: Rates
    predicted_drops_constant: Rates
    queue_path: Optional[Tuple[Rates, ...]] = None


def generate_trace(spec: TraceSpec) -> ArrivalTrace:
    """
    Materialize a trace spec

    Buckets are classified by their midpoint. Identical specs, seed
    included, give identical tables.
    """
    n_steps = int(round(spec.duration / spec.resolution))
    if abs(n_steps * spec.resolution - spec.duration) > 1e-9 * spec.duration:
        raise DomainError(
            f"duration {spec.duration} is not a multiple of resolution {spec.resolution}"
        )
    mids = (np.arange(n_steps) + 0.5) * spec.resolution
    n = spec.n_pipes

    if spec.kind is TraceKind.CONSTANT:
        rates = np.tile(np.array(spec.rates, dtype=float), (n_steps, 1))
    elif spec.kind is TraceKind.PIECEWISE_CONSTANT:
        segment = np.searchsorted(np.array(spec.breakpoints, dtype=float), mids, side="right")
        rates = np.array(spec.levels, dtype=float)[segment]
    elif spec.kind is TraceKind.ON_OFF:
        if spec.off_duration is None:
            on = mids < spec.on_duration
        else:
            on = np.mod(mids, spec.on_duration + spec.off_duration) < spec.on_duration
        off_rates = np.array(spec.off_rates if spec.off_rates is not None else (0.0,) * n)
        rates = np.where(on[:, None], np.array(spec.on_rates, dtype=float), off_rates)
    else:
        rng = np.random.default_rng(spec.seed)
        expected = np.array(spec.rates, dtype=float) * spec.resolution / spec.task_size
        counts = rng.poisson(expected, size=(n_steps, n))
        rates = counts * spec.task_size / spec.resolution

    return ArrivalTrace(resolution=spec.resolution, rates=np.ascontiguousarray(rates, dtype=float))


def _integrate_epoch(
    queue: np.ndarray, rates: np.ndarray, w: np.ndarray, h: float, m: float
) -> Dict[str, np.ndarray]:
    """
    Exact fluid dynamics over one epoch of piecewise-constant inflow

    Within a step the queue moves linearly at rate - w until it meets 0 or m;
    at m the excess is dropped, at 0 the processor serves the inflow only.
    """
    q = queue.copy()
    totals = {key: np.zeros_like(q) for key in ("inflow", "served", "dropped", "area", "drop_area")}
    cumulative_drops = np.zeros_like(q)
    path = np.empty_like(rates)

    for k, r in enumerate(rates):
        net = r - w
        with np.errstate(divide="ignore", invalid="ignore"):
            t_full = np.where(net > 0.0, (m - q) / net, np.inf)
            t_empty = np.where(net < 0.0, q / -net, np.inf)
        hit_full = t_full < h
        hit_empty = t_empty < h
        t_full = np.minimum(t_full, h)
        t_empty = np.minimum(t_empty, h)

        q_end = np.where(hit_full, m, np.where(hit_empty, 0.0, q + net * h))
        q_end = np.clip(q_end, 0.0, m)
        overflow = np.where(hit_full, net * (h - t_full), 0.0)

        totals["area"] += np.where(
            hit_full,
            t_full * (q + m) / 2.0 + (h - t_full) * m,
            np.where(hit_empty, t_empty * q / 2.0, h * (q + q_end) / 2.0),
        )
        totals["drop_area"] += cumulative_drops * h + np.where(hit_full, net * (h - t_full) ** 2 / 2.0, 0.0)
        totals["served"] += np.where(hit_empty, q + r * h, w * h)
        totals["inflow"] += r * h
        totals["dropped"] += overflow
        cumulative_drops += overflow
        q = q_end
        path[k] = q

    totals["queue_end"] = q
    totals["path"] = path
    return totals


class Simulator:
    """Runs policies against traces epoch by epoch"""

    def __init__(self, policies: PolicyEngine = policy_engine):
        self.policies = policies

    def run_simulation(
        self,
        state: SystemState,
        trace: ArrivalTrace,
        policy: Policy,
        epochs: int,
        record_path: bool = False,
    ) -> List[EpochReport]:
        """
        Simulate ``epochs`` decision periods of length ``state.t_upd``

        Each epoch re-solves the allocation from the observed backlog and the
        previous epoch's mean inflow (the first epoch uses the declared
        intensities), integrates the clamped fluid dynamics and records the
        realized metrics next to the fluid-model predictions.
        """
        steps = self._steps_per_epoch(state, trace, epochs)
        t_upd, m = state.t_upd, state.m
        labels = [pipe.label for pipe in state.pipes]
        queue = state.b.copy()
        estimate = state.a.copy()
        reports: List[EpochReport] = []

        for epoch in range(epochs):
            observed = SystemState.from_arrays(
                np.clip(estimate, 0.0, 1.0), np.clip(queue, 0.0, m), t_upd, m, labels
            )
            decision = self.policies.allocate(policy, observed)
            w = decision.allocation.vector
            predictions = predict_state(observed, decision.allocation)
            outcome = _integrate_epoch(
                observed.b, trace.segment(epoch * steps, steps), w, trace.resolution, m
            )

            with np.errstate(divide="ignore", invalid="ignore"):
                realized_delay = np.where(
                    outcome["area"] > 0.0, outcome["area"] / (w * t_upd), 0.0
                )
            realized_delay = np.where(
                (w == 0.0) & (outcome["area"] > 0.0), np.inf, realized_delay
            )

            reports.append(EpochReport(
                epoch=epoch,
                policy=policy.name,
                fallback=decision.fallback,
                allocation=decision.allocation.w,
                intensity_estimate=_floats(observed.a),
                queue_start=_floats(observed.b),
                queue_end=_floats(outcome["queue_end"]),
                inflow=_floats(outcome["inflow"]),
                served=_floats(outcome["served"]),
                realized_delay=_floats(realized_delay),
                realized_drops=_floats(outcome["dropped"]),
                realized_drops_paper=_floats(outcome["drop_area"]),
                predicted_case=tuple(p.case for p in predictions),
                predicted_delay=tuple(p.mean_delay for p in predictions),
                predicted_drops_paper=tuple(p.dropped for p in predictions),
                predicted_drops_constant=tuple(p.dropped_constant_rate for p in predictions),
                queue_path=tuple(_floats(row) for row in outcome["path"]) if record_path else None,
            ))
            queue = outcome["queue_end"]
            estimate = outcome["inflow"] / t_upd

        logger.info(f"Simulated {epochs} epochs of {policy.name} on {state.n} pipes")
        return reports

    def compare_policies(
        self,
        state: SystemState,
        trace: ArrivalTrace,
        policies: Sequence[Policy],
        epochs: int,
    ) -> pd.DataFrame:
        """Aggregate delays and drops per policy on one shared trace"""
        rows = []
        for policy in policies:
            reports = self.run_simulation(state, trace, policy, epochs)
            rows.append({
                "policy": policy.name,
                "epochs": epochs,
                "sum_mean_delay": float(np.mean([sum(r.realized_delay) for r in reports])),
                "predicted_sum_first_epoch": float(sum(reports[0].predicted_delay)),
                "total_drops": float(sum(sum(r.realized_drops) for r in reports)),
                "total_drops_paper": float(sum(sum(r.realized_drops_paper) for r in reports)),
                "fallbacks": sum(r.fallback for r in reports),
            })
        return pd.DataFrame(rows)

    @staticmethod
    def _steps_per_epoch(state: SystemState, trace: ArrivalTrace, epochs: int) -> int:
        if epochs < 1:
            raise DomainError(f"need at least one epoch, got {epochs}")
        if trace.n_pipes != state.n:
            raise DomainError(f"trace has {trace.n_pipes} pipes, state has {state.n}")
        if trace.resolution > state.t_upd / 10.0 * (1.0 + 1e-12):
            raise DomainError(
                f"resolution {trace.resolution} is coarser than t_upd/10 = {state.t_upd / 10.0}"
            )
        steps = int(round(state.t_upd / trace.resolution))
        if abs(steps * trace.resolution - state.t_upd) > 1e-9 * state.t_upd:
            raise DomainError(
                f"t_upd {state.t_upd} is not a multiple of resolution {trace.resolution}"
            )
        if epochs * steps > trace.n_steps:
            raise DomainError(
                f"trace covers {trace.duration:g} time units, {epochs} epochs need {epochs * state.t_upd:g}"
            )
        return steps


def reports_frame(reports: Sequence[EpochReport]) -> pd.DataFrame:
    """One row per (epoch, pipe) in the published CSV column order"""
    rows = []
    for report in reports:
        for i, w in enumerate(report.allocation):
            rows.append({
                "epoch": report.epoch,
                "pipe": i,
                "policy": report.policy,
                "w": w,
                "predicted_delay": report.predicted_delay[i],
                "realized_delay": report.realized_delay[i],
                "predicted_drops_paper": report.predicted_drops_paper[i],
                "realized_drops": report.realized_drops[i],
                "fallback_flag": int(report.fallback),
                "case": report.predicted_case[i].value,
                "intensity_estimate": report.intensity_estimate[i],
                "queue_start": report.queue_start[i],
                "queue_end": report.queue_end[i],
                "predicted_drops_constant": report.predicted_drops_constant[i],
                "realized_drops_paper": report.realized_drops_paper[i],
            })
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def _floats(values: np.ndarray) -> Tuple[float, ...]:
    return tuple(float(x) for x in values)


# Global instance
simulator = Simulator()
