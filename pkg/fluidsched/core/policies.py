"""Allocation policies evaluated by the simulator"""
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from fluidsched.core.errors import DomainError, InfeasibleError
from fluidsched.core.fluid_model import Allocation, SystemState
from fluidsched.core.optimizer import AllocationOptimizer, SumDelayProblem, allocation_optimizer
from fluidsched.utils.logger import logger


class PolicyKind(str, Enum):
    SUM_OPTIMAL = "sum-optimal"
    MINMAX_OPTIMAL = "minmax-optimal"
    EQUAL_SPLIT = "equal-split"
    PROPORTIONAL_TO_BACKLOG = "proportional-backlog"
    PROPORTIONAL_TO_INTENSITY = "proportional-intensity"
    STATIC = "static"


class Policy(BaseModel):
    """A scheduling rule; STATIC carries its fixed capacity vector"""

    model_config = ConfigDict(frozen=True)

    kind: PolicyKind
    weights: Optional[Tuple[float, ...]] = None

    @model_validator(mode="after")
    def _weights_match_kind(self) -> "Policy":
        if self.kind is PolicyKind.STATIC:
            if self.weights is None:
                raise ValueError("a static policy needs weights")
            Allocation(w=self.weights)
        elif self.weights is not None:
            raise ValueError(f"policy {self.kind.value} takes no weights")
        return self

    @classmethod
    def parse(cls, text: str) -> "Policy":
        """Parse ``sum-optimal`` or ``static:0.3,0.7``"""
        name, _, arguments = text.strip().partition(":")
        try:
            kind = PolicyKind(name)
        except ValueError:
            known = ", ".join(k.value for k in PolicyKind)
            raise DomainError(f"unknown policy {name!r} (known: {known})")
        if kind is PolicyKind.STATIC:
            try:
                weights = tuple(float(x) for x in arguments.split(","))
            except ValueError:
                raise DomainError(f"bad static weights {arguments!r}")
            return cls(kind=kind, weights=weights)
        return cls(kind=kind)

    @property
    def name(self) -> str:
        if self.kind is PolicyKind.STATIC:
            return "static:" + ",".join(f"{x:g}" for x in self.weights)
        return self.kind.value


class PolicyDecision(BaseModel):
    model_config = ConfigDict(frozen=True)

    allocation: Allocation
    fallback: bool = False
    reason: str = ""


class PolicyEngine:
    """Turns an observed state into an allocation"""

    def __init__(self, optimizer: AllocationOptimizer = allocation_optimizer):
        self.optimizer = optimizer

    def allocate(self, policy: Policy, state: SystemState) -> PolicyDecision:
        """
        Allocation for ``state`` under ``policy``

        Solver policies fall back to an equal split when their problem is
        infeasible for the state; the decision records the fallback.
        """
        try:
            return PolicyDecision(allocation=self._allocate(policy, state))
        except InfeasibleError as e:
            logger.warning(f"{policy.name} infeasible ({e.criterion}), using equal split")
            return PolicyDecision(
                allocation=Allocation.equal_split(state.n),
                fallback=True,
                reason=str(e),
            )

    def _allocate(self, policy: Policy, state: SystemState) -> Allocation:
        kind = policy.kind
        if kind is PolicyKind.SUM_OPTIMAL:
            problem = SumDelayProblem.from_state(state)
            return self.optimizer.solve_sum_mean_delay(problem).allocation()
        if kind is PolicyKind.MINMAX_OPTIMAL:
            problem = SumDelayProblem.from_state(state)
            return self.optimizer.solve_minmax_mean_delay(problem).allocation()
        if kind is PolicyKind.EQUAL_SPLIT:
            return Allocation.equal_split(state.n)
        if kind is PolicyKind.PROPORTIONAL_TO_BACKLOG:
            return _proportional(state.b)
        if kind is PolicyKind.PROPORTIONAL_TO_INTENSITY:
            return _proportional(state.a)
        if len(policy.weights) != state.n:
            raise DomainError(
                f"static policy has {len(policy.weights)} weights for {state.n} pipes"
            )
        return Allocation(w=policy.weights)


def _proportional(weights: np.ndarray) -> Allocation:
    total = weights.sum()
    if total <= 0.0:
        return Allocation.equal_split(weights.size)
    return Allocation.from_vector(weights / total)


# Global instance
policy_engine = PolicyEngine()
