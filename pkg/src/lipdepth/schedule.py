"""DropPath schedules over transformer blocks and the Lipschitz budget condition."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

KINDS = ("none", "linear", "custom")


class ScheduleError(ValueError):
    """Invalid schedule parameters (domain error)."""


class InfeasibleScheduleError(ScheduleError):
    """The requested target would need negative drop probabilities."""


class InvalidLambdaError(ScheduleError):
    pass


@dataclass(frozen=True)
class DropSchedule:
    probs: tuple[float, ...]
    kind: str = "none"
    kappa_target: float | None = None
    p_max: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        if self.kind not in KINDS:
            raise ScheduleError(f"unknown schedule kind {self.kind!r}")
        if not self.probs:
            raise ScheduleError("schedule needs at least one block")
        for p in self.probs:
            if not (0.0 <= p <= 1.0):
                raise ScheduleError(f"drop probability {p} outside [0, 1]")
        if self.kind == "none" and any(self.probs):
            raise ScheduleError("kind 'none' requires an all-zero schedule")

    @property
    def L(self) -> int:
        return len(self.probs)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "L": self.L,
            "kappa_target": self.kappa_target,
            "p_max": self.p_max,
            "probs": list(self.probs),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> DropSchedule:
        probs = d["probs"]
        if "L" in d and d["L"] != len(probs):
            raise ScheduleError(f"L={d['L']} does not match {len(probs)} probabilities")
        return cls(probs=tuple(probs), kind=d.get("kind", "none"),
                   kappa_target=d.get("kappa_target"), p_max=d.get("p_max"))


def no_drop_schedule(L: int) -> DropSchedule:
    _check_depth(L)
    return DropSchedule(probs=(0.0,) * L, kind="none")


def custom_schedule(L: int, kappa_target: float) -> DropSchedule:
    """Depth-dependent schedule ``p(l) = 1 - kappa_target**(l/L)`` for l = 1..L."""
    _check_depth(L)
    if not kappa_target > 0:
        raise ScheduleError(f"kappa_target must be > 0, got {kappa_target}")
    if kappa_target > 1:
        raise InfeasibleScheduleError(
            f"kappa_target={kappa_target} > 1 gives negative drop probabilities; "
            "values above 1 are rejected rather than clamped")
    probs = [1.0 - kappa_target ** (l / L) for l in range(1, L + 1)]
    # l/L == 1 exactly at the last block, so this is already 1 - kappa_target
    return DropSchedule(probs=tuple(probs), kind="custom", kappa_target=float(kappa_target))


def linear_schedule(L: int, p_max: float) -> DropSchedule:
    """Linear ramp from 0 at the first block to ``p_max`` at the last."""
    _check_depth(L)
    if not (0.0 <= p_max <= 1.0):
        raise ScheduleError(f"p_max must lie in [0, 1], got {p_max}")
    if L == 1:
        probs = [p_max]
    else:
        probs = [p_max * (l - 1) / (L - 1) for l in range(1, L + 1)]
    return DropSchedule(probs=tuple(probs), kind="linear", p_max=float(p_max))


def make_schedule(kind: str, L: int, kappa_target: float | None = None,
                  p_max: float | None = None) -> DropSchedule:
    if kind == "none":
        return no_drop_schedule(L)
    if kind == "linear":
        if p_max is None:
            raise ScheduleError("linear schedule needs p_max")
        return linear_schedule(L, p_max)
    if kind == "custom":
        if kappa_target is None:
            raise ScheduleError("custom schedule needs kappa_target")
        return custom_schedule(L, kappa_target)
    raise ScheduleError(f"unknown schedule kind {kind!r}")


def _check_depth(L) -> None:
    if not isinstance(L, (int, np.integer)) or L < 1:
        raise ScheduleError(f"block count must be a positive integer, got {L!r}")


@dataclass(frozen=True)
class BudgetResult:
    satisfied: bool
    lhs: float
    rhs: float
    infeasible_regime: bool = False
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"satisfied": self.satisfied, "lhs": self.lhs, "rhs": self.rhs,
                "infeasible_regime": self.infeasible_regime}


BUDGET_RTOL = 1e-12


def budget_check(schedule: DropSchedule, lam: float, kappa_target: float) -> BudgetResult:
    """Check ``sum_l p(l) <= ln(kappa_target) / (lam - 1)``.

    A negative right-hand side cannot be met by any nonnegative schedule;
    that case is flagged as the infeasible regime.
    """
    if lam == 1:
        raise InvalidLambdaError("lambda = 1 makes the budget undefined (division by zero)")
    if not kappa_target > 0:
        raise ScheduleError(f"kappa_target must be > 0, got {kappa_target}")
    lhs = math.fsum(schedule.probs)
    rhs = math.log(kappa_target) / (lam - 1.0)
    if rhs < 0:
        return BudgetResult(False, lhs, rhs, infeasible_regime=True,
                            notes=["right-hand side is negative: no nonnegative schedule satisfies it"])
    # rhs carries rounding from log and the division; don't fail on the last few ulps
    return BudgetResult(lhs <= rhs + BUDGET_RTOL * max(1.0, rhs), lhs, rhs)
