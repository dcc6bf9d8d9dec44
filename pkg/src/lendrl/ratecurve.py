"""Two-slope ("kinked") utilization interest-rate curve.

Below the kink ``u_star`` the borrow rate rises with ``slope1``; above it
with ``slope2``. Depositors receive the borrow rate scaled by utilization,
net of the reserve factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, EmptyInput
from .ingest import FeatureSeries
from .trajectory import RateTrajectory


@dataclass(frozen=True)
class KinkParams:
    r_base: float = 0.0
    u_star: float = 0.8
    slope1: float = 0.04
    slope2: float = 0.75
    reserve_factor: float = 0.1

    def __post_init__(self) -> None:
        if not 0.0 < self.u_star < 1.0:
            raise DomainError(f"u_star must lie in (0, 1), got {self.u_star}")
        if self.slope1 < 0 or self.slope2 < 0:
            raise DomainError("slopes must be non-negative")
        if self.r_base < 0:
            raise DomainError("r_base must be non-negative")
        if not 0.0 <= self.reserve_factor <= 1.0:
            raise DomainError("reserve_factor must lie in [0, 1]")


def _check_unit(name: str, x: float) -> None:
    if not 0.0 <= x <= 1.0:
        raise DomainError(f"{name} must lie in [0, 1], got {x}")


def borrow_rate(u: float, p: KinkParams) -> float:
    _check_unit("utilization", u)
    if u <= p.u_star:
        return p.r_base + u * p.slope1
    return p.r_base + p.u_star * p.slope1 + (u - p.u_star) * p.slope2


def deposit_rate(r_b: float, u: float, reserve_factor: float) -> float:
    _check_unit("utilization", u)
    _check_unit("reserve_factor", reserve_factor)
    return r_b * u * (1.0 - reserve_factor)


def curve_rates(u: float, p: KinkParams) -> tuple[float, float]:
    """(borrow, deposit) rate at utilization ``u``."""
    b = borrow_rate(u, p)
    return b, deposit_rate(b, u, p.reserve_factor)


def baseline_trajectory(series: FeatureSeries, p: KinkParams) -> RateTrajectory:
    """Apply the curve to each day's historical utilization (open loop)."""
    if len(series) == 0:
        raise EmptyInput("feature series is empty")
    pairs = [curve_rates(r.utilization_rate, p) for r in series.rows]
    return RateTrajectory(
        series.pool_id,
        series.dates,
        liquidity_rate=np.array([d for _, d in pairs]),
        borrow_rate=np.array([b for b, _ in pairs]),
        source="rule_based",
    )


def recorded_trajectory(series: FeatureSeries) -> RateTrajectory:
    """The historical rate columns, unchanged."""
    if len(series) == 0:
        raise EmptyInput("feature series is empty")
    return RateTrajectory(
        series.pool_id,
        series.dates,
        liquidity_rate=series.column("liquidity_rate"),
        borrow_rate=series.column("variable_borrow_rate"),
        source="recorded",
    )
