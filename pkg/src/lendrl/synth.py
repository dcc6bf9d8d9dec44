"""Seeded synthetic reserve history for tests and demos.

Utilization follows a mean-reverting process in logit space with rare
jumps; recorded rates come from the kinked curve plus multiplicative noise.
"""

from __future__ import annotations

from datetime import date, datetime, timezone

import numpy as np

from .ingest import ReserveSnapshot
from .ratecurve import KinkParams, borrow_rate, deposit_rate

DEFAULT_START = date(2022, 6, 3)


def generate_snapshots(
    n_days: int = 1000,
    seed: int = 0,
    pool_id: str = "v2-WETH",
    start: date = DEFAULT_START,
    params: KinkParams | None = None,
    decimals: int = 18,
    rate_noise: float = 0.02,
) -> list[ReserveSnapshot]:
    p = params or KinkParams()
    rng = np.random.default_rng(seed)
    t0 = int(datetime(start.year, start.month, start.day, tzinfo=timezone.utc).timestamp())
    scale = 10**decimals

    x = 0.4  # logit utilization, ~0.6
    log_liq = np.log(1.0e6)
    liq_index = var_index = 1.0
    out = []
    for t in range(n_days):
        x += 0.05 * (0.4 - x) + 0.08 * rng.normal()
        if rng.random() < 0.01:
            x += rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.5)
        u = 1.0 / (1.0 + np.exp(-x))
        log_liq += 0.01 * rng.normal()
        total = np.exp(log_liq)
        debt = u * total

        b = borrow_rate(u, p) * max(0.0, 1.0 + rate_noise * rng.normal())
        lq = deposit_rate(b, u, p.reserve_factor)
        liq_index *= 1.0 + lq / 365.0
        var_index *= 1.0 + b / 365.0

        out.append(
            ReserveSnapshot(
                timestamp_unix=t0 + 86400 * t + int(rng.integers(0, 3600)),
                pool_id=pool_id,
                decimals=decimals,
                available_liquidity=int(round((total - debt) * 1e6)) * scale // 10**6,
                total_liquidity=int(round(total * 1e6)) * scale // 10**6,
                total_liquidity_as_collateral=int(round(0.9 * total * 1e6)) * scale // 10**6,
                total_debt=int(round(debt * 1e6)) * scale // 10**6,
                total_variable_debt=int(round(0.98 * debt * 1e6)) * scale // 10**6,
                liquidity_rate_apr=float(lq),
                variable_borrow_rate_apr=float(b),
                liquidity_index=float(liq_index),
                variable_borrow_index=float(var_index),
                deposit_volume=int(round(rng.lognormal(np.log(2e4), 0.5) * 1e6)) * scale // 10**6,
                borrow_volume=int(round(rng.lognormal(np.log(1.5e4), 0.5) * 1e6)) * scale // 10**6,
                base_ltv_as_collateral=0.8,
                reserve_factor=p.reserve_factor,
                reserve_liquidation_threshold=0.85,
            )
        )
    return out
