from __future__ import annotations

from dataclasses import replace
from datetime import date, timedelta

import numpy as np
import pytest

from lendrl.ingest import ReserveSnapshot, build_feature_series
from lendrl.mdp import RewardConfig, build_dataset
from lendrl.synth import generate_snapshots

DAY = 86400
T0 = 1_654_214_400  # 2022-06-03 00:00 UTC


def make_snapshot(day: int = 0, **overrides) -> ReserveSnapshot:
    base = ReserveSnapshot(
        timestamp_unix=T0 + day * DAY,
        pool_id="v2-TEST",
        decimals=18,
        available_liquidity=40 * 10**18,
        total_liquidity=100 * 10**18,
        total_liquidity_as_collateral=90 * 10**18,
        total_debt=60 * 10**18,
        total_variable_debt=58 * 10**18,
        liquidity_rate_apr=0.02,
        variable_borrow_rate_apr=0.04,
        liquidity_index=1.01,
        variable_borrow_index=1.02,
        deposit_volume=5 * 10**18,
        borrow_volume=4 * 10**18,
        base_ltv_as_collateral=0.8,
        reserve_factor=0.1,
        reserve_liquidation_threshold=0.85,
    )
    return replace(base, **overrides)


def constant_snapshots(n: int, **overrides) -> list[ReserveSnapshot]:
    return [make_snapshot(d, **overrides) for d in range(n)]


@pytest.fixture(scope="session")
def synth_snapshots() -> list[ReserveSnapshot]:
    return generate_snapshots(120, seed=3)


@pytest.fixture(scope="session")
def synth_series(synth_snapshots):
    return build_feature_series(synth_snapshots)


@pytest.fixture(scope="session")
def synth_dataset(synth_series):
    return build_dataset(synth_series, RewardConfig())


def dates_from(start: date, n: int) -> list[date]:
    return [start + timedelta(days=i) for i in range(n)]


def nudge_off_kinks(x: np.ndarray) -> np.ndarray:
    return x + np.where(np.abs(x) < 1e-3, 1e-2, 0.0)
