"""Reserve snapshot parsing and feature engineering.

Raw daily reserve records (CSV with header, or JSON lines) are parsed into
:class:`ReserveSnapshot` values, scaled to token units, and turned into a
:class:`FeatureSeries` whose rows carry the 21 state features in a fixed
order (see :data:`STATE_FEATURES`).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from datetime import date, datetime, timezone
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DuplicateDate,
    EmptyInput,
    MissingColumn,
    MissingFeature,
    NonMonotonicTimestamp,
    UnparsableField,
    WindowTooLong,
)

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 7
DEFAULT_EPSILON = 1e-6

# Canonical state order: liquidity (L), debt (D), interest (I), risk (R).
STATE_FEATURES: tuple[str, ...] = (
    # L
    "available_liquidity",
    "total_liquidity",
    "liquidity_as_collateral",
    "utilization_rate",
    # D
    "total_debt",
    "variable_debt",
    "deposit_volume",
    "borrow_volume",
    "deposit_borrow_ratio",
    # I
    "liquidity_index",
    "liquidity_rate",
    "variable_borrow_index",
    "variable_borrow_rate",
    "deposit_yield_apy",
    # R
    "ltv",
    "liquidity_volatility",
    "utilization_volatility",
    "liquidity_rate_momentum",
    "borrow_rate_momentum",
    "liquidity_rate_volatility",
    "borrow_rate_volatility",
)
assert len(STATE_FEATURES) == 21

RAW_AMOUNT_FIELDS = (
    "available_liquidity",
    "total_liquidity",
    "total_liquidity_as_collateral",
    "total_debt",
    "total_variable_debt",
    "deposit_volume",
    "borrow_volume",
)
REAL_FIELDS = (
    "liquidity_rate_apr",
    "variable_borrow_rate_apr",
    "liquidity_index",
    "variable_borrow_index",
    "base_ltv_as_collateral",
    "reserve_factor",
    "reserve_liquidation_threshold",
)
SNAPSHOT_FIELDS = ("timestamp_unix", "pool_id", "decimals") + RAW_AMOUNT_FIELDS + REAL_FIELDS


@dataclass(frozen=True)
class ReserveSnapshot:
    """One day of raw on-chain reserve metrics for a pool.

    Amount fields are raw integers in the token's smallest unit; rates are
    annual fractions (APR).
    """

    timestamp_unix: int
    pool_id: str
    decimals: int
    available_liquidity: int
    total_liquidity: int
    total_liquidity_as_collateral: int
    total_debt: int
    total_variable_debt: int
    liquidity_rate_apr: float
    variable_borrow_rate_apr: float
    liquidity_index: float
    variable_borrow_index: float
    deposit_volume: int
    borrow_volume: int
    base_ltv_as_collateral: float
    reserve_factor: float
    reserve_liquidation_threshold: float


@dataclass(frozen=True)
class NormalizedSnapshot:
    """A snapshot with token amounts in whole-token units and a calendar day."""

    date: date
    pool_id: str
    available_liquidity: float
    total_liquidity: float
    total_liquidity_as_collateral: float
    total_debt: float
    total_variable_debt: float
    deposit_volume: float
    borrow_volume: float
    liquidity_rate_apr: float
    variable_borrow_rate_apr: float
    deposit_yield_apy: float
    liquidity_index: float
    variable_borrow_index: float
    base_ltv_as_collateral: float
    reserve_factor: float
    reserve_liquidation_threshold: float


@dataclass(frozen=True)
class FeatureRow:
    date: date
    available_liquidity: float
    total_liquidity: float
    liquidity_as_collateral: float
    utilization_rate: float
    total_debt: float
    variable_debt: float
    deposit_volume: float
    borrow_volume: float
    deposit_borrow_ratio: float
    liquidity_index: float
    liquidity_rate: float
    variable_borrow_index: float
    variable_borrow_rate: float
    deposit_yield_apy: float
    ltv: float
    liquidity_volatility: float
    utilization_volatility: float
    liquidity_rate_momentum: float
    borrow_rate_momentum: float
    liquidity_rate_volatility: float
    borrow_rate_volatility: float
    is_at_risk: int

    def state_values(self) -> tuple[float, ...]:
        return tuple(getattr(self, name) for name in STATE_FEATURES)


_ROW_FIELD_NAMES = tuple(f.name for f in fields(FeatureRow))
# the automated count guard: every state feature is a FeatureRow field, plus date and is_at_risk
assert set(STATE_FEATURES) <= set(_ROW_FIELD_NAMES) and len(_ROW_FIELD_NAMES) == 23

FEATURE_CSV_COLUMNS: tuple[str, ...] = ("date",) + STATE_FEATURES + ("is_at_risk",)


@dataclass
class FeatureSeries:
    pool_id: str
    rows: list[FeatureRow]
    window: int = DEFAULT_WINDOW

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def dates(self) -> list[date]:
        return [r.date for r in self.rows]

    def matrix(self) -> np.ndarray:
        """States as an ``(N, 21)`` float64 array in canonical order."""
        if not self.rows:
            return np.zeros((0, len(STATE_FEATURES)))
        return np.array([r.state_values() for r in self.rows], dtype=np.float64)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=np.float64)

    def slice(self, start: int, stop: int | None = None) -> "FeatureSeries":
        return FeatureSeries(self.pool_id, self.rows[start:stop], self.window)

    def to_csv(self, fh: IO[str]) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FEATURE_CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.date.isoformat()] + [repr(float(getattr(r, n))) for n in STATE_FEATURES] + [r.is_at_risk])

    @classmethod
    def from_csv(cls, fh: IO[str], pool_id: str, window: int = DEFAULT_WINDOW) -> "FeatureSeries":
        reader = csv.DictReader(fh)
        rows = []
        for rec in reader:
            kwargs = {n: float(rec[n]) for n in STATE_FEATURES}
            rows.append(FeatureRow(date=date.fromisoformat(rec["date"]), is_at_risk=int(rec["is_at_risk"]), **kwargs))
        return cls(pool_id, rows, window)


# ---------------------------------------------------------------- parsing


def _parse_int(value: object, row: int, column: str) -> int:
    if isinstance(value, bool):
        raise UnparsableField(row, column, value)
    if isinstance(value, int):
        return value
    try:
        d = Decimal(str(value).strip())
    except (InvalidOperation, ValueError):
        raise UnparsableField(row, column, value) from None
    if not d.is_finite() or d != d.to_integral_value():
        raise UnparsableField(row, column, value)
    return int(d)


def _parse_float(value: object, row: int, column: str) -> float:
    if isinstance(value, bool):
        raise UnparsableField(row, column, value)
    try:
        out = float(value)  # type: ignore[arg-type]
    except (TypeError, ValueError):
        raise UnparsableField(row, column, value) from None
    if not math.isfinite(out):
        raise UnparsableField(row, column, value)
    return out


def _records(text: str, fmt: str | None) -> Iterable[Mapping[str, object]]:
    stripped = text.lstrip()
    if fmt is None:
        fmt = "jsonl" if stripped.startswith("{") else "csv"
    if fmt == "jsonl":
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise UnparsableField(lineno, "<record>", str(exc)) from None
            if not isinstance(rec, dict):
                raise UnparsableField(lineno, "<record>", rec)
            yield rec
    elif fmt == "csv":
        yield from csv.DictReader(io.StringIO(text))
    else:
        raise ValueError(f"unknown input format {fmt!r}")


def parse_snapshots(
    data: bytes | str,
    schema: Mapping[str, str] | None = None,
    fmt: str | None = None,
) -> list[ReserveSnapshot]:
    """Parse CSV or JSON-lines reserve records into snapshots.

    ``schema`` maps snapshot field names to the column names used in the
    input; unmapped fields are looked up under their own name. The format is
    sniffed from the first character unless ``fmt`` is ``"csv"`` or
    ``"jsonl"``. Output is sorted by ``(pool_id, timestamp)``; two records of
    the same pool with the same timestamp raise :class:`NonMonotonicTimestamp`.
    """
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    if not text.strip():
        return []
    colmap = {f: (schema or {}).get(f, f) for f in SNAPSHOT_FIELDS}

    out: list[tuple[int, ReserveSnapshot]] = []
    for i, rec in enumerate(_records(text, fmt), start=1):
        for f in SNAPSHOT_FIELDS:
            if colmap[f] not in rec:
                raise MissingColumn(colmap[f])
        kw: dict[str, object] = {}
        for f in SNAPSHOT_FIELDS:
            col = colmap[f]
            raw = rec[col]
            if f == "pool_id":
                kw[f] = str(raw)
            elif f in REAL_FIELDS:
                kw[f] = _parse_float(raw, i, col)
            else:
                kw[f] = _parse_int(raw, i, col)
        for f in ("decimals",) + RAW_AMOUNT_FIELDS:
            if kw[f] < 0:  # type: ignore[operator]
                raise UnparsableField(i, colmap[f], kw[f])
        for f in ("reserve_factor", "reserve_liquidation_threshold"):
            if not 0.0 <= kw[f] <= 1.0:  # type: ignore[operator]
                raise UnparsableField(i, colmap[f], kw[f])
        out.append((i, ReserveSnapshot(**kw)))  # type: ignore[arg-type]

    out.sort(key=lambda t: (t[1].pool_id, t[1].timestamp_unix))
    for (_, a), (row, b) in zip(out, out[1:]):
        if a.pool_id == b.pool_id and a.timestamp_unix == b.timestamp_unix:
            raise NonMonotonicTimestamp(row)
    return [s for _, s in out]


def snapshots_to_csv(snapshots: Sequence[ReserveSnapshot], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SNAPSHOT_FIELDS)
    for s in snapshots:
        d = asdict(s)
        w.writerow([repr(d[f]) if isinstance(d[f], float) else d[f] for f in SNAPSHOT_FIELDS])


# ---------------------------------------------------------------- per-row features


def apr_to_apy(apr: float) -> float:
    """Daily-compounded effective annual yield of a nominal annual rate."""
    return (1.0 + apr / 365.0) ** 365 - 1.0


def _scale(raw: int, decimals: int) -> float:
    return float(Fraction(raw, 10**decimals))


def normalize_units(s: ReserveSnapshot) -> NormalizedSnapshot:
    day = datetime.fromtimestamp(s.timestamp_unix, tz=timezone.utc).date()
    amounts = {f: _scale(getattr(s, f), s.decimals) for f in RAW_AMOUNT_FIELDS}
    return NormalizedSnapshot(
        date=day,
        pool_id=s.pool_id,
        liquidity_rate_apr=s.liquidity_rate_apr,
        variable_borrow_rate_apr=s.variable_borrow_rate_apr,
        deposit_yield_apy=apr_to_apy(s.liquidity_rate_apr),
        liquidity_index=s.liquidity_index,
        variable_borrow_index=s.variable_borrow_index,
        base_ltv_as_collateral=s.base_ltv_as_collateral,
        reserve_factor=s.reserve_factor,
        reserve_liquidation_threshold=s.reserve_liquidation_threshold,
        **amounts,
    )


def utilization(total_debt: float, total_liquidity: float, epsilon: float = DEFAULT_EPSILON) -> float:
    """Debt over supplied liquidity, clamped to [0, 1]."""
    u = total_debt / (total_liquidity + epsilon)
    return min(max(u, 0.0), 1.0)


def derive_row_features(s: NormalizedSnapshot, epsilon: float = DEFAULT_EPSILON) -> dict[str, float]:
    """Utilization, LTV, liquidation-risk flag and deposit/borrow ratio for one day."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    ltv = s.total_debt / (s.total_liquidity_as_collateral + epsilon)
    return {
        "utilization_rate": utilization(s.total_debt, s.total_liquidity, epsilon),
        "ltv": ltv,
        "is_at_risk": 1 if ltv > s.reserve_liquidation_threshold else 0,
        "deposit_borrow_ratio": s.deposit_volume / (s.borrow_volume + epsilon),
    }


# ---------------------------------------------------------------- rolling statistics


def rolling_stats(series: Sequence[float] | np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Trailing ``n``-day mean (momentum) and population std (volatility).

    Positions ``t < n - 1`` are NaN. Windows are shifted by their first value
    before averaging, so a constant window yields exactly its value and
    exactly zero volatility.
    """
    if n < 2:
        raise ValueError("window must be at least 2")
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1 or len(x) < n:
        raise WindowTooLong(f"series of length {len(x)} is shorter than window {n}")
    win = np.lib.stride_tricks.sliding_window_view(x, n)
    dev = win - win[:, :1]
    shift = dev.mean(axis=1)
    var = ((dev - shift[:, None]) ** 2).mean(axis=1)
    momentum = np.full(len(x), np.nan)
    volatility = np.full(len(x), np.nan)
    momentum[n - 1 :] = win[:, 0] + shift
    volatility[n - 1 :] = np.sqrt(var)
    return momentum, volatility


def build_feature_series(
    snapshots: Sequence[ReserveSnapshot],
    window: int = DEFAULT_WINDOW,
    epsilon: float = DEFAULT_EPSILON,
) -> FeatureSeries:
    """Assemble the engineered feature rows for one pool.

    The first ``window - 1`` days only seed the rolling statistics and are
    dropped, so ``N`` snapshots give ``N - window + 1`` rows.
    """
    if not snapshots:
        raise EmptyInput("no snapshots")
    pools = {s.pool_id for s in snapshots}
    if len(pools) != 1:
        raise ValueError(f"expected a single pool, got {sorted(pools)}")
    for i, (a, b) in enumerate(zip(snapshots, snapshots[1:]), start=2):
        if b.timestamp_unix <= a.timestamp_unix:
            raise NonMonotonicTimestamp(i, "timestamps not strictly increasing")

    norm = [normalize_units(s) for s in snapshots]
    seen: set[date] = set()
    for ns in norm:
        if ns.date in seen:
            raise DuplicateDate(ns.date)
        seen.add(ns.date)
    per_row = [derive_row_features(ns, epsilon) for ns in norm]

    _, liq_vol = rolling_stats([ns.total_liquidity for ns in norm], window)
    _, util_vol = rolling_stats([r["utilization_rate"] for r in per_row], window)
    lr_mom, lr_vol = rolling_stats([ns.liquidity_rate_apr for ns in norm], window)
    br_mom, br_vol = rolling_stats([ns.variable_borrow_rate_apr for ns in norm], window)

    rows = []
    for t in range(window - 1, len(norm)):
        ns, d = norm[t], per_row[t]
        rows.append(
            FeatureRow(
                date=ns.date,
                available_liquidity=ns.available_liquidity,
                total_liquidity=ns.total_liquidity,
                liquidity_as_collateral=ns.total_liquidity_as_collateral,
                utilization_rate=d["utilization_rate"],
                total_debt=ns.total_debt,
                variable_debt=ns.total_variable_debt,
                deposit_volume=ns.deposit_volume,
                borrow_volume=ns.borrow_volume,
                deposit_borrow_ratio=d["deposit_borrow_ratio"],
                liquidity_index=ns.liquidity_index,
                liquidity_rate=ns.liquidity_rate_apr,
                variable_borrow_index=ns.variable_borrow_index,
                variable_borrow_rate=ns.variable_borrow_rate_apr,
                deposit_yield_apy=ns.deposit_yield_apy,
                ltv=d["ltv"],
                liquidity_volatility=float(liq_vol[t]),
                utilization_volatility=float(util_vol[t]),
                liquidity_rate_momentum=float(lr_mom[t]),
                borrow_rate_momentum=float(br_mom[t]),
                liquidity_rate_volatility=float(lr_vol[t]),
                borrow_rate_volatility=float(br_vol[t]),
                is_at_risk=int(d["is_at_risk"]),
            )
        )
    for r in rows:
        for name in STATE_FEATURES:
            if not math.isfinite(getattr(r, name)):
                raise MissingFeature(name)
    logger.debug("built %d feature rows for %s", len(rows), snapshots[0].pool_id)
    return FeatureSeries(snapshots[0].pool_id, rows, window)


def group_by_pool(snapshots: Iterable[ReserveSnapshot]) -> dict[str, list[ReserveSnapshot]]:
    out: dict[str, list[ReserveSnapshot]] = {}
    for s in snapshots:
        out.setdefault(s.pool_id, []).append(s)
    return out
