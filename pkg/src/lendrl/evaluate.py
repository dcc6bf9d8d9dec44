"""Counterfactual rate replay and comparison metrics.

Replay is semi-open-loop: the policy sees the historical state of each day
and its rate changes are integrated from the first historical rates, but
the historical states themselves are never perturbed (there is no market
response model).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from datetime import date
from typing import IO, Callable, Mapping, Sequence, Union

import numpy as np

from .agents import PolicyBundle, act
from .errors import BadBins, EmptySeries, EmptyWindow, SeriesTooShort, ZeroBaseline
from .ingest import FeatureSeries
from .mdp import UTIL_IDX
from .ratecurve import KinkParams, baseline_trajectory, curve_rates, recorded_trajectory
from .trajectory import RateTrajectory

RATE_TYPES = ("borrow", "liquidity")
RATE_TYPE_LABELS = {"borrow": "Borrow Rate", "liquidity": "Liquidity Rate"}
DEFAULT_RATE_CAP = 1.0
DEFAULT_LOG_EDGES = tuple(float(e) for e in range(-8, 1))
QUANTILES = (5, 25, 50, 75, 95)

FOOTER = (
    "Percent changes are computed from full-precision standard deviations, so "
    "they can differ from a recomputation using the rounded values shown. "
    "Example: the displayed pair 3.31E-02 -> 3.33E-02 gives +0.604%, whereas a "
    "published +0.73% for the same displayed pair is only consistent with "
    "unrounded inputs."
)

# (state, current (liquidity, borrow) rates) -> (d_liquidity, d_borrow)
RatePolicy = Callable[[np.ndarray, tuple[float, float]], Sequence[float]]


@dataclass(frozen=True)
class StressWindow:
    label: str
    start: date
    end: date

    def __post_init__(self) -> None:
        if not self.start < self.end:
            raise ValueError(f"stress window {self.label!r}: start must precede end")

    def to_dict(self) -> dict:
        return {"label": self.label, "start": self.start.isoformat(), "end": self.end.isoformat()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "StressWindow":
        return cls(str(d["label"]), date.fromisoformat(str(d["start"])), date.fromisoformat(str(d["end"])))


DEFAULT_STRESS_WINDOWS: tuple[StressWindow, ...] = (
    StressWindow("2022/2/1--2022/10/31", date(2022, 2, 1), date(2022, 10, 31)),
    StressWindow("2024/1/1--2024/12/31", date(2024, 1, 1), date(2024, 12, 31)),
    StressWindow("2024/4/1--2024/10/31", date(2024, 4, 1), date(2024, 10, 31)),
    StressWindow("FTX collapse (Nov 2022)", date(2022, 11, 1), date(2022, 11, 30)),
    StressWindow("USDC depeg (Mar 2023)", date(2023, 3, 1), date(2023, 3, 31)),
    StressWindow("ETH crash (Aug 2024)", date(2024, 8, 1), date(2024, 8, 31)),
)


class RuleBasedPolicy:
    """The kinked curve expressed as rate changes, for use with :func:`replay_policy`."""

    def __init__(self, params: KinkParams):
        self.params = params

    def __call__(self, state: np.ndarray, rates: tuple[float, float]) -> tuple[float, float]:
        b, d = curve_rates(float(state[UTIL_IDX]), self.params)
        return d - rates[0], b - rates[1]


def replay_policy(
    policy: Union[PolicyBundle, RatePolicy],
    series: FeatureSeries,
    rate_cap: float | None = DEFAULT_RATE_CAP,
    initial_rates: tuple[float, float] | None = None,
    source: str | None = None,
) -> RateTrajectory:
    """Integrate policy rate changes over the historical states of ``series``.

    ``rate_t = clip(rate_{t-1} + delta(state_t), 0, rate_cap)`` with rates
    starting from the first row's historical (liquidity, borrow) rates unless
    ``initial_rates`` is given. ``rate_cap=None`` disables clipping.
    """
    n = len(series)
    if n == 0:
        raise EmptySeries("cannot replay over an empty series")
    states = series.matrix()
    if isinstance(policy, PolicyBundle):
        deltas = act(policy, states)
        step = lambda t, rates: deltas[t]  # noqa: E731
        source = source or f"policy:{policy.algorithm}"
    else:
        step = lambda t, rates: policy(states[t], rates)  # noqa: E731
        source = source or "policy:custom"

    def clip(x: float) -> float:
        return x if rate_cap is None else min(max(x, 0.0), rate_cap)

    if initial_rates is None:
        initial_rates = (series.rows[0].liquidity_rate, series.rows[0].variable_borrow_rate)
    liq = np.empty(n)
    bor = np.empty(n)
    liq[0], bor[0] = clip(initial_rates[0]), clip(initial_rates[1])
    for t in range(1, n):
        d_liq, d_bor = step(t, (liq[t - 1], bor[t - 1]))
        liq[t] = clip(liq[t - 1] + float(d_liq))
        bor[t] = clip(bor[t - 1] + float(d_bor))
    return RateTrajectory(series.pool_id, series.dates, liq, bor, source)


# ---------------------------------------------------------------- metrics


def rate_change_volatility(series: Sequence[float] | np.ndarray) -> float:
    """Population standard deviation of day-over-day changes."""
    x = np.asarray(series, dtype=np.float64)
    if len(x) < 2:
        raise SeriesTooShort("need at least two points for a rate change")
    return float(np.std(np.diff(x)))


def volatility_comparison(baseline_std: float, candidate_std: float) -> float:
    """Percent change of the candidate's volatility relative to the baseline."""
    if not baseline_std > 0:
        raise ZeroBaseline("baseline volatility is zero")
    return 100.0 * (candidate_std - baseline_std) / baseline_std


def format_percent(pct: float | None, digits: int = 3) -> str:
    return "n/a" if pct is None else f"{pct:+.{digits}f}%"


def format_volatility_row(asset: str, rate_type: str, baseline_std: float, candidate_std: float) -> str:
    """One line in the layout ``asset | rate type | baseline | candidate | change``."""
    try:
        pct = volatility_comparison(baseline_std, candidate_std)
    except ZeroBaseline:
        pct = None
    label = RATE_TYPE_LABELS.get(rate_type, rate_type)
    return f"{asset} | {label} | {baseline_std:.2E} | {candidate_std:.2E} | {format_percent(pct)}"


def _compare(baseline: RateTrajectory, candidate: RateTrajectory, rate_type: str) -> dict:
    b = rate_change_volatility(baseline.rate(rate_type))
    c = rate_change_volatility(candidate.rate(rate_type))
    try:
        pct = volatility_comparison(b, c)
    except ZeroBaseline:
        pct = None
    return {"rate_type": rate_type, "baseline_std": b, "candidate_std": c, "percent_change": pct}


def volatility_table(baseline: RateTrajectory, candidate: RateTrajectory) -> list[dict]:
    return [_compare(baseline, candidate, rt) for rt in RATE_TYPES]


def stress_report(
    baseline: RateTrajectory, candidate: RateTrajectory, windows: Sequence[StressWindow]
) -> list[dict]:
    """Volatility comparison restricted to each window, per rate type."""
    out = []
    for w in windows:
        b = baseline.restrict(w.start, w.end)
        c = candidate.restrict(w.start, w.end)
        if len(b) < 2 or len(c) < 2:
            raise EmptyWindow(w.label)
        for row in volatility_table(b, c):
            out.append({"window": w.label, "start": w.start.isoformat(), "end": w.end.isoformat(),
                        "n_days": len(b), **row})
    return out


def windows_overlapping(traj: RateTrajectory, windows: Sequence[StressWindow]) -> list[StressWindow]:
    return [w for w in windows if len(traj.restrict(w.start, w.end)) >= 2]


def magnitude_distribution(series: Sequence[float] | np.ndarray, edges: Sequence[float] = DEFAULT_LOG_EDGES) -> dict:
    """Histogram of ``|day-over-day change|`` on log10 bin edges.

    Bin ``i`` holds magnitudes in ``[10**edges[i], 10**edges[i+1])``. Exact
    zeros, nonzero values below the first edge and values at or above the
    last edge get their own buckets, so all ``len(series) - 1`` changes are
    counted.
    """
    e = np.asarray(edges, dtype=np.float64)
    if e.ndim != 1 or len(e) < 2 or np.any(np.diff(e) <= 0):
        raise BadBins("log10 edges must be a strictly increasing sequence of at least two values")
    x = np.asarray(series, dtype=np.float64)
    if len(x) < 2:
        raise SeriesTooShort("need at least two points for a rate change")
    mag = np.abs(np.diff(x))
    zero = mag == 0.0
    # Compare in log space: a change like 0.011 - 0.001 lands one ulp under
    # 1e-2, and log10 rounds it back onto the edge.
    pos = np.searchsorted(e, np.log10(mag[~zero]), side="right") - 1
    counts = np.bincount(pos[(pos >= 0) & (pos < len(e) - 1)], minlength=len(e) - 1)
    return {
        "log10_edges": [float(v) for v in e],
        "counts": [int(c) for c in counts],
        "zero": int(zero.sum()),
        "below": int((pos < 0).sum()),
        "above": int((pos >= len(e) - 1).sum()),
        "total": int(len(mag)),
    }


def yield_distribution(series: Sequence[float] | np.ndarray) -> dict:
    """Quantiles (linear interpolation), min, max and mean of a rate series.

    The log10 view covers strictly positive values only; zeros are counted
    separately under ``zero_count``.
    """
    x = np.asarray(series, dtype=np.float64)
    if len(x) == 0:
        raise EmptySeries("empty rate series")

    def summary(v: np.ndarray) -> dict:
        q = np.quantile(v, [p / 100 for p in QUANTILES])
        out = {f"q{p:02d}": float(val) for p, val in zip(QUANTILES, q)}
        out.update(min=float(v.min()), max=float(v.max()), mean=float(v.mean()))
        return out

    positive = x[x > 0]
    return {
        "natural": summary(x),
        "log10": summary(np.log10(positive)) if len(positive) else None,
        "zero_count": int((x == 0).sum()),
        "n": int(len(x)),
    }


# ---------------------------------------------------------------- report


@dataclass
class EvalReport:
    pool_id: str
    baseline_source: str
    candidate_source: str
    volatility: list[dict]
    stress: list[dict]
    magnitude: dict[str, dict]
    yields: dict[str, dict]
    skipped_windows: list[str] = field(default_factory=list)
    footer: str = FOOTER

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    def volatility_csv(self, fh: IO[str]) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["asset", "rate_type", "baseline_std", "candidate_std", "percent_change"])
        for r in self.volatility:
            w.writerow([self.pool_id, r["rate_type"], repr(r["baseline_std"]), repr(r["candidate_std"]),
                        "" if r["percent_change"] is None else repr(r["percent_change"])])

    def stress_csv(self, fh: IO[str]) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["asset", "rate_type", "window", "start", "end", "baseline_std", "candidate_std", "percent_change"])
        for r in self.stress:
            w.writerow([self.pool_id, r["rate_type"], r["window"], r["start"], r["end"], repr(r["baseline_std"]),
                        repr(r["candidate_std"]), "" if r["percent_change"] is None else repr(r["percent_change"])])

    def render(self) -> str:
        """Plain-text tables mirroring the volatility and stress layouts."""
        lines = [f"## {self.pool_id}: {self.candidate_source} vs {self.baseline_source}", "",
                 "asset | rate type | baseline std | candidate std | change"]
        for r in self.volatility:
            lines.append(format_volatility_row(self.pool_id, r["rate_type"], r["baseline_std"], r["candidate_std"]))
        if self.stress:
            lines += ["", "asset | rate type | window | baseline std | candidate std | change"]
            for r in self.stress:
                lines.append(
                    f"{self.pool_id} | {RATE_TYPE_LABELS[r['rate_type']]} | {r['window']} | "
                    f"{r['baseline_std']:.2E} | {r['candidate_std']:.2E} | {format_percent(r['percent_change'])}"
                )
        if self.skipped_windows:
            lines += ["", "windows outside the evaluated range: " + ", ".join(self.skipped_windows)]
        lines += ["", self.footer, ""]
        return "\n".join(lines)


def evaluate(
    baseline: RateTrajectory,
    candidate: RateTrajectory,
    windows: Sequence[StressWindow] = DEFAULT_STRESS_WINDOWS,
    edges: Sequence[float] = DEFAULT_LOG_EDGES,
    extra: Sequence[RateTrajectory] = (),
) -> EvalReport:
    """Full metric suite for one candidate trajectory against a baseline.

    Windows that do not cover at least two days of the trajectory are listed
    in ``skipped_windows`` rather than raising.
    """
    usable = windows_overlapping(baseline, windows)
    skipped = [w.label for w in windows if w not in usable]
    trajs = {t.source: t for t in (baseline, candidate, *extra)}
    return EvalReport(
        pool_id=candidate.pool_id,
        baseline_source=baseline.source,
        candidate_source=candidate.source,
        volatility=volatility_table(baseline, candidate),
        stress=stress_report(baseline, candidate, usable),
        magnitude={src: magnitude_distribution(t.borrow_rate, edges) for src, t in trajs.items()},
        yields={src: yield_distribution(t.liquidity_rate) for src, t in trajs.items()},
        skipped_windows=skipped,
    )


def trajectories_csv(trajs: Sequence[RateTrajectory], fh: IO[str]) -> None:
    """Side-by-side daily rates of several trajectories over the same dates."""
    w = csv.writer(fh, lineterminator="\n")
    header = ["date"]
    for t in trajs:
        header += [f"{t.source}_borrow_rate", f"{t.source}_liquidity_rate"]
    w.writerow(header)
    for i, d in enumerate(trajs[0].dates):
        row = [d.isoformat()]
        for t in trajs:
            row += [repr(float(t.borrow_rate[i])), repr(float(t.liquidity_rate[i]))]
        w.writerow(row)


__all__ = [
    "DEFAULT_STRESS_WINDOWS",
    "EvalReport",
    "RateTrajectory",
    "RuleBasedPolicy",
    "StressWindow",
    "baseline_trajectory",
    "evaluate",
    "format_volatility_row",
    "magnitude_distribution",
    "rate_change_volatility",
    "recorded_trajectory",
    "replay_policy",
    "stress_report",
    "volatility_comparison",
    "yield_distribution",
]
