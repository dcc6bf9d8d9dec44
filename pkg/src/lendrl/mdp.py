"""Offline transition dataset: states, rate-change actions, reward, scaling."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DimensionMismatch, DomainError, EmptyDataset, MissingFeature, SeriesTooShort
from .ingest import STATE_FEATURES, FeatureRow, FeatureSeries

FORMAT_VERSION = 1
STATE_DIM = len(STATE_FEATURES)
ACTION_FEATURES = ("delta_liquidity_rate", "delta_borrow_rate")
ACTION_DIM = len(ACTION_FEATURES)

LIQ_IDX = STATE_FEATURES.index("liquidity_rate")
BORROW_IDX = STATE_FEATURES.index("variable_borrow_rate")
UTIL_IDX = STATE_FEATURES.index("utilization_rate")


@dataclass(frozen=True)
class RewardConfig:
    reward_alpha: float = 1.0
    reward_beta: float = 0.5
    reward_lambda: float = 1.0
    reward_gamma: float = 0.1
    u_target: float = 0.8

    def __post_init__(self) -> None:
        for name in ("reward_alpha", "reward_beta", "reward_lambda", "reward_gamma"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be non-negative")
        if not 0.0 < self.u_target < 1.0:
            raise DomainError("u_target must lie in (0, 1)")


def assemble_state(row: FeatureRow | Mapping[str, float]) -> np.ndarray:
    """Copy the 21 state features into a vector in canonical order."""
    get = row.get if isinstance(row, Mapping) else (lambda k, d=None: getattr(row, k, d))
    out = np.empty(STATE_DIM)
    for i, name in enumerate(STATE_FEATURES):
        v = get(name, None)
        if v is None:
            raise MissingFeature(name)
        out[i] = float(v)
    return out


def derive_action(prev: tuple[float, float], cur: tuple[float, float]) -> np.ndarray:
    """First difference of (liquidity_rate, borrow_rate)."""
    return np.array([cur[0] - prev[0], cur[1] - prev[1]], dtype=np.float64)


def compute_reward(
    u: float, b: float, s: float, a: np.ndarray | tuple[float, float], cfg: RewardConfig
) -> tuple[float, dict[str, float]]:
    """Utilization penalty + borrow/supply trade-off + rate-stability penalty.

    ``a`` is ``(delta_liquidity_rate, delta_borrow_rate)``. The total is
    summed as ``(r_u + r_b) + r_r``.
    """
    if not 0.0 <= u <= 1.0:
        raise DomainError(f"utilization must lie in [0, 1], got {u}")
    d_liq, d_borrow = float(a[0]), float(a[1])
    r_u = -cfg.reward_alpha * (u - cfg.u_target) ** 2
    r_b = -cfg.reward_beta * b + cfg.reward_beta * cfg.reward_lambda * s
    r_r = -cfg.reward_gamma * (d_borrow**2 + d_liq**2)
    return r_u + r_b + r_r, {"r_u": r_u, "r_b": r_b, "r_r": r_r}


@dataclass(frozen=True)
class NormStats:
    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray
    state_flagged: np.ndarray
    action_flagged: np.ndarray

    def to_dict(self) -> dict:
        return {
            "state_mean": [float(x) for x in self.state_mean],
            "state_std": [float(x) for x in self.state_std],
            "action_mean": [float(x) for x in self.action_mean],
            "action_std": [float(x) for x in self.action_std],
            "state_flagged": [bool(x) for x in self.state_flagged],
            "action_flagged": [bool(x) for x in self.action_flagged],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NormStats":
        return cls(
            np.array(d["state_mean"], dtype=np.float64),
            np.array(d["state_std"], dtype=np.float64),
            np.array(d["action_mean"], dtype=np.float64),
            np.array(d["action_std"], dtype=np.float64),
            np.array(d["state_flagged"], dtype=bool),
            np.array(d["action_flagged"], dtype=bool),
        )

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class TransitionDataset:
    """Immutable-by-convention arrays of ``(s, a, r, s', done)`` tuples."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    pool_id: str = ""
    reward_config: RewardConfig = field(default_factory=RewardConfig)
    norm_stats: NormStats | None = None
    train_size: int | None = None

    def __post_init__(self) -> None:
        self.states = np.asarray(self.states, dtype=np.float64).reshape(-1, STATE_DIM)
        self.next_states = np.asarray(self.next_states, dtype=np.float64).reshape(-1, STATE_DIM)
        self.actions = np.asarray(self.actions, dtype=np.float64).reshape(-1, ACTION_DIM)
        self.rewards = np.asarray(self.rewards, dtype=np.float64).reshape(-1)
        self.dones = np.asarray(self.dones, dtype=np.float64).reshape(-1)
        n = len(self.states)
        if not (len(self.actions) == len(self.rewards) == len(self.next_states) == len(self.dones) == n):
            raise DimensionMismatch("transition arrays have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.states)

    def subset(self, start: int, stop: int | None = None) -> "TransitionDataset":
        sl = slice(start, stop)
        return replace(
            self,
            states=self.states[sl],
            actions=self.actions[sl],
            rewards=self.rewards[sl],
            next_states=self.next_states[sl],
            dones=self.dones[sl],
            train_size=None,
        )

    def train_split(self) -> "TransitionDataset":
        if self.train_size is None:
            return self
        return self.subset(0, self.train_size)


def build_dataset(series: FeatureSeries, cfg: RewardConfig) -> TransitionDataset:
    """One transition per consecutive pair of rows.

    Transition ``t`` pairs row ``t`` (state) with row ``t+1`` (next state);
    its action is the rate change between the two rows and its reward is
    evaluated at row ``t+1``. Only the last transition is terminal.
    """
    n = len(series)
    if n < 2:
        raise SeriesTooShort(f"need at least 2 feature rows, got {n}")
    states = np.array([assemble_state(r) for r in series.rows])
    actions = np.empty((n - 1, ACTION_DIM))
    rewards = np.empty(n - 1)
    for t in range(n - 1):
        prev, cur = series.rows[t], series.rows[t + 1]
        a = derive_action(
            (prev.liquidity_rate, prev.variable_borrow_rate),
            (cur.liquidity_rate, cur.variable_borrow_rate),
        )
        actions[t] = a
        rewards[t], _ = compute_reward(cur.utilization_rate, cur.variable_borrow_rate, cur.liquidity_rate, a, cfg)
    dones = np.zeros(n - 1)
    dones[-1] = 1.0
    return TransitionDataset(states[:-1], actions, rewards, states[1:], dones, series.pool_id, cfg)


def _mean_std(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # shifted by the first row so constant columns give exactly zero spread
    dev = x - x[:1]
    shift = dev.mean(axis=0)
    mu = x[0] + shift
    sd = np.sqrt(((dev - shift) ** 2).mean(axis=0))
    flagged = sd == 0.0
    return mu, np.where(flagged, 1.0, sd), flagged


def fit_normalization(ds: TransitionDataset) -> NormStats:
    """Per-dimension mean and population std; states and next states pooled."""
    if len(ds) == 0:
        raise EmptyDataset("cannot fit normalization on an empty dataset")
    sm, ss, sf = _mean_std(np.concatenate([ds.states, ds.next_states]))
    am, as_, af = _mean_std(ds.actions)
    return NormStats(sm, ss, am, as_, sf, af)


def transform(x: np.ndarray, stats: NormStats, direction: str = "forward", kind: str | None = None) -> np.ndarray:
    """Z-score a state or action (or a batch of them) and back.

    ``kind`` is inferred from the trailing dimension when omitted.
    """
    x = np.asarray(x, dtype=np.float64)
    if kind is None:
        kind = {STATE_DIM: "state", ACTION_DIM: "action"}.get(x.shape[-1] if x.ndim else -1)
    if kind == "state":
        mu, sd = stats.state_mean, stats.state_std
    elif kind == "action":
        mu, sd = stats.action_mean, stats.action_std
    else:
        raise DimensionMismatch(f"cannot infer state/action from shape {x.shape}")
    if x.shape[-1] != len(mu):
        raise DimensionMismatch(f"expected trailing dim {len(mu)}, got {x.shape[-1]}")
    if direction == "forward":
        return (x - mu) / sd
    if direction == "inverse":
        return x * sd + mu
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


def normalized(ds: TransitionDataset, stats: NormStats) -> TransitionDataset:
    """Copy of ``ds`` with states and actions Z-scored (rewards untouched)."""
    return replace(
        ds,
        states=transform(ds.states, stats, kind="state"),
        next_states=transform(ds.next_states, stats, kind="state"),
        actions=transform(ds.actions, stats, kind="action"),
        norm_stats=stats,
    )


# ---------------------------------------------------------------- persistence


def _columns() -> list[str]:
    return (
        [f"s_{n}" for n in STATE_FEATURES]
        + [f"a_{n}" for n in ACTION_FEATURES]
        + ["reward"]
        + [f"ns_{n}" for n in STATE_FEATURES]
        + ["done"]
    )


def save_dataset(ds: TransitionDataset, csv_path: Path, sidecar_path: Path) -> None:
    """Write transitions as CSV plus a JSON sidecar.

    The sidecar records the format version, feature order, reward weights,
    train split size and normalization statistics; it is what the train and
    evaluate stages check for compatibility.
    """
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_columns())
        for i in range(len(ds)):
            vals = list(ds.states[i]) + list(ds.actions[i]) + [ds.rewards[i]] + list(ds.next_states[i])
            w.writerow([repr(float(v)) for v in vals] + [int(ds.dones[i])])
    sidecar = {
        "format_version": FORMAT_VERSION,
        "pool_id": ds.pool_id,
        "n_transitions": len(ds),
        "train_size": ds.train_size,
        "state_features": list(STATE_FEATURES),
        "action_features": list(ACTION_FEATURES),
        "reward_config": asdict(ds.reward_config),
        "norm_stats": ds.norm_stats.to_dict() if ds.norm_stats is not None else None,
    }
    Path(sidecar_path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_dataset(csv_path: Path, sidecar_path: Path) -> TransitionDataset:
    meta = json.loads(Path(sidecar_path).read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format {meta.get('format_version')!r}")
    if tuple(meta["state_features"]) != STATE_FEATURES:
        raise DimensionMismatch("dataset feature order does not match this version")
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != _columns():
            raise DimensionMismatch("dataset CSV header does not match the expected layout")
        data = np.array([[float(v) for v in row] for row in reader], dtype=np.float64).reshape(-1, len(header))
    k = STATE_DIM
    return TransitionDataset(
        states=data[:, :k],
        actions=data[:, k : k + ACTION_DIM],
        rewards=data[:, k + ACTION_DIM],
        next_states=data[:, k + ACTION_DIM + 1 : 2 * k + ACTION_DIM + 1],
        dones=data[:, -1],
        pool_id=meta["pool_id"],
        reward_config=RewardConfig(**meta["reward_config"]),
        norm_stats=NormStats.from_dict(meta["norm_stats"]) if meta["norm_stats"] else None,
        train_size=meta["train_size"],
    )
