"""Offline trainers: behavior cloning, CQL and TD3-BC.

All learning happens in Z-scored state/action space. The actor emits
``action_bound * tanh(.)`` in normalized action units; critics take the
concatenation ``[state, action]`` (23 inputs) and return one value.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import IO, Callable

import numpy as np

from .errors import DimensionMismatch, EmptyDataset, LendRLError
from .mdp import (
    ACTION_DIM,
    STATE_DIM,
    NormStats,
    TransitionDataset,
    fit_normalization,
    normalized,
    transform,
)
from .neuralnet import (
    AdamState,
    Gradients,
    NetworkParams,
    adam_update,
    backward,
    forward,
    forward_cached,
    init_network,
    soft_update,
)

logger = logging.getLogger(__name__)

ALGORITHMS = ("bc", "cql", "td3bc")
CRITIC_INPUT_DIM = STATE_DIM + ACTION_DIM


@dataclass(frozen=True)
class TrainConfig:
    algorithm: str = "td3bc"
    batch_size: int = 256
    steps: int = 20_000
    discount_gamma: float = 0.99
    tau_soft: float = 0.005
    policy_delay: int = 2
    policy_noise_sigma: float = 0.2  # normalized action units
    noise_clip: float = 0.5
    cql_alpha: float = 1.0
    cql_num_sampled_actions: int = 10
    cql_lagrange: bool = False
    cql_tau_threshold: float = 5.0
    cql_lagrange_lr: float = 1e-3
    td3bc_alpha: float = 2.5
    bc_learning_rate: float = 3e-5
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    seed: int = 0
    # in units of the training data's action standard deviation
    action_bound: float = 5.0
    hidden_dims: tuple[int, ...] = (256, 256)

    def __post_init__(self) -> None:
        algo = self.algorithm.lower().replace("-", "").replace("_", "")
        if algo not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        object.__setattr__(self, "algorithm", algo)
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.discount_gamma <= 1.0:
            raise ValueError("discount_gamma must lie in (0, 1]")
        if self.policy_delay < 1:
            raise ValueError("policy_delay must be >= 1")
        if not self.action_bound > 0:
            raise ValueError("action_bound must be positive")
        if self.cql_num_sampled_actions < 1:
            raise ValueError("cql_num_sampled_actions must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PolicyBundle:
    actor: NetworkParams
    norm_stats: NormStats
    config: TrainConfig
    critic1: NetworkParams | None = None
    critic2: NetworkParams | None = None
    actor_target: NetworkParams | None = None
    critic1_target: NetworkParams | None = None
    critic2_target: NetworkParams | None = None
    optimizers: dict[str, AdamState] = field(default_factory=dict)
    lagrange_multiplier: float | None = None

    @property
    def algorithm(self) -> str:
        return self.config.algorithm

    def networks(self) -> dict[str, NetworkParams]:
        names = ("actor", "critic1", "critic2", "actor_target", "critic1_target", "critic2_target")
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}


@dataclass
class TrainLog:
    """Per-step loss records; ``None`` where a quantity does not apply."""

    records: list[dict] = field(default_factory=list)

    COLUMNS = ("step", "actor_loss", "critic_loss", "penalty", "multiplier")

    def append(self, step: int, actor_loss=None, critic_loss=None, penalty=None, multiplier=None) -> None:
        self.records.append(
            {"step": step, "actor_loss": actor_loss, "critic_loss": critic_loss,
             "penalty": penalty, "multiplier": multiplier}
        )

    def series(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records if r[key] is not None], dtype=np.float64)

    @property
    def actor_updates(self) -> int:
        return sum(r["actor_loss"] is not None for r in self.records)

    def to_csv(self, fh: IO[str]) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.records:
            w.writerow(["" if r[c] is None else (r[c] if c == "step" else repr(float(r[c]))) for c in self.COLUMNS])


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.states)


def sample_batch(ds: TransitionDataset, size: int, rng: np.random.Generator) -> Batch:
    """Uniform sample with replacement."""
    if len(ds) == 0:
        raise EmptyDataset("cannot sample from an empty dataset")
    idx = rng.integers(0, len(ds), size=size)
    return Batch(ds.states[idx], ds.actions[idx], ds.rewards[idx], ds.next_states[idx], ds.dones[idx])


# ---------------------------------------------------------------- network helpers


def policy_forward(actor: NetworkParams, states: np.ndarray, bound: float) -> tuple[np.ndarray, list[np.ndarray]]:
    out, cache = forward_cached(actor, states)
    return bound * out, cache


def q_value(critic: NetworkParams, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return forward_cached(critic, np.concatenate([states, actions], axis=1))[0][:, 0]


def soft_update_all(bundle: PolicyBundle, tau: float) -> None:
    soft_update(bundle.actor_target, bundle.actor, tau)
    soft_update(bundle.critic1_target, bundle.critic1, tau)
    soft_update(bundle.critic2_target, bundle.critic2, tau)


def _seeds(seed: int) -> list[int]:
    # independent streams for: sampling rng, actor, critic1, critic2
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(4)]


def _init_bundle(cfg: TrainConfig, stats: NormStats, with_critics: bool) -> tuple[PolicyBundle, np.random.Generator]:
    s_rng, s_actor, s_c1, s_c2 = _seeds(cfg.seed)
    hidden = list(cfg.hidden_dims)
    actor = init_network([STATE_DIM, *hidden, ACTION_DIM], "tanh", s_actor)
    bundle = PolicyBundle(actor=actor, norm_stats=stats, config=cfg)
    if with_critics:
        bundle.critic1 = init_network([CRITIC_INPUT_DIM, *hidden, 1], "identity", s_c1)
        bundle.critic2 = init_network([CRITIC_INPUT_DIM, *hidden, 1], "identity", s_c2)
        bundle.actor_target = actor.copy()
        bundle.critic1_target = bundle.critic1.copy()
        bundle.critic2_target = bundle.critic2.copy()
        bundle.optimizers = {
            "actor": AdamState.for_network(actor, cfg.actor_lr),
            "critic1": AdamState.for_network(bundle.critic1, cfg.critic_lr),
            "critic2": AdamState.for_network(bundle.critic2, cfg.critic_lr),
        }
    else:
        bundle.optimizers = {"actor": AdamState.for_network(actor, cfg.bc_learning_rate)}
    return bundle, np.random.default_rng(s_rng)


def _prepare(ds: TransitionDataset) -> tuple[TransitionDataset, NormStats]:
    if len(ds) == 0:
        raise EmptyDataset("training dataset is empty")
    stats = ds.norm_stats if ds.norm_stats is not None else fit_normalization(ds)
    return normalized(ds, stats), stats


# ---------------------------------------------------------------- losses


def bc_loss(actor: NetworkParams, batch: Batch, bound: float) -> tuple[float, Gradients]:
    """Mean over the batch of the squared action error ``||pi(s) - a||^2``."""
    a, cache = policy_forward(actor, batch.states, bound)
    diff = a - batch.actions
    n = len(batch)
    loss = float(np.mean(np.sum(diff**2, axis=1)))
    grads = backward(actor, batch.states, (2.0 / n) * diff * bound, cache)
    return loss, grads


def td3_target(
    batch: Batch,
    bundle: PolicyBundle,
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
    critic: str = "min",
) -> np.ndarray:
    """Bellman target with target-policy smoothing.

    ``critic`` selects ``"min"`` (twin minimum), ``"q1"`` or ``"q2"``.
    """
    a_next, _ = policy_forward(bundle.actor_target, batch.next_states, cfg.action_bound)
    if cfg.policy_noise_sigma > 0:
        if rng is None:
            raise ValueError("an rng is required when policy_noise_sigma > 0")
        noise = np.clip(rng.normal(0.0, cfg.policy_noise_sigma, a_next.shape), -cfg.noise_clip, cfg.noise_clip)
        a_next = a_next + noise
    a_next = np.clip(a_next, -cfg.action_bound, cfg.action_bound)
    q1 = q_value(bundle.critic1_target, batch.next_states, a_next)
    q2 = q_value(bundle.critic2_target, batch.next_states, a_next)
    q_next = {"min": np.minimum(q1, q2), "q1": q1, "q2": q2}[critic]
    return batch.rewards + (1.0 - batch.dones) * cfg.discount_gamma * q_next


def bellman_loss(critic: NetworkParams, batch: Batch, y: np.ndarray) -> tuple[float, Gradients]:
    """Mean squared TD error of one critic against fixed targets ``y``."""
    x = np.concatenate([batch.states, batch.actions], axis=1)
    q, cache = forward_cached(critic, x)
    diff = q[:, 0] - y
    loss = float(np.mean(diff**2))
    grads = backward(critic, x, (2.0 / len(batch)) * diff[:, None], cache)
    return loss, grads


def cql_penalty(q_set: np.ndarray, q_data: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """``mean_s[logsumexp_a' Q(s,a') - Q(s,a_data)]`` and its gradients.

    ``q_set`` has shape ``(B, M)``. Returns the value together with
    d/dq_set and d/dq_data.
    """
    n = q_set.shape[0]
    m = q_set.max(axis=1, keepdims=True)
    e = np.exp(q_set - m)
    s = e.sum(axis=1)
    lse = m[:, 0] + np.log(s)
    value = float(np.mean(lse - q_data))
    return value, (e / s[:, None]) / n, np.full(n, -1.0 / n)


def cql_critic_loss(
    batch: Batch,
    bundle: PolicyBundle,
    cfg: TrainConfig,
    rng: np.random.Generator,
    weight: float | None = None,
    y: np.ndarray | None = None,
) -> tuple[float, tuple[Gradients, Gradients], float]:
    """Bellman error plus the conservative penalty, for both critics.

    The logsumexp runs over an action set made of the dataset action, the
    current policy action and ``cql_num_sampled_actions`` uniform draws in
    ``[-action_bound, action_bound]``. ``weight`` defaults to ``cql_alpha``.
    Returns the summed loss, per-critic gradients and the mean penalty.
    """
    w = cfg.cql_alpha if weight is None else weight
    if y is None:
        y = td3_target(batch, bundle, cfg, rng)
    n, k = len(batch), cfg.cql_num_sampled_actions
    pi_a, _ = policy_forward(bundle.actor, batch.states, cfg.action_bound)
    rand = rng.uniform(-cfg.action_bound, cfg.action_bound, size=(k, n, ACTION_DIM))
    acts = np.concatenate([batch.actions[None], pi_a[None], rand], axis=0)  # (M, B, 2)
    m = acts.shape[0]
    x = np.concatenate([np.broadcast_to(batch.states, (m, n, STATE_DIM)), acts], axis=2).reshape(m * n, -1)

    total, penalties, grads = 0.0, [], []
    for critic in (bundle.critic1, bundle.critic2):
        out, cache = forward_cached(critic, x)
        q = out[:, 0].reshape(m, n)
        diff = q[0] - y
        pen, d_set, d_data = cql_penalty(q.T, q[0])
        up = w * d_set.T  # (M, B)
        up[0] += w * d_data + (2.0 / n) * diff
        grads.append(backward(critic, x, up.reshape(-1, 1), cache))
        total += float(np.mean(diff**2)) + w * pen
        penalties.append(pen)
    return total, (grads[0], grads[1]), float(np.mean(penalties))


def cql_lagrange_step(penalty: float, multiplier: float, cfg: TrainConfig) -> float:
    """Gradient ascent on ``multiplier * (penalty - tau)``, clipped at zero."""
    return max(0.0, multiplier + cfg.cql_lagrange_lr * (penalty - cfg.cql_tau_threshold))


def _q_input_grad(critic: NetworkParams, x: np.ndarray, cache: list[np.ndarray], up: np.ndarray) -> np.ndarray:
    """d(sum up*Q)/d(action) through a critic, parameters held fixed."""
    return backward(critic, x, up[:, None], cache, param_grads=False).inputs[:, STATE_DIM:]


def cql_actor_loss(batch: Batch, bundle: PolicyBundle, cfg: TrainConfig) -> tuple[float, Gradients]:
    """Deterministic actor maximizing the twin-minimum Q."""
    a, cache = policy_forward(bundle.actor, batch.states, cfg.action_bound)
    x = np.concatenate([batch.states, a], axis=1)
    q1, c1 = forward_cached(bundle.critic1, x)
    q2, c2 = forward_cached(bundle.critic2, x)
    q1, q2 = q1[:, 0], q2[:, 0]
    n = len(batch)
    first = q1 <= q2
    loss = -float(np.mean(np.where(first, q1, q2)))
    da = _q_input_grad(bundle.critic1, x, c1, np.where(first, -1.0 / n, 0.0))
    da = da + _q_input_grad(bundle.critic2, x, c2, np.where(first, 0.0, -1.0 / n))
    return loss, backward(bundle.actor, batch.states, da * cfg.action_bound, cache)


def td3bc_actor_loss(batch: Batch, bundle: PolicyBundle, cfg: TrainConfig) -> tuple[float, Gradients]:
    """``-lam * mean Q1(s, pi(s)) + mean ||pi(s) - a||^2``.

    ``lam = td3bc_alpha / (mean|Q1| + 1e-8)`` is recomputed per batch and
    treated as a constant. Only actor gradients are returned.
    """
    a, cache = policy_forward(bundle.actor, batch.states, cfg.action_bound)
    x = np.concatenate([batch.states, a], axis=1)
    q, qcache = forward_cached(bundle.critic1, x)
    q = q[:, 0]
    n = len(batch)
    lam = cfg.td3bc_alpha / (float(np.mean(np.abs(q))) + 1e-8)
    diff = a - batch.actions
    loss = -lam * float(np.mean(q)) + float(np.mean(np.sum(diff**2, axis=1)))
    da = _q_input_grad(bundle.critic1, x, qcache, np.full(n, -lam / n)) + (2.0 / n) * diff
    return loss, backward(bundle.actor, batch.states, da * cfg.action_bound, cache)


# ---------------------------------------------------------------- trainers


def train_bc(ds: TransitionDataset, cfg: TrainConfig) -> tuple[PolicyBundle, TrainLog]:
    nds, stats = _prepare(ds)
    bundle, rng = _init_bundle(cfg, stats, with_critics=False)
    opt = bundle.optimizers["actor"]
    log = TrainLog()
    for step in range(cfg.steps):
        batch = sample_batch(nds, cfg.batch_size, rng)
        loss, grads = bc_loss(bundle.actor, batch, cfg.action_bound)
        adam_update(bundle.actor, grads, opt)
        log.append(step, actor_loss=loss)
    return bundle, log


def _critic_step(bundle: PolicyBundle, batch: Batch, cfg: TrainConfig, rng: np.random.Generator) -> float:
    y = td3_target(batch, bundle, cfg, rng)
    l1, g1 = bellman_loss(bundle.critic1, batch, y)
    l2, g2 = bellman_loss(bundle.critic2, batch, y)
    adam_update(bundle.critic1, g1, bundle.optimizers["critic1"])
    adam_update(bundle.critic2, g2, bundle.optimizers["critic2"])
    return l1 + l2


def train_td3bc(ds: TransitionDataset, cfg: TrainConfig) -> tuple[PolicyBundle, TrainLog]:
    nds, stats = _prepare(ds)
    bundle, rng = _init_bundle(cfg, stats, with_critics=True)
    log = TrainLog()
    for step in range(cfg.steps):
        batch = sample_batch(nds, cfg.batch_size, rng)
        critic_loss = _critic_step(bundle, batch, cfg, rng)
        actor_loss = None
        if (step + 1) % cfg.policy_delay == 0:
            actor_loss, grads = td3bc_actor_loss(batch, bundle, cfg)
            adam_update(bundle.actor, grads, bundle.optimizers["actor"])
            soft_update_all(bundle, cfg.tau_soft)
        log.append(step, actor_loss=actor_loss, critic_loss=critic_loss)
    return bundle, log


def train_cql(ds: TransitionDataset, cfg: TrainConfig) -> tuple[PolicyBundle, TrainLog]:
    nds, stats = _prepare(ds)
    bundle, rng = _init_bundle(cfg, stats, with_critics=True)
    if cfg.cql_lagrange:
        bundle.lagrange_multiplier = cfg.cql_alpha
    log = TrainLog()
    for step in range(cfg.steps):
        batch = sample_batch(nds, cfg.batch_size, rng)
        weight = bundle.lagrange_multiplier if cfg.cql_lagrange else cfg.cql_alpha
        critic_loss, (g1, g2), penalty = cql_critic_loss(batch, bundle, cfg, rng, weight=weight)
        adam_update(bundle.critic1, g1, bundle.optimizers["critic1"])
        adam_update(bundle.critic2, g2, bundle.optimizers["critic2"])
        if cfg.cql_lagrange:
            bundle.lagrange_multiplier = cql_lagrange_step(penalty, bundle.lagrange_multiplier, cfg)
        actor_loss, grads = cql_actor_loss(batch, bundle, cfg)
        adam_update(bundle.actor, grads, bundle.optimizers["actor"])
        soft_update_all(bundle, cfg.tau_soft)
        log.append(step, actor_loss=actor_loss, critic_loss=critic_loss, penalty=penalty,
                   multiplier=bundle.lagrange_multiplier)
    return bundle, log


TRAINERS: dict[str, Callable[[TransitionDataset, TrainConfig], tuple[PolicyBundle, TrainLog]]] = {
    "bc": train_bc,
    "cql": train_cql,
    "td3bc": train_td3bc,
}


def train(ds: TransitionDataset, cfg: TrainConfig) -> tuple[PolicyBundle, TrainLog]:
    logger.info("training %s for %d steps on %d transitions", cfg.algorithm, cfg.steps, len(ds))
    return TRAINERS[cfg.algorithm](ds, cfg)


# ---------------------------------------------------------------- inference


def act(bundle: PolicyBundle, state: np.ndarray) -> np.ndarray:
    """Rate change ``(d_liquidity, d_borrow)`` in natural units for raw state(s)."""
    state = np.asarray(state, dtype=np.float64)
    if state.shape[-1] != STATE_DIM:
        raise DimensionMismatch(f"state must have {STATE_DIM} features, got shape {state.shape}")
    s = transform(state, bundle.norm_stats, kind="state")
    a = bundle.config.action_bound * forward(bundle.actor, s)
    return transform(a, bundle.norm_stats, "inverse", kind="action")


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"LENDRL-CKPT\x00"
CHECKPOINT_VERSION = 1


def save_bundle(bundle: PolicyBundle, path: Path | str) -> None:
    """Write a self-describing binary checkpoint.

    Layout: magic, little-endian u64 header length, UTF-8 JSON header, then
    the raw float64 arrays listed in the header, in order. Output depends
    only on the bundle contents.
    """
    arrays: list[tuple[str, np.ndarray]] = []
    nets = {}
    for name, net in bundle.networks().items():
        nets[name] = {"layer_dims": net.layer_dims, "output_activation": net.output_activation,
                      "hidden_activation": net.hidden_activation}
        arrays += [(f"{name}/{i}", a) for i, a in enumerate(net.arrays())]
    optim = {}
    for name, st in bundle.optimizers.items():
        optim[name] = {"step": st.step, "learning_rate": st.learning_rate, "beta1": st.beta1,
                       "beta2": st.beta2, "eps": st.eps}
        arrays += [(f"opt/{name}/m/{i}", a) for i, a in enumerate(st.m)]
        arrays += [(f"opt/{name}/v/{i}", a) for i, a in enumerate(st.v)]
    manifest, offset = [], 0
    for name, a in arrays:
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size * 8
    header = {
        "version": CHECKPOINT_VERSION,
        "algorithm": bundle.algorithm,
        "train_config": bundle.config.to_dict(),
        "norm_stats": bundle.norm_stats.to_dict(),
        "norm_fingerprint": bundle.norm_stats.fingerprint(),
        "networks": nets,
        "optimizers": optim,
        "lagrange_multiplier": bundle.lagrange_multiplier,
        "arrays": manifest,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_bundle(path: Path | str) -> PolicyBundle:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise LendRLError(f"{path}: not a lendrl checkpoint")
    pos = len(_MAGIC)
    (hlen,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    if header["version"] != CHECKPOINT_VERSION:
        raise LendRLError(f"{path}: unsupported checkpoint version {header['version']}")
    blob = raw[pos + hlen :]
    store = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        store[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=entry["offset"]).reshape(shape).astype(np.float64)

    def net(name: str) -> NetworkParams | None:
        spec = header["networks"].get(name)
        if spec is None:
            return None
        n_layers = len(spec["layer_dims"]) - 1
        arrs = [store[f"{name}/{i}"] for i in range(2 * n_layers)]
        return NetworkParams(spec["layer_dims"], arrs[0::2], arrs[1::2], spec["output_activation"],
                             spec["hidden_activation"])

    stats = NormStats.from_dict(header["norm_stats"])
    if stats.fingerprint() != header["norm_fingerprint"]:
        raise LendRLError(f"{path}: normalization statistics fingerprint mismatch")
    cfg_d = dict(header["train_config"])
    cfg_d["hidden_dims"] = tuple(cfg_d["hidden_dims"])
    bundle = PolicyBundle(
        actor=net("actor"),
        norm_stats=stats,
        config=TrainConfig.from_dict(cfg_d),
        critic1=net("critic1"),
        critic2=net("critic2"),
        actor_target=net("actor_target"),
        critic1_target=net("critic1_target"),
        critic2_target=net("critic2_target"),
        lagrange_multiplier=header["lagrange_multiplier"],
    )
    for name, o in header["optimizers"].items():
        k = sum(1 for e in header["arrays"] if e["name"].startswith(f"opt/{name}/m/"))
        bundle.optimizers[name] = AdamState(
            [store[f"opt/{name}/m/{i}"] for i in range(k)],
            [store[f"opt/{name}/v/{i}"] for i in range(k)],
            step=o["step"], learning_rate=o["learning_rate"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
        )
    return bundle
