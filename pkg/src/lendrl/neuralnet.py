"""Small fully connected networks with hand-written backprop and Adam.

Everything is float64 numpy. Weights are stored input-major, so a layer maps
a batch ``x`` of shape ``(B, fan_in)`` to ``x @ W + b``. Hidden layers use
ReLU; the output layer is identity or tanh.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadDims, DimensionMismatch, ShapeMismatch

ACTIVATIONS = ("identity", "tanh")


@dataclass
class NetworkParams:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output_activation: str = "identity"
    hidden_activation: str = "relu"

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def arrays(self) -> list[np.ndarray]:
        """Parameters in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.output_activation,
            self.hidden_activation,
        )

    def to_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.arrays())


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    inputs: np.ndarray | None = None

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def scaled(self, k: float) -> "Gradients":
        return Gradients([k * w for w in self.weights], [k * b for b in self.biases],
                         None if self.inputs is None else k * self.inputs)

    def __add__(self, other: "Gradients") -> "Gradients":
        inputs = None
        if self.inputs is not None and other.inputs is not None:
            inputs = self.inputs + other.inputs
        return Gradients(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
            inputs,
        )


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_network(cls, net: NetworkParams, learning_rate: float = 3e-4, **kw) -> "AdamState":
        arrs = net.arrays()
        return cls([np.zeros_like(a) for a in arrs], [np.zeros_like(a) for a in arrs],
                   learning_rate=learning_rate, **kw)


def init_network(layer_dims: list[int], output_activation: str = "identity", seed: int = 0) -> NetworkParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise BadDims(f"need at least two layers of positive width, got {layer_dims}")
    if output_activation not in ACTIVATIONS:
        raise BadDims(f"unknown output activation {output_activation!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(dims, weights, biases, output_activation)


def _as_batch(net: NetworkParams, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != net.input_dim:
        raise DimensionMismatch(f"network expects input dim {net.input_dim}, got shape {x.shape}")
    return xb, single


def forward_cached(net: NetworkParams, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass returning the output and the per-layer activations.

    ``cache[0]`` is the input batch, ``cache[i]`` the post-activation of
    layer ``i``; the last entry is the network output.
    """
    h, _ = _as_batch(net, x)
    cache = [h]
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        if i < last:
            h = np.maximum(z, 0.0)
        elif net.output_activation == "tanh":
            h = np.tanh(z)
        else:
            h = z
        cache.append(h)
    return h, cache


def forward(net: NetworkParams, x: np.ndarray) -> np.ndarray:
    out, _ = forward_cached(net, x)
    return out[0] if np.ndim(x) == 1 else out


def backward(
    net: NetworkParams,
    x: np.ndarray,
    upstream: np.ndarray,
    cache: list[np.ndarray] | None = None,
    param_grads: bool = True,
) -> Gradients:
    """Reverse-mode gradients of a scalar loss given dL/d(output).

    Gradients are summed over the batch. Pass the ``cache`` from
    :func:`forward_cached` to skip recomputing the forward pass. With
    ``param_grads=False`` only the input gradient is computed (parameter
    gradient lists are left empty).
    """
    if cache is None:
        _, cache = forward_cached(net, x)
    g = np.asarray(upstream, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != cache[-1].shape:
        raise DimensionMismatch(f"upstream gradient shape {g.shape} != output shape {cache[-1].shape}")
    n = len(net.weights)
    dws: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    dbs: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    if net.output_activation == "tanh":
        g = g * (1.0 - cache[-1] ** 2)
    for i in range(n - 1, -1, -1):
        if param_grads:
            dws[i] = cache[i].T @ g
            dbs[i] = g.sum(axis=0)
        g = g @ net.weights[i].T
        if i > 0:
            g = g * (cache[i] > 0.0)
    dx = g[0] if np.ndim(x) == 1 else g
    if not param_grads:
        return Gradients([], [], dx)
    return Gradients(dws, dbs, dx)


def adam_update(params: NetworkParams, grads: Gradients, state: AdamState) -> tuple[NetworkParams, AdamState]:
    """One bias-corrected Adam step; ``params`` and ``state`` are updated in place."""
    arrs, garrs = params.arrays(), grads.arrays()
    if len(arrs) != len(garrs) or len(arrs) != len(state.m):
        raise ShapeMismatch("parameter / gradient / optimizer structure mismatch")
    for a, g in zip(arrs, garrs):
        if a.shape != g.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {a.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for a, g, m, v in zip(arrs, garrs, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        a -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    n_checked: int = 0
    worst: tuple[int, int] = field(default=(-1, -1))


def _rel_err(a: np.ndarray, b: np.ndarray, floor: float) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(
    net: NetworkParams,
    x: np.ndarray,
    tolerance: float = 1e-5,
    h: float = 1e-6,
    upstream: np.ndarray | None = None,
    analytic: Gradients | None = None,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Compare :func:`backward` against central differences for every parameter.

    The probe loss is ``sum(upstream * forward(net, x))`` with a fixed
    pseudo-random ``upstream`` unless one is given. ``analytic`` overrides the
    gradients under test.

    The error per entry is ``|a - n| / max(|a|, |n|, floor)``: entries with
    gradients below ``floor`` are compared absolutely, since central
    differences cannot resolve them to better than about ``eps * |L| / h``.
    """
    xb, _ = _as_batch(net, x)
    if upstream is None:
        upstream = np.random.default_rng(12345).normal(size=(xb.shape[0], net.output_dim))
    upstream = np.asarray(upstream, dtype=np.float64).reshape(xb.shape[0], net.output_dim)
    if analytic is None:
        analytic = backward(net, xb, upstream)

    def loss() -> float:
        return float(np.sum(upstream * forward_cached(net, xb)[0]))

    worst_err, worst = 0.0, (-1, -1)
    count = 0
    for k, (a, ga) in enumerate(zip(net.arrays(), analytic.arrays())):
        flat, gflat = a.reshape(-1), ga.reshape(-1)
        num = np.empty_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            lp = loss()
            flat[j] = orig - h
            lm = loss()
            flat[j] = orig
            num[j] = (lp - lm) / (2.0 * h)
        err = _rel_err(gflat, num, floor)
        count += flat.size
        j = int(np.argmax(err)) if err.size else -1
        if err.size and err[j] > worst_err:
            worst_err, worst = float(err[j]), (k, j)
    return GradCheckReport(worst_err, worst_err < tolerance, count, worst)


def soft_update(target: NetworkParams, online: NetworkParams, tau: float) -> NetworkParams:
    """Polyak averaging ``target <- tau*online + (1-tau)*target`` in place."""
    ta, oa = target.arrays(), online.arrays()
    if len(ta) != len(oa) or any(t.shape != o.shape for t, o in zip(ta, oa)):
        raise ShapeMismatch("target and online networks differ in shape")
    for t, o in zip(ta, oa):
        t *= 1.0 - tau
        t += tau * o
    return target
