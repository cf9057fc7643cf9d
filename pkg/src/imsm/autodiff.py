"""Differentiation engine specialised to swish multilayer perceptrons.

The engine only needs to handle one kind of graph: a batch of inputs pushed
through an MLP together with a handful of forward-mode tangents (columns of
the input Jacobian). The forward pass records, per layer, the pre-activations
and their tangents; the reverse pass propagates adjoints for both the outputs
and the tangents back to the weights. That is forward-over-reverse: losses may
contain Jacobian entries (divergences) and still get exact parameter
gradients.

Everything is float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError, UsageError

ACTIVATIONS = ("swish",)


def swish(z):
    """z * sigmoid(z)."""
    return z * _sigmoid(z)


def swish_d1(z):
    s = _sigmoid(z)
    return s + z * s * (1.0 - s)


def swish_d2(z):
    s = _sigmoid(z)
    ds = s * (1.0 - s)
    return 2.0 * ds + z * ds * (1.0 - 2.0 * s)


def _sigmoid(z):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


@dataclass(frozen=True)
class MlpParams:
    """Weights and biases of a fully connected network with a linear last layer.

    ``weights[l]`` has shape ``(widths[l+1], widths[l])``. Gradients and Adam
    moments reuse this class since they are congruent with the parameters.
    """

    widths: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: str = "swish"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "weights", tuple(np.asarray(w, dtype=np.float64) for w in self.weights))
        object.__setattr__(self, "biases", tuple(np.asarray(b, dtype=np.float64) for b in self.biases))
        _check_widths(widths)
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if len(self.weights) != len(widths) - 1 or len(self.biases) != len(widths) - 1:
            raise ShapeError("need exactly one weight matrix and bias per layer")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (widths[l + 1], widths[l]):
                raise ShapeError(f"layer {l}: weight shape {w.shape}, expected {(widths[l + 1], widths[l])}")
            if b.shape != (widths[l + 1],):
                raise ShapeError(f"layer {l}: bias shape {b.shape}, expected {(widths[l + 1],)}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ShapeError(f"layer {l}: non-finite parameter entries")

    @property
    def d_in(self) -> int:
        return self.widths[0]

    @property
    def d_out(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        arrays = list(arrays)
        return replace(self, weights=tuple(arrays[0::2]), biases=tuple(arrays[1::2]))

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, flat: np.ndarray) -> "MlpParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ShapeError(f"flat vector has shape {flat.shape}, expected ({self.size},)")
        out, pos = [], 0
        for a in self.arrays():
            out.append(flat[pos:pos + a.size].reshape(a.shape))
            pos += a.size
        return self.with_arrays(out)

    def zeros_like(self) -> "MlpParams":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def scaled_output(self, factor: float) -> "MlpParams":
        """Same network with the output multiplied by ``factor``."""
        w = list(self.weights)
        b = list(self.biases)
        w[-1] = w[-1] * factor
        b[-1] = b[-1] * factor
        return replace(self, weights=tuple(w), biases=tuple(b))

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths),
            "activation": self.activation,
            "layers": [{"weight": w.tolist(), "bias": b.tolist()} for w, b in zip(self.weights, self.biases)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MlpParams":
        try:
            return cls(
                widths=tuple(data["widths"]),
                weights=tuple(np.array(layer["weight"], dtype=np.float64) for layer in data["layers"]),
                biases=tuple(np.array(layer["bias"], dtype=np.float64) for layer in data["layers"]),
                activation=data.get("activation", "swish"),
            )
        except (KeyError, TypeError) as exc:
            raise ShapeError(f"malformed network block: {exc}") from exc


def _check_widths(widths: Sequence[int]) -> None:
    if len(widths) < 2 or any(int(w) < 1 for w in widths):
        raise ConfigError(f"widths must have >= 2 entries, all >= 1; got {list(widths)}")


def init_params(widths: Sequence[int], scale: float = 1.0, rng: np.random.Generator | None = None,
                activation: str = "swish") -> MlpParams:
    """Normal weights with std ``scale / sqrt(fan_in)``, zero biases."""
    _check_widths(widths)
    if scale < 0:
        raise ConfigError("scale must be non-negative")
    rng = np.random.default_rng() if rng is None else rng
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) * (scale / np.sqrt(fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(tuple(widths), tuple(weights), tuple(biases), activation)


def _as_batch(params: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.d_in:
        raise ShapeError(f"input has shape {x.shape}, network expects (*, {params.d_in})")
    return x, single


class DiffContext:
    """One recorded forward pass, with optional input tangents.

    ``directions`` is a ``(K, d_in)`` array of input-space directions shared by
    every sample. After construction ``out`` is ``(B, d_out)`` and ``tangents``
    is ``(B, K, d_out)``: ``tangents[b, k]`` is the derivative of the output at
    sample ``b`` along ``directions[k]``. :meth:`backward` maps adjoints of both
    back to parameter gradients.
    """

    def __init__(self, params: MlpParams, x, directions=None):
        x, _ = _as_batch(params, x)
        self.params = params
        self.batch = x.shape[0]
        h = x
        dh = None
        if directions is not None:
            directions = np.asarray(directions, dtype=np.float64)
            if directions.ndim != 2 or directions.shape[1] != params.d_in:
                raise ShapeError(f"directions must be (K, {params.d_in}); got {directions.shape}")
            dh = np.broadcast_to(directions, (x.shape[0],) + directions.shape)
        self._cache = []
        last = params.n_layers - 1
        for l, (w, b) in enumerate(zip(params.weights, params.biases)):
            z = h @ w.T + b
            dz = None if dh is None else dh @ w.T
            if l < last:
                s1 = swish_d1(z)
                self._cache.append((h, dh, z, dz, s1))
                h = swish(z)
                dh = None if dz is None else s1[:, None, :] * dz
            else:
                self._cache.append((h, dh, z, dz, None))
                h, dh = z, dz
        self.out = h
        self.tangents = dh

    @property
    def n_directions(self) -> int:
        return 0 if self.tangents is None else self.tangents.shape[1]

    def backward(self, out_bar=None, tan_bar=None) -> MlpParams:
        """Parameter gradient of ``sum(out_bar * out) + sum(tan_bar * tangents)``."""
        p = self.params
        g_h = None if out_bar is None else np.asarray(out_bar, dtype=np.float64)
        g_dh = None if tan_bar is None else np.asarray(tan_bar, dtype=np.float64)
        if g_h is not None and g_h.shape != self.out.shape:
            raise ShapeError(f"out_bar shape {g_h.shape} != output shape {self.out.shape}")
        if g_dh is not None:
            if self.tangents is None:
                raise UsageError("tangent adjoint given but no directions were recorded")
            if g_dh.shape != self.tangents.shape:
                raise ShapeError(f"tan_bar shape {g_dh.shape} != tangent shape {self.tangents.shape}")
        if g_h is None:
            g_h = np.zeros_like(self.out)
        grads_w = [None] * p.n_layers
        grads_b = [None] * p.n_layers
        for l in range(p.n_layers - 1, -1, -1):
            h_prev, dh_prev, z, dz, s1 = self._cache[l]
            w = p.weights[l]
            if s1 is None:
                g_z, g_dz = g_h, g_dh
            else:
                g_z = g_h * s1
                g_dz = None
                if g_dh is not None:
                    g_z = g_z + swish_d2(z) * np.einsum("bkn,bkn->bn", g_dh, dz)
                    g_dz = g_dh * s1[:, None, :]
            gw = g_z.T @ h_prev
            if g_dz is not None:
                n_out, n_in = w.shape
                gw = gw + g_dz.reshape(-1, n_out).T @ dh_prev.reshape(-1, n_in)
            grads_w[l] = gw
            grads_b[l] = g_z.sum(axis=0)
            if l > 0:
                g_h = g_z @ w
                g_dh = None if g_dz is None else g_dz @ w
        return replace(p, weights=tuple(grads_w), biases=tuple(grads_b))


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Evaluate the network on one point ``(d_in,)`` or a batch ``(B, d_in)``."""
    x, single = _as_batch(params, x)
    h = x
    last = params.n_layers - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if l < last:
            h = swish(h)
    return h[0] if single else h


def jacobian(params: MlpParams, x) -> np.ndarray:
    """Input Jacobian, ``(d_out, d_in)`` for one point or ``(B, d_out, d_in)``."""
    xb, single = _as_batch(params, x)
    ctx = DiffContext(params, xb, np.eye(params.d_in))
    jac = np.swapaxes(ctx.tangents, 1, 2)
    return jac[0] if single else jac


def divergence(params: MlpParams, x) -> np.ndarray | float:
    """Trace of the input Jacobian; requires a square network."""
    if params.d_in != params.d_out:
        raise ShapeError(f"divergence needs d_in == d_out, got {params.d_in} -> {params.d_out}")
    xb, single = _as_batch(params, x)
    ctx = DiffContext(params, xb, np.eye(params.d_in))
    div = np.einsum("bkk->b", ctx.tangents)
    return float(div[0]) if single else div


@dataclass
class ScalarNode:
    """A scalar loss value plus the adjoint seeds that produced it.

    ``seeds`` holds ``(context, out_bar, tan_bar)`` triples; the gradient is
    the sum of the corresponding backward passes. A node without ``params`` is
    detached and has no gradient.
    """

    value: float
    params: MlpParams | None = None
    seeds: list = field(default_factory=list)


def grad_params(node: ScalarNode) -> MlpParams:
    if node.params is None:
        raise UsageError("loss node is detached from any network")
    total = node.params.zeros_like()
    for ctx, out_bar, tan_bar in node.seeds:
        if ctx.params is not node.params:
            raise UsageError("loss node mixes contexts from different parameter sets")
        total = add(total, ctx.backward(out_bar, tan_bar))
    return total


def add(a: MlpParams, b: MlpParams) -> MlpParams:
    return a.with_arrays([x + y for x, y in zip(a.arrays(), b.arrays())])


def scale(a: MlpParams, factor: float) -> MlpParams:
    return a.with_arrays([x * factor for x in a.arrays()])


@dataclass(frozen=True)
class AdamState:
    m: MlpParams
    v: MlpParams
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: MlpParams, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    zeros = params.zeros_like()
    return AdamState(m=zeros, v=zeros, step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, params: MlpParams, grads: MlpParams) -> tuple[MlpParams, AdamState]:
    """Bias-corrected Adam update; returns new parameters and state."""
    if params.widths != grads.widths or params.widths != state.m.widths:
        raise ShapeError("parameters, gradients and Adam state are not congruent")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m.arrays(), state.v.arrays()):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return (params.with_arrays(new_p),
            replace(state, m=state.m.with_arrays(new_m), v=state.v.with_arrays(new_v), step=t))


def ema_update(avg: MlpParams, params: MlpParams, decay: float) -> MlpParams:
    return avg.with_arrays([decay * a + (1.0 - decay) * p for a, p in zip(avg.arrays(), params.arrays())])

