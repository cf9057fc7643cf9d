"""Velocity reconstruction from a fixed score field.

The constraint operator is the score form of the stationary Fokker-Planck
equation,

    N(s, v)(x) = s . v + div v - D (|s|^2 + div s),

and the reconstruction looks for the smallest-L2 drift with N = 0 at the data.
:func:`train_velocity` runs the stochastic augmented Lagrangian loop;
:func:`train_pinn` minimises the mean squared residual directly and serves as
the baseline.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .dynamics import SystemSpec, drift, drift_diagonal
from .errors import CompatibilityError, ConfigError, DataError, ShapeError, TrainingError, UsageError
from .rng import stream

log = logging.getLogger(__name__)

COLLOCATION = ("uniform-box", "data")
CONSTRAINT_SCALING = ("sum", "mean")
EVAL_CHUNK = 4096


@dataclass(frozen=True)
class AnalyticField:
    """A vector field given by closed-form callables, for checks and oracles."""

    fn: Callable[[np.ndarray], np.ndarray]
    div_fn: Callable[[np.ndarray], np.ndarray]

    def with_divergence(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return self.fn(x), self.div_fn(x)

    def scaled(self, factor: float) -> "AnalyticField":
        return AnalyticField(lambda x: factor * self.fn(x), lambda x: factor * self.div_fn(x))


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def around(cls, points, pad: float = 0.05) -> "Box":
        x = np.asarray(points, dtype=np.float64)
        lo, hi = x.min(axis=0), x.max(axis=0)
        width = np.where(hi > lo, hi - lo, 1.0)
        return cls(lo - pad * width, hi + pad * width)

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * rng.random((n, self.lo.size))


@dataclass(frozen=True)
class VelocityModel:
    """Drift assembled from learned and known components.

    The network sees ``(x - input_shift) / input_scale`` and its outputs,
    multiplied by ``output_scale``, fill the slots where ``known_mask`` is
    False; the remaining slots come from ``known_system``.
    """

    net: ad.MlpParams | None
    known_mask: tuple[bool, ...]
    D: float
    known_system: SystemSpec | None = None
    input_shift: np.ndarray | None = None
    input_scale: np.ndarray | None = None
    output_scale: float = 1.0
    collocation: str = "uniform-box"

    def __post_init__(self):
        mask = tuple(bool(m) for m in self.known_mask)
        object.__setattr__(self, "known_mask", mask)
        d = len(mask)
        if self.net is None:
            if not all(mask):
                raise ShapeError("a velocity model without a network needs every component known")
        elif self.net.d_in != d:
            raise ShapeError(f"velocity network input {self.net.d_in} != dimension {d}")
        elif self.net.d_out != d - sum(mask):
            raise ShapeError(f"velocity network has {self.net.d_out} outputs for {d - sum(mask)} unknown components")
        if any(mask):
            if self.known_system is None:
                raise ConfigError("known components need a known_system")
            if self.known_system.dim != d:
                raise CompatibilityError("known_system dimension does not match the velocity model")
        shift = np.zeros(d) if self.input_shift is None else np.asarray(self.input_shift, dtype=np.float64)
        scale = np.ones(d) if self.input_scale is None else np.asarray(self.input_scale, dtype=np.float64)
        object.__setattr__(self, "input_shift", shift)
        object.__setattr__(self, "input_scale", scale)

    @property
    def d(self) -> int:
        return len(self.known_mask)

    @property
    def unknown(self) -> np.ndarray:
        return np.flatnonzero(~np.array(self.known_mask))

    @property
    def known(self) -> np.ndarray:
        return np.flatnonzero(np.array(self.known_mask))

    def _batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.d:
            raise ShapeError(f"points have shape {x.shape}, velocity model expects (*, {self.d})")
        return x, single

    def _inputs(self, x: np.ndarray) -> np.ndarray:
        return (x - self.input_shift) / self.input_scale

    def _known_parts(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        v = np.zeros_like(x)
        div = np.zeros(x.shape[0])
        if self.known.size:
            v[:, self.known] = drift(self.known_system, x)[:, self.known]
            div = drift_diagonal(self.known_system, x)[:, self.known].sum(axis=1)
        return v, div

    def record(self, x: np.ndarray) -> "VelocityBatch":
        """Differentiable evaluation of the drift and its divergence."""
        return VelocityBatch(self, x)

    def __call__(self, x) -> np.ndarray:
        xb, single = self._batch(x)
        out = np.empty_like(xb)
        for start in range(0, xb.shape[0], EVAL_CHUNK):
            part = xb[start:start + EVAL_CHUNK]
            v, _ = self._known_parts(part)
            if self.unknown.size:
                v[:, self.unknown] = self.output_scale * ad.mlp_forward(self.net, self._inputs(part))
            out[start:start + EVAL_CHUNK] = v
        return out[0] if single else out

    def with_divergence(self, x):
        xb, _ = self._batch(x)
        vs, divs = [], []
        for start in range(0, xb.shape[0], EVAL_CHUNK):
            rec = VelocityBatch(self, xb[start:start + EVAL_CHUNK])
            vs.append(rec.v)
            divs.append(rec.div)
        return np.concatenate(vs), np.concatenate(divs)

    def to_dict(self) -> dict:
        return {
            "network": None if self.net is None else self.net.to_dict(),
            "known_mask": list(self.known_mask),
            "D": self.D,
            "known_system": None if self.known_system is None else self.known_system.to_dict(),
            "input_shift": self.input_shift.tolist(),
            "input_scale": self.input_scale.tolist(),
            "output_scale": self.output_scale,
            "collocation": self.collocation,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "VelocityModel":
        ks = data.get("known_system")
        return cls(
            net=None if data["network"] is None else ad.MlpParams.from_dict(data["network"]),
            known_mask=tuple(data["known_mask"]),
            D=float(data["D"]),
            known_system=None if ks is None else SystemSpec(ks["kind"], ks.get("params", {}), float(ks["D"])),
            input_shift=np.array(data["input_shift"], dtype=np.float64),
            input_scale=np.array(data["input_scale"], dtype=np.float64),
            output_scale=float(data.get("output_scale", 1.0)),
            collocation=data.get("collocation", "uniform-box"),
        )


class VelocityBatch:
    """Recorded drift values and divergence at a batch of points.

    Tangents are taken only along the coordinate axes of the learned
    components, since only the diagonal of the Jacobian enters the divergence.
    """

    def __init__(self, model: VelocityModel, x):
        x, _ = model._batch(x)
        self.model = model
        self.x = x
        self.v, self.div = model._known_parts(x)
        self.ctx = None
        unknown = model.unknown
        if unknown.size:
            directions = np.eye(model.d)[unknown]
            self.ctx = ad.DiffContext(model.net, model._inputs(x), directions)
            self.v[:, unknown] = model.output_scale * self.ctx.out
            # d v_c / d x_c = output_scale / input_scale_c * d net_c / d z_c
            diag = np.einsum("bkk->bk", self.ctx.tangents)
            self.div = self.div + (model.output_scale * diag / model.input_scale[unknown]).sum(axis=1)

    def seed(self, v_bar: np.ndarray | None = None, div_bar: np.ndarray | None = None):
        """Backward seed for a loss with adjoints ``v_bar`` (B, d) and ``div_bar`` (B,)."""
        if self.ctx is None:
            return None
        m = self.model
        unknown = m.unknown
        out_bar = None
        tan_bar = None
        if v_bar is not None:
            out_bar = m.output_scale * v_bar[:, unknown]
        if div_bar is not None:
            k = unknown.size
            tan_bar = np.zeros((self.x.shape[0], k, k))
            idx = np.arange(k)
            tan_bar[:, idx, idx] = div_bar[:, None] * (m.output_scale / m.input_scale[unknown])
        return (self.ctx, out_bar, tan_bar)


def make_velocity_model(d: int, hidden, rng: np.random.Generator, D: float, known_mask=None,
                        known_system: SystemSpec | None = None, points=None, init_scale: float = 1.0,
                        normalize: bool = True, collocation: str = "uniform-box") -> VelocityModel:
    """Fresh velocity model; with ``normalize`` the input affine map comes from ``points``.

    When every component is known the model carries no network.
    """
    mask = tuple([False] * d) if known_mask is None else tuple(bool(m) for m in known_mask)
    if len(mask) != d:
        raise ConfigError(f"known_mask needs {d} entries")
    m = d - sum(mask)
    net = ad.init_params((d, *hidden, m), init_scale, rng) if m else None
    shift = scale = None
    if normalize and points is not None:
        pts = np.asarray(points, dtype=np.float64)
        shift = pts.mean(axis=0)
        scale = pts.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
    return VelocityModel(net, mask, D, known_system, shift, scale, 1.0, collocation)


def velocity_eval(vel: VelocityModel, x) -> np.ndarray:
    return vel(x)


# --------------------------------------------------------------------------
# residual and losses


def residual_from_parts(s, div_s, v, div_v, D: float) -> np.ndarray:
    """s.v + div v - D (|s|^2 + div s), row-wise."""
    s = np.atleast_2d(s)
    v = np.atleast_2d(v)
    return np.sum(s * v, axis=1) + div_v - D * (np.sum(s * s, axis=1) + div_s)


def residual(score, vel, x, D: float | None = None) -> np.ndarray:
    """Residual of the score-form Fokker-Planck equation at each row of ``x``.

    ``score`` and ``vel`` are anything with ``with_divergence(x)``: trained
    models or :class:`AnalyticField` objects. ``D`` defaults to ``vel.D``.
    """
    if D is None:
        if not hasattr(vel, "D"):
            raise UsageError("D must be given when the velocity is not a VelocityModel")
        D = vel.D
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    s, div_s = score.with_divergence(x)
    v, div_v = vel.with_divergence(x)
    if s.shape != v.shape:
        raise ShapeError(f"score {s.shape} and velocity {v.shape} disagree")
    return residual_from_parts(s, div_s, v, div_v, D)


@dataclass(frozen=True)
class ScoreCache:
    """Score values s and q = |s|^2 + div s at fixed points."""

    s: np.ndarray
    q: np.ndarray

    @classmethod
    def compute(cls, score, points) -> "ScoreCache":
        x = np.asarray(points, dtype=np.float64)
        ss, qs = [], []
        for start in range(0, x.shape[0], EVAL_CHUNK):
            s, div_s = score.with_divergence(x[start:start + EVAL_CHUNK])
            ss.append(s)
            qs.append(np.sum(s * s, axis=1) + div_s)
        s = np.concatenate(ss)
        q = np.concatenate(qs)
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(q))):
            raise DataError("score is not finite at some training points")
        return cls(s, q)

    def take(self, idx) -> "ScoreCache":
        return ScoreCache(self.s[idx], self.q[idx])


def _residual_batch(vel: VelocityModel, x: np.ndarray, cache: ScoreCache) -> tuple[VelocityBatch, np.ndarray]:
    rec = vel.record(x)
    r = np.sum(cache.s * rec.v, axis=1) + rec.div - vel.D * cache.q
    return rec, r


def _residual_seed(rec: VelocityBatch, cache: ScoreCache, r_bar: np.ndarray):
    return rec.seed(v_bar=r_bar[:, None] * cache.s, div_bar=r_bar)


def _node(vel: VelocityModel, value: float, seeds) -> ad.ScalarNode:
    return ad.ScalarNode(value, vel.net, [s for s in seeds if s is not None])


def _cache_for(score, x) -> ScoreCache:
    return score if isinstance(score, ScoreCache) else ScoreCache.compute(score, x)


def pinn_loss(score, vel: VelocityModel, batch) -> ad.ScalarNode:
    """Mean squared residual over the batch."""
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if x.shape[0] == 0:
        raise ShapeError("empty batch")
    cache = _cache_for(score, x)
    rec, r = _residual_batch(vel, x, cache)
    b = x.shape[0]
    return _node(vel, float(np.mean(r * r)), [_residual_seed(rec, cache, 2.0 * r / b)])


def energy_term(vel: VelocityModel, collocation, volume: float = 1.0) -> ad.ScalarNode:
    """``volume`` times the mean of |v|^2 over the collocation points."""
    x = np.atleast_2d(np.asarray(collocation, dtype=np.float64))
    rec = vel.record(x)
    b = x.shape[0]
    sq = np.sum(rec.v * rec.v, axis=1)
    return _node(vel, volume * float(np.mean(sq)), [rec.seed(v_bar=2.0 * volume * rec.v / b)])


def merit_terms(vel: VelocityModel, x: np.ndarray, cache: ScoreCache, lam: np.ndarray, mu: float,
                colloc: np.ndarray, volume: float, weight: float = 1.0
                ) -> tuple[ad.ScalarNode, float, np.ndarray]:
    """Merit node, its energy part, and the batch residuals.

    The constraint part is ``weight * sum_batch(lambda_i N_i + mu/2 N_i^2)``.
    """
    energy = energy_term(vel, colloc, volume)
    rec, r = _residual_batch(vel, x, cache)
    value = energy.value + weight * (float(np.dot(lam, r)) + 0.5 * mu * float(np.dot(r, r)))
    seed = _residual_seed(rec, cache, weight * (lam + mu * r))
    node = _node(vel, value, energy.seeds + [seed])
    return node, energy.value, r


def auglag_merit(score, vel: VelocityModel, batch, lambda_slice, mu: float, collocation,
                 volume: float = 1.0, n_total: int | None = None) -> ad.ScalarNode:
    """energy + lambda . N + mu/2 |N|^2 on one batch.

    With ``n_total`` the constraint sums are scaled by ``n_total / batch size``,
    an unbiased estimate of the sums over the full data set.
    """
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    lam = np.asarray(lambda_slice, dtype=np.float64)
    if lam.shape != (x.shape[0],):
        raise UsageError(f"multiplier slice has shape {lam.shape}, batch has {x.shape[0]} points")
    cache = _cache_for(score, x)
    weight = 1.0 if n_total is None else n_total / x.shape[0]
    node, _, _ = merit_terms(vel, x, cache, lam, mu, np.atleast_2d(collocation), volume, weight)
    return node


def residual_vector(score, vel: VelocityModel, points) -> np.ndarray:
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cache = _cache_for(score, x)
    out = np.empty(x.shape[0])
    for start in range(0, x.shape[0], EVAL_CHUNK):
        sl = slice(start, start + EVAL_CHUNK)
        _, out[sl] = _residual_batch(vel, x[sl], cache.take(sl))
    return out


def rms(r: np.ndarray) -> float:
    return float(np.linalg.norm(r) / np.sqrt(r.size))


def full_residual_norm(score, vel: VelocityModel, all_points) -> float:
    """RMS residual over the whole data set, ||N||_2 / sqrt(N)."""
    return rms(residual_vector(score, vel, all_points))


# --------------------------------------------------------------------------
# training


@dataclass
class VelocityTrainConfig:
    batch_size: int = 256
    n_shuffle: int = 20
    n_aug: int = 5
    lr: float = 1e-4
    eta: float = 0.75
    a: float = 2.0
    mu_init: float = 1.0
    mu_max: float = 1e4
    epsilon: float = 1e-6
    collocation: str = "uniform-box"
    pad: float = 0.05
    seed: int = 0
    hidden: tuple[int, ...] = (128,) * 5
    init_scale: float = 1.0
    normalize_inputs: bool = True
    log_wall_time: bool = True
    reset_adam: bool = True
    constraint_scaling: str = "sum"

    def __post_init__(self):
        if self.batch_size < 1 or self.n_shuffle < 1 or self.n_aug < 1:
            raise ConfigError("batch_size, n_shuffle and n_aug must be >= 1")
        if not 0.0 < self.eta < 1.0:
            raise ConfigError("eta must be in (0, 1)")
        if not self.a > 1.0:
            raise ConfigError("a must be > 1")
        if not (0.0 < self.mu_init <= self.mu_max):
            raise ConfigError("need 0 < mu_init <= mu_max")
        if not (self.lr > 0 and self.epsilon >= 0):
            raise ConfigError("lr must be positive and epsilon non-negative")
        if self.collocation not in COLLOCATION:
            raise ConfigError(f"collocation must be one of {COLLOCATION}")
        if self.constraint_scaling not in CONSTRAINT_SCALING:
            raise ConfigError(f"constraint_scaling must be one of {CONSTRAINT_SCALING}")


@dataclass
class AugLagState:
    """Multipliers (one per training point, in data order) and penalty bookkeeping."""

    lam: np.ndarray
    mu: float
    best_rms: float
    eta: float
    a: float
    mu_init: float
    mu_max: float
    epsilon: float
    shuffle: int = 0
    outer: int = 0

    def outer_update(self, r_all: np.ndarray) -> tuple[bool, bool]:
        """Apply the sufficient-reduction test. Returns ``(accepted, converged)``."""
        current = rms(r_all)
        if current <= self.eta * self.best_rms:
            if current <= self.epsilon:
                return True, True
            self.lam = self.lam + self.mu * r_all
            self.best_rms = current
            return True, False
        self.mu = min(self.a * self.mu, self.mu_max)
        return False, False

    def start_shuffle(self, j: int) -> None:
        self.shuffle = j
        self.mu = min(self.mu_init * (j + 1), self.mu_max)


LOG_COLUMNS = ("shuffle", "outer_k", "residual_rms", "residual_l2", "mu", "merit", "energy", "accepted", "wall_ms")


@dataclass
class VelocityTrainResult:
    model: VelocityModel
    rows: list[dict] = field(default_factory=list)
    termination: str = "budget"
    lam: np.ndarray | None = None
    state: AugLagState | None = None

    @property
    def final_rms(self) -> float:
        return self.rows[-1]["residual_rms"]

    def lambda_stats(self) -> dict:
        lam = np.zeros(1) if self.lam is None else self.lam
        return {"min": float(lam.min()), "max": float(lam.max()), "mean": float(lam.mean())}


def _prepare(points, score, known_mask, known_system, D, config: VelocityTrainConfig):
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise DataError("training points must be a non-empty (N, d) array")
    cache = score if isinstance(score, ScoreCache) else None
    if cache is None:
        d_score = getattr(score, "d", x.shape[1])
        if d_score != x.shape[1]:
            raise CompatibilityError(f"score model has d={d_score}, data has d={x.shape[1]}")
        cache = ScoreCache.compute(score, x)
    vel = make_velocity_model(x.shape[1], config.hidden, stream(config.seed, 20, 0), D, known_mask,
                              known_system, x, config.init_scale, config.normalize_inputs, config.collocation)
    if vel.net is None:
        raise ConfigError("known_mask leaves no component to learn")
    box = Box.around(x, config.pad)
    return x, cache, vel, box


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    return [order[i:i + size] for i in range(0, order.size, size)]


def _row(j, k, r_all, mu, merit, energy, accepted, wall_ms):
    return {"shuffle": j, "outer_k": k, "residual_rms": rms(r_all),
            "residual_l2": float(np.linalg.norm(r_all)), "mu": mu, "merit": merit,
            "energy": energy, "accepted": accepted, "wall_ms": wall_ms}


def train_velocity(points, score, D: float, config: VelocityTrainConfig, known_mask=None,
                   known_system: SystemSpec | None = None,
                   on_outer: Callable[[dict], None] | None = None) -> VelocityTrainResult:
    """Stochastic augmented Lagrangian training of the velocity network.

    Per shuffle j the data are permuted into batches of ``batch_size`` (last
    short batch kept) and the penalty restarts at ``mu_init * (j + 1)``.
    Each of the ``n_aug`` outer iterations makes one Adam pass over those
    batches, then compares the full-data residual RMS with the best so far:
    a reduction by ``eta`` updates the multipliers (or stops when below
    ``epsilon``), otherwise the penalty grows by ``a`` up to ``mu_max``.
    Multipliers carry over between shuffles; Adam moments do not.
    """
    x, cache, vel, box = _prepare(points, score, known_mask, known_system, D, config)
    n = x.shape[0]
    shuffle_rng = stream(config.seed, 20, 1)
    colloc_rng = stream(config.seed, 20, 2)
    t0 = time.perf_counter()

    def wall():
        return round((time.perf_counter() - t0) * 1e3, 3) if config.log_wall_time else 0.0

    r_all = residual_vector(cache, vel, x)
    state = AugLagState(np.zeros(n), config.mu_init, rms(r_all), config.eta, config.a,
                        config.mu_init, config.mu_max, config.epsilon)
    rows = [_row(0, 0, r_all, state.mu, float("nan"), float("nan"), False, wall())]
    result = VelocityTrainResult(vel, rows, "budget", state.lam, state)
    if state.best_rms <= config.epsilon:
        result.termination = "epsilon"
        return result

    for j in range(1, config.n_shuffle + 1):
        state.start_shuffle(j)
        batches = _batches(shuffle_rng.permutation(n), config.batch_size)
        if j == 1 or config.reset_adam:
            opt = ad.adam_init(vel.net, lr=config.lr)
        for k in range(1, config.n_aug + 1):
            state.outer = k
            merit_sum = energy_sum = 0.0
            for idx in batches:
                xb = x[idx]
                colloc = xb if config.collocation == "data" else box.sample(colloc_rng, config.batch_size)
                volume = 1.0 if config.collocation == "data" else box.volume
                weight = (n if config.constraint_scaling == "sum" else 1.0) / idx.size
                node, energy, _ = merit_terms(vel, xb, cache.take(idx), state.lam[idx], state.mu, colloc,
                                              volume, weight)
                if not np.isfinite(node.value):
                    raise TrainingError(f"non-finite merit at shuffle {j}, outer iteration {k}")
                net, opt = ad.adam_step(opt, vel.net, ad.grad_params(node))
                vel = _with_net(vel, net)
                merit_sum += node.value
                energy_sum += energy
            r_all = residual_vector(cache, vel, x)
            if not np.all(np.isfinite(r_all)):
                raise TrainingError(f"non-finite residual at shuffle {j}, outer iteration {k}")
            mu_used = state.mu
            accepted, converged = state.outer_update(r_all)
            row = _row(j, k, r_all, mu_used, merit_sum / len(batches), energy_sum / len(batches), accepted, wall())
            rows.append(row)
            if on_outer is not None:
                on_outer(row)
            if converged:
                result.model, result.termination, result.lam = vel, "epsilon", state.lam
                return result
    result.model, result.lam = vel, state.lam
    return result


def train_pinn(points, score, D: float, config: VelocityTrainConfig, known_mask=None,
               known_system: SystemSpec | None = None,
               on_outer: Callable[[dict], None] | None = None) -> VelocityTrainResult:
    """Baseline: Adam on the mean squared residual with the same batches and step budget.

    The loop mirrors :func:`train_velocity` (same initial network, shuffles,
    number of steps and Adam restarts) and logs the full-data residual at the
    same points, so the two logs line up row by row.
    """
    x, cache, vel, _ = _prepare(points, score, known_mask, known_system, D, config)
    n = x.shape[0]
    shuffle_rng = stream(config.seed, 20, 1)
    t0 = time.perf_counter()

    def wall():
        return round((time.perf_counter() - t0) * 1e3, 3) if config.log_wall_time else 0.0

    r_all = residual_vector(cache, vel, x)
    rows = [_row(0, 0, r_all, 0.0, float("nan"), float("nan"), False, wall())]
    for j in range(1, config.n_shuffle + 1):
        batches = _batches(shuffle_rng.permutation(n), config.batch_size)
        if j == 1 or config.reset_adam:
            opt = ad.adam_init(vel.net, lr=config.lr)
        for k in range(1, config.n_aug + 1):
            loss_sum = 0.0
            for idx in batches:
                node = pinn_loss(cache.take(idx), vel, x[idx])
                if not np.isfinite(node.value):
                    raise TrainingError(f"non-finite residual loss at shuffle {j}, outer iteration {k}")
                net, opt = ad.adam_step(opt, vel.net, ad.grad_params(node))
                vel = _with_net(vel, net)
                loss_sum += node.value
            r_all = residual_vector(cache, vel, x)
            row = _row(j, k, r_all, 0.0, loss_sum / len(batches), 0.0, False, wall())
            rows.append(row)
            if on_outer is not None:
                on_outer(row)
    return VelocityTrainResult(vel, rows, "budget", None, None)


def _with_net(vel: VelocityModel, net: ad.MlpParams) -> VelocityModel:
    # skip __post_init__ validation in the inner loop
    new = object.__new__(VelocityModel)
    new.__dict__.update(vel.__dict__)
    object.__setattr__(new, "net", net)
    return new
