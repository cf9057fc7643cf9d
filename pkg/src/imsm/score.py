"""Multi-scale denoising score matching for point clouds.

Noise levels follow a geometric ladder sigma_1 > ... > sigma_L with ratio
gamma: sigma_1 is the data diameter, gamma comes from the shell-overlap
condition, and L is the largest count that keeps sigma_L above a floor.
The network output is divided by sigma, so ``net(x) / sigma`` estimates the
score of the data smoothed at level sigma. By default the network also sees
``log(sigma)`` as an extra input.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .errors import ConfigError, DataError, NumericError, SamplingError, ShapeError, TrainingError
from .rng import stream

log = logging.getLogger(__name__)

CONDITIONING = ("log-sigma", "none")
EXACT_DIAMETER_LIMIT = 20_000


# --------------------------------------------------------------------------
# noise schedule


def _max_pairwise(a: np.ndarray, b: np.ndarray | None = None, block: int = 512) -> float:
    """Exact max Euclidean distance between rows of ``a`` and ``b`` (or within ``a``)."""
    best = 0.0
    same = b is None
    b = a if same else b
    for start in range(0, a.shape[0], block):
        rows = a[start:start + block]
        other = b[start:] if same else b
        if other.shape[0] == 0:
            continue
        best = max(best, float(cdist(rows, other).max()))
    return best


def sigma1_from_data(points) -> float:
    """Largest pairwise Euclidean distance in the point set.

    Up to ``EXACT_DIAMETER_LIMIT`` points this is a blocked all-pairs scan.
    Above it, a few farthest-point sweeps give a lower bound ``lb``; a pair
    longer than ``lb`` must have both ends farther than ``lb - R`` from the
    bounding-box centre (``R`` the largest such distance), so only those
    candidates are scanned exactly.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise DataError("need at least two points to measure the data diameter")
    if x.shape[0] <= EXACT_DIAMETER_LIMIT:
        return _max_pairwise(x)
    centre = 0.5 * (x.min(axis=0) + x.max(axis=0))
    radius = np.linalg.norm(x - centre, axis=1)
    big_r = float(radius.max())
    i = int(np.argmax(radius))
    lb = 0.0
    for _ in range(6):
        dist = np.linalg.norm(x - x[i], axis=1)
        j = int(np.argmax(dist))
        if dist[j] <= lb:
            break
        lb, i = float(dist[j]), j
    cand = x[radius >= lb - big_r]
    return max(lb, _max_pairwise(cand))


def _norm_cdf(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def shell_overlap(gamma: float, d: int) -> float:
    """Phi(sqrt(2d)(gamma-1) + 3 gamma) - Phi(sqrt(2d)(gamma-1) - 3 gamma)."""
    a = math.sqrt(2.0 * d) * (gamma - 1.0)
    return _norm_cdf(a + 3.0 * gamma) - _norm_cdf(a - 3.0 * gamma)


def solve_gamma(d: int, lo: float = 1.0, hi: float = 10.0, tol: float = 1e-6) -> float:
    """Ratio gamma in (lo, hi] where the shell overlap equals 0.5, by bisection.

    Raises NumericError when the overlap does not cross 0.5 inside the
    bracket. That is the case for every d <= 4 (the overlap stays above 0.5
    for all gamma > 1) and for d = 5 (the crossing is near 19.5).
    """
    if d < 1:
        raise ConfigError("dimension must be >= 1")
    f_lo = shell_overlap(lo, d) - 0.5
    f_hi = shell_overlap(hi, d) - 0.5
    if f_lo * f_hi > 0:
        raise NumericError(
            f"shell-overlap equation has no root for d={d} in ({lo}, {hi}]: "
            f"overlap is {f_lo + 0.5:.6f} at gamma={lo} and {f_hi + 0.5:.6f} at gamma={hi}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f_mid = shell_overlap(mid, d) - 0.5
        if f_mid == 0.0 or hi - lo < 1e-15:
            break
        if (f_mid > 0) == (f_lo > 0):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    if abs(shell_overlap(mid, d) - 0.5) > tol:
        raise NumericError(f"bisection for gamma stalled with residual {abs(f_mid):.3e} (d={d})")
    return mid


@dataclass(frozen=True)
class NoiseSchedule:
    sigmas: np.ndarray
    gamma: float
    sigma_min: float
    gamma_source: str = "criterion"

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=np.float64)
        object.__setattr__(self, "sigmas", s)
        if s.ndim != 1 or s.size == 0 or np.any(s <= 0):
            raise ConfigError("noise levels must be a non-empty vector of positive values")
        if s.size > 1 and np.any(np.diff(s) >= 0):
            raise ConfigError("noise levels must be strictly decreasing")

    @property
    def L(self) -> int:
        return int(self.sigmas.size)

    @property
    def sigma_1(self) -> float:
        return float(self.sigmas[0])

    @property
    def sigma_L(self) -> float:
        return float(self.sigmas[-1])

    def to_dict(self) -> dict:
        return {"sigmas": self.sigmas.tolist(), "gamma": self.gamma, "L": self.L,
                "sigma_min": self.sigma_min, "gamma_source": self.gamma_source}

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseSchedule":
        return cls(np.array(data["sigmas"], dtype=np.float64), float(data["gamma"]),
                   float(data["sigma_min"]), data.get("gamma_source", "criterion"))


def geometric_schedule(sigma_1: float, gamma: float, sigma_min: float,
                       gamma_source: str = "criterion") -> NoiseSchedule:
    """sigma_i = sigma_1 * gamma**-(i-1) for the largest L with sigma_L >= sigma_min."""
    if not sigma_1 > sigma_min:
        raise ConfigError(f"largest noise level {sigma_1:g} must exceed sigma_min {sigma_min:g}")
    if not gamma > 1:
        raise ConfigError("gamma must be > 1")
    L = int(math.floor(math.log(sigma_1 / sigma_min) / math.log(gamma))) + 1
    # guard the floor against rounding at exact powers of gamma
    while L > 1 and sigma_1 * gamma ** -(L - 1) < sigma_min:
        L -= 1
    while sigma_1 * gamma ** -L >= sigma_min:
        L += 1
    sigmas = sigma_1 * gamma ** -np.arange(L, dtype=np.float64)
    return NoiseSchedule(sigmas, float(gamma), float(sigma_min), gamma_source)


def build_schedule(points, sigma_min: float = 0.01, gamma: float | None = None,
                   gamma_fallback: float = 1.5) -> NoiseSchedule:
    """Schedule from data: diameter for sigma_1, overlap root for gamma.

    When the overlap equation has no root for this dimension, ``gamma_fallback``
    is used and the schedule records ``gamma_source="fallback"``.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    sigma_1 = sigma1_from_data(x)
    source = "given"
    if gamma is None:
        try:
            gamma = solve_gamma(x.shape[1])
            source = "criterion"
        except NumericError as exc:
            log.warning("%s; using fallback gamma=%g", exc, gamma_fallback)
            gamma, source = gamma_fallback, "fallback"
    return geometric_schedule(sigma_1, gamma, sigma_min, source)


# --------------------------------------------------------------------------
# score model


@dataclass(frozen=True)
class Standardization:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"enabled": True, "mean": self.mean.tolist(), "std": self.std.tolist()}


@dataclass(frozen=True)
class ScoreModel:
    """Trained score network together with its schedule.

    ``conditioning="log-sigma"`` appends log(sigma) to the network input;
    ``"none"`` feeds x only, so ``sigma * s(x, sigma)`` does not depend on sigma.
    With ``standardization`` the network works on (x - mean) / std and the
    schedule is in those units; :meth:`score` always returns the score in the
    original coordinates.
    """

    net: ad.MlpParams
    schedule: NoiseSchedule
    conditioning: str = "log-sigma"
    standardization: Standardization | None = None
    bounds: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        if self.conditioning not in CONDITIONING:
            raise ConfigError(f"unknown conditioning {self.conditioning!r}")
        extra = 1 if self.conditioning == "log-sigma" else 0
        if self.net.d_in != self.net.d_out + extra:
            raise ShapeError(f"score network {self.net.widths} does not match conditioning {self.conditioning!r}")

    @property
    def d(self) -> int:
        return self.net.d_out

    def _net_input(self, z: np.ndarray, sigma) -> np.ndarray:
        if self.conditioning == "none":
            return z
        col = np.broadcast_to(np.log(np.asarray(sigma, dtype=np.float64)), (z.shape[0],))
        return np.column_stack([z, col])

    def _to_internal(self, x: np.ndarray) -> np.ndarray:
        if self.standardization is None:
            return x
        return (x - self.standardization.mean) / self.standardization.std

    def _batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.d:
            raise ShapeError(f"points have shape {x.shape}, score model expects (*, {self.d})")
        return x, single

    def score(self, x, sigma: float | None = None) -> np.ndarray:
        """s(x, sigma) = net(x, sigma) / sigma, default sigma = sigma_L."""
        sigma = self.schedule.sigma_L if sigma is None else sigma
        xb, single = self._batch(x)
        out = ad.mlp_forward(self.net, self._net_input(self._to_internal(xb), sigma)) / sigma
        if self.standardization is not None:
            out = out / self.standardization.std
        return out[0] if single else out

    def score_and_divergence(self, x, sigma: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        sigma = self.schedule.sigma_L if sigma is None else sigma
        xb, single = self._batch(x)
        directions = np.eye(self.d, self.net.d_in)
        ctx = ad.DiffContext(self.net, self._net_input(self._to_internal(xb), sigma), directions)
        s = ctx.out / sigma
        diag = np.einsum("bkk->bk", ctx.tangents) / sigma
        if self.standardization is not None:
            s = s / self.standardization.std
            diag = diag / self.standardization.std ** 2
        div = diag.sum(axis=1)
        return (s[0], div[0]) if single else (s, div)

    def with_divergence(self, x):
        """Score and its divergence at the finest noise level."""
        return self.score_and_divergence(x)

    def to_dict(self) -> dict:
        out = {"network": self.net.to_dict(), "schedule": self.schedule.to_dict(),
               "conditioning": self.conditioning,
               "data_standardization": (self.standardization.to_dict() if self.standardization
                                        else {"enabled": False, "mean": None, "std": None})}
        if self.bounds is not None:
            out["bounds"] = {"lo": self.bounds[0].tolist(), "hi": self.bounds[1].tolist()}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ScoreModel":
        std = data.get("data_standardization") or {}
        standardization = None
        if std.get("enabled"):
            standardization = Standardization(np.array(std["mean"], dtype=np.float64),
                                              np.array(std["std"], dtype=np.float64))
        bounds = None
        if "bounds" in data:
            bounds = (np.array(data["bounds"]["lo"], dtype=np.float64),
                      np.array(data["bounds"]["hi"], dtype=np.float64))
        return cls(ad.MlpParams.from_dict(data["network"]), NoiseSchedule.from_dict(data["schedule"]),
                   data.get("conditioning", "log-sigma"), standardization, bounds)


def score_eval(model: ScoreModel, x) -> np.ndarray:
    """Score at the finest noise level."""
    return model.score(x)


def divergence_of_score(model: ScoreModel, x):
    return model.score_and_divergence(x)[1]


# --------------------------------------------------------------------------
# denoising loss


def _net_input(conditioning: str, z: np.ndarray, sigmas: np.ndarray) -> np.ndarray:
    if conditioning == "none":
        return z
    return np.column_stack([z, np.log(sigmas)])


def dsm_loss(net: ad.MlpParams, schedule: NoiseSchedule, batch, rng: np.random.Generator,
             conditioning: str = "log-sigma", antithetic: bool = False) -> ad.ScalarNode:
    """One-level-per-sample estimate of the weighted multi-scale objective.

    Each point gets a level drawn uniformly and one Gaussian perturbation;
    the per-sample term is 0.5 * |net(x~) + xi|^2, which equals
    0.5 * |sigma s(x~, sigma) + (x~ - x)/sigma|^2.

    With ``antithetic`` every point is used twice, with xi and -xi. The
    estimate stays unbiased, and the O(1) noise in the gradient cancels to
    O(sigma), which matters at the finest levels.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShapeError("batch must be a non-empty (B, d) array")
    b = x.shape[0]
    idx = rng.integers(0, schedule.L, size=b)
    sig = schedule.sigmas[idx]
    xi = rng.standard_normal(x.shape)
    if antithetic:
        x = np.concatenate([x, x])
        sig = np.concatenate([sig, sig])
        xi = np.concatenate([xi, -xi])
    ctx = ad.DiffContext(net, _net_input(conditioning, x + sig[:, None] * xi, sig))
    resid = ctx.out + xi
    m = x.shape[0]
    value = 0.5 * float(np.sum(resid * resid)) / m
    return ad.ScalarNode(value, net, [(ctx, resid / m, None)])


def dsm_loss_all_levels(net: ad.MlpParams, schedule: NoiseSchedule, batch, rng: np.random.Generator,
                        conditioning: str = "log-sigma") -> ad.ScalarNode:
    """Same objective with every level evaluated for every point, (1/2L) sum_i mean_b."""
    x = np.asarray(batch, dtype=np.float64)
    b, L = x.shape[0], schedule.L
    value = 0.0
    seeds = []
    for sigma in schedule.sigmas:
        xi = rng.standard_normal(x.shape)
        sig = np.full(b, sigma)
        ctx = ad.DiffContext(net, _net_input(conditioning, x + sigma * xi, sig))
        resid = ctx.out + xi
        value += 0.5 * float(np.sum(resid * resid)) / (b * L)
        seeds.append((ctx, resid / (b * L), None))
    return ad.ScalarNode(value, net, seeds)


# --------------------------------------------------------------------------
# training


@dataclass
class ScoreTrainConfig:
    epochs: int = 200
    batch_size: int = 256
    lr: float = 1e-3
    sigma_min: float = 0.01
    seed: int = 0
    hidden: tuple[int, ...] = (64,) * 5
    init_scale: float = 1.0
    conditioning: str = "log-sigma"
    standardize: bool = False
    gamma: float | None = None
    gamma_fallback: float = 1.5
    ema_decay: float = 0.999
    antithetic: bool = True

    def __post_init__(self):
        for name in ("epochs", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not (self.lr > 0 and self.sigma_min > 0):
            raise ConfigError("lr and sigma_min must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must be in [0, 1)")
        if self.conditioning not in CONDITIONING:
            raise ConfigError(f"conditioning must be one of {CONDITIONING}")


@dataclass
class ScoreTrainResult:
    model: ScoreModel
    losses: list[float] = field(default_factory=list)


def train_score(points, config: ScoreTrainConfig,
                on_epoch: Callable[[int, float], None] | None = None) -> ScoreTrainResult:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise DataError("need at least two points to train a score model")
    d = x.shape[1]
    standardization = None
    z = x
    if config.standardize:
        std = x.std(axis=0)
        std[std == 0] = 1.0
        standardization = Standardization(x.mean(axis=0), std)
        z = (x - standardization.mean) / standardization.std
    schedule = build_schedule(z, config.sigma_min, config.gamma, config.gamma_fallback)
    log.info("noise schedule: sigma_1=%.6g gamma=%.6g (%s) L=%d sigma_L=%.6g",
             schedule.sigma_1, schedule.gamma, schedule.gamma_source, schedule.L, schedule.sigma_L)

    extra = 1 if config.conditioning == "log-sigma" else 0
    widths = (d + extra, *config.hidden, d)
    net = ad.init_params(widths, config.init_scale, stream(config.seed, 10, 0))
    shuffle_rng = stream(config.seed, 10, 1)
    noise_rng = stream(config.seed, 10, 2)
    opt = ad.adam_init(net, lr=config.lr)
    avg = net if config.ema_decay > 0 else None

    n = z.shape[0]
    losses = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, config.batch_size):
            batch = z[order[start:start + config.batch_size]]
            node = dsm_loss(net, schedule, batch, noise_rng, config.conditioning, config.antithetic)
            if not np.isfinite(node.value):
                raise TrainingError(f"non-finite score loss in epoch {epoch + 1}")
            net, opt = ad.adam_step(opt, net, ad.grad_params(node))
            if avg is not None:
                avg = ad.ema_update(avg, net, config.ema_decay)
            total += node.value * batch.shape[0]
            count += batch.shape[0]
        losses.append(total / count)
        if on_epoch is not None:
            on_epoch(epoch + 1, losses[-1])
    final = avg if avg is not None else net
    model = ScoreModel(final, schedule, config.conditioning, standardization,
                       (x.min(axis=0), x.max(axis=0)))
    return ScoreTrainResult(model, losses)


# --------------------------------------------------------------------------
# sampling


def annealed_langevin_sample(model: ScoreModel | Callable, n_samples: int, steps_per_level: int = 100,
                             base_step: float | None = None, rng: np.random.Generator | None = None,
                             sigmas=None, bounds=None) -> np.ndarray:
    """Annealed Langevin dynamics from a uniform start in the data box.

    ``model`` is a ScoreModel or any ``score(x, sigma)`` callable (then
    ``sigmas`` and ``bounds`` are required). Level i uses step
    ``alpha_i = base_step * sigma_i**2 / sigma_L**2`` for ``steps_per_level``
    updates ``x += alpha_i/2 * s(x, sigma_i) + sqrt(alpha_i) * z``.
    ``base_step`` defaults to ``2e-5 * scale**2``, scale being the mean
    coordinate width of the box divided by sqrt(12).
    """
    std = None
    if isinstance(model, ScoreModel):
        score_fn = model.score
        sigmas = model.schedule.sigmas if sigmas is None else sigmas
        bounds = model.bounds if bounds is None else bounds
        std = model.standardization
        if std is not None and bounds is not None:
            # sample in the standardized coordinates the schedule refers to
            score_fn = lambda z, sigma: model.score(z * std.std + std.mean, sigma) * std.std  # noqa: E731
            bounds = tuple((np.asarray(b) - std.mean) / std.std for b in bounds)
    else:
        score_fn = model
    if sigmas is None or bounds is None:
        raise ConfigError("a bare score function needs explicit sigmas and bounds")
    sigmas = np.atleast_1d(np.asarray(sigmas, dtype=np.float64))
    lo, hi = (np.atleast_1d(np.asarray(b, dtype=np.float64)) for b in bounds)
    rng = np.random.default_rng() if rng is None else rng
    if base_step is None:
        data_scale = float(np.mean((hi - lo) / math.sqrt(12.0)))
        base_step = 2e-5 * data_scale ** 2
    x = lo + (hi - lo) * rng.random((int(n_samples), lo.size))
    sigma_last = sigmas[-1]
    for sigma in sigmas:
        alpha = base_step * (sigma / sigma_last) ** 2
        for _ in range(int(steps_per_level)):
            x = x + 0.5 * alpha * score_fn(x, sigma) + math.sqrt(alpha) * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)) or np.abs(x).max() > 1e6:
            raise SamplingError(f"Langevin samples diverged at noise level {sigma:g}")
    if std is not None:
        x = x * std.std + std.mean
    return x

