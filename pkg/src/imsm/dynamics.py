"""Benchmark drifts, Euler-Maruyama integration and point-cloud generation.

All systems use constant isotropic diffusion: dX = v(X) dt + sqrt(2 D) dW.
``ou1d`` and ``uniform-box`` are test fixtures with known invariant measures,
not benchmark systems.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DataError, DivergenceError, ShapeError
from .rng import stream

SYSTEM_KINDS = ("vanderpol", "swimmer", "lorenz63", "lorenz96", "ou1d", "uniform-box")

DEFAULT_PARAMS = {
    "vanderpol": {"c": 0.5},
    "swimmer": {"gamma": 0.1},
    "lorenz63": {"c1": 10.0, "c2": 28.0, "c3": 8.0 / 3.0},
    "lorenz96": {"N": 5, "F": 8.0},
    "ou1d": {"theta": 1.0},
    "uniform-box": {"lo": 0.0, "hi": 1.0, "dim": 1},
}

DEFAULT_DT = {"vanderpol": 1e-3, "swimmer": 1e-3, "lorenz63": 1e-4, "lorenz96": 1e-3,
              "ou1d": 1e-2, "uniform-box": 1e-3}

BLOWUP_RADIUS = 1e6


@dataclass(frozen=True)
class SystemSpec:
    kind: str
    params: dict = field(default_factory=dict)
    D: float = 0.0

    def __post_init__(self):
        if self.kind not in SYSTEM_KINDS:
            raise ConfigError(f"unknown system kind {self.kind!r}; expected one of {SYSTEM_KINDS}")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.kind])
        if unknown:
            raise ConfigError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        merged = {**DEFAULT_PARAMS[self.kind], **self.params}
        object.__setattr__(self, "params", merged)
        if not (self.D >= 0 and math.isfinite(self.D)):
            raise ConfigError("diffusion coefficient D must be finite and >= 0")
        if self.kind == "lorenz96" and int(merged["N"]) < 4:
            raise ConfigError("lorenz96 needs N >= 4")
        if self.kind == "uniform-box" and not merged["hi"] > merged["lo"]:
            raise ConfigError("uniform-box needs hi > lo")

    @property
    def dim(self) -> int:
        if self.kind == "lorenz96":
            return int(self.params["N"])
        if self.kind == "uniform-box":
            return int(self.params["dim"])
        return {"vanderpol": 2, "swimmer": 2, "lorenz63": 3, "ou1d": 1}[self.kind]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "D": self.D}


def _check(system: SystemSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (system.dim,):
        raise ShapeError(f"{system.kind} state has dimension {system.dim}, got shape {x.shape}")
    return x


def drift(system: SystemSpec, x) -> np.ndarray:
    """Drift velocity v(x); ``x`` may carry leading batch axes."""
    x = _check(system, x)
    p = system.params
    k = system.kind
    if k == "vanderpol":
        u, w = x[..., 0], x[..., 1]
        return np.stack([w, p["c"] * (1.0 - u * u) * w - u], axis=-1)
    if k == "swimmer":
        u, nu = x[..., 0], x[..., 1]
        return np.stack([-u ** 3 + nu, -p["gamma"] * nu], axis=-1)
    if k == "lorenz63":
        u, w, z = x[..., 0], x[..., 1], x[..., 2]
        return np.stack([p["c1"] * (w - u), u * (p["c2"] - z) - w, u * w - p["c3"] * z], axis=-1)
    if k == "lorenz96":
        # x_{i+1}, x_{i-2}, x_{i-1} with cyclic indices
        return (np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(x, 1, axis=-1) - x + p["F"]
    if k == "ou1d":
        return -p["theta"] * x
    return np.zeros_like(x)


def drift_diagonal(system: SystemSpec, x) -> np.ndarray:
    """Diagonal of the drift Jacobian, dv_i/dx_i, same shape as ``x``."""
    x = _check(system, x)
    p = system.params
    k = system.kind
    if k == "vanderpol":
        return np.stack([np.zeros_like(x[..., 0]), p["c"] * (1.0 - x[..., 0] ** 2)], axis=-1)
    if k == "swimmer":
        return np.stack([-3.0 * x[..., 0] ** 2, np.full_like(x[..., 1], -p["gamma"])], axis=-1)
    if k == "lorenz63":
        return np.broadcast_to(np.array([-p["c1"], -1.0, -p["c3"]]), x.shape).copy()
    if k == "lorenz96":
        return -np.ones_like(x)
    if k == "ou1d":
        return np.full_like(x, -p["theta"])
    return np.zeros_like(x)


def _reflect(system: SystemSpec, x: np.ndarray) -> np.ndarray:
    if system.kind != "uniform-box":
        return x
    lo, hi = system.params["lo"], system.params["hi"]
    width = hi - lo
    y = np.mod(x - lo, 2.0 * width)
    return lo + np.where(y > width, 2.0 * width - y, y)


def euler_maruyama_step(x, system: SystemSpec, dt: float, rng: np.random.Generator,
                        drift_fn: Callable | None = None) -> np.ndarray:
    """X + v(X) dt + sqrt(2 D dt) xi, xi standard normal."""
    if not dt > 0:
        raise ConfigError("dt must be positive")
    x = _check(system, x)
    v = drift(system, x) if drift_fn is None else drift_fn(x)
    out = x + v * dt + math.sqrt(2.0 * system.D * dt) * rng.standard_normal(x.shape)
    return _reflect(system, out)


@dataclass
class SimConfig:
    dt: float = 1e-3
    n_steps: int = 10_000
    burn_in_steps: int = 1_000
    stride: int = 1
    n_trajectories: int = 1
    init: str = "fixed"
    x0: list | None = None
    init_box: tuple | None = None
    seed: int = 0
    target_n: int | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if self.burn_in_steps < 0 or self.n_steps < 0:
            raise ConfigError("n_steps and burn_in_steps must be >= 0")
        if self.n_trajectories < 1:
            raise ConfigError("n_trajectories must be >= 1")
        if self.init not in ("fixed", "random-box"):
            raise ConfigError("init must be 'fixed' or 'random-box'")
        if self.target_n is not None and self.target_n < 1:
            raise ConfigError("target_n must be >= 1")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass
class PointCloud:
    points: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise DataError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise DataError("point cloud contains non-finite entries")
        self.points = pts

    @property
    def N(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]


def default_x0(system: SystemSpec) -> np.ndarray:
    k = system.kind
    if k == "vanderpol":
        return np.array([1.0, 0.0])
    if k == "lorenz63":
        return np.array([1.0, 1.0, 1.0])
    if k == "lorenz96":
        x = np.full(system.dim, float(system.params["F"]))
        x[0] += 0.01
        return x
    if k == "uniform-box":
        return np.full(system.dim, 0.5 * (system.params["lo"] + system.params["hi"]))
    return np.zeros(system.dim)


def initial_states(system: SystemSpec, config: SimConfig) -> np.ndarray:
    r, d = config.n_trajectories, system.dim
    if config.init == "fixed":
        x0 = default_x0(system) if config.x0 is None else np.asarray(config.x0, dtype=np.float64)
        if x0.shape != (d,):
            raise ConfigError(f"x0 must have {d} entries")
        return np.tile(x0, (r, 1))
    if config.init_box is None:
        raise ConfigError("random-box initialisation needs init_box = [lo, hi]")
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=np.float64), (d,)) for b in config.init_box)
    rows = [lo + (hi - lo) * stream(config.seed, 2, i).random(d) for i in range(r)]
    return np.array(rows)


def simulate_ensemble(system: SystemSpec, x0s, dt: float, n_steps: int, burn_in_steps: int = 0,
                      stride: int = 1, rngs: list[np.random.Generator] | None = None,
                      drift_fn: Callable | None = None, on_blowup: str = "raise",
                      chunk: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Advance R trajectories together; each trajectory draws from its own stream.

    Returns ``(states, alive)``: ``states`` is ``(n_keep, R, d)`` holding every
    ``stride``-th post-burn-in state, ``alive`` flags trajectories that stayed
    finite and inside the blow-up radius. With ``on_blowup="raise"`` a
    DivergenceError names the step; with ``"drop"`` the offending trajectory is
    frozen and its later records are NaN.
    """
    x = np.array(x0s, dtype=np.float64, ndmin=2)
    r, d = x.shape
    if d != system.dim:
        raise ShapeError(f"initial states have dimension {d}, system has {system.dim}")
    if not np.all(np.isfinite(x)):
        raise DataError("initial state is not finite")
    if rngs is None:
        rngs = [stream(0, 0, i) for i in range(r)]
    if len(rngs) != r:
        raise ConfigError("need one random stream per trajectory")
    scale = math.sqrt(2.0 * system.D * dt)
    total = burn_in_steps + n_steps
    n_keep = n_steps // stride if n_steps else 0
    # record positions are the post-burn-in steps j with (j+1) % stride == 0
    out = np.full((n_keep, r, d), np.nan)
    alive = np.ones(r, dtype=bool)
    step = 0
    while step < total:
        m = min(chunk, total - step)
        noise = np.stack([g.standard_normal((m, d)) for g in rngs], axis=1)
        for i in range(m):
            v = drift(system, x) if drift_fn is None else drift_fn(x)
            new = _reflect(system, x + v * dt + scale * noise[i])
            bad = ~np.all(np.isfinite(new), axis=1) | (np.abs(new).max(axis=1) > BLOWUP_RADIUS)
            bad &= alive
            if bad.any():
                if on_blowup == "raise":
                    raise DivergenceError(f"trajectory {int(np.flatnonzero(bad)[0])} diverged at step {step + 1}",
                                          step=step + 1)
                alive &= ~bad
            x = np.where(alive[:, None], new, x)
            step += 1
            j = step - burn_in_steps
            if j > 0 and j % stride == 0:
                out[j // stride - 1] = np.where(alive[:, None], x, np.nan)
    return out, alive


def simulate(system: SystemSpec, x0, config: SimConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Single trajectory; every post-burn-in state as an ``(n_steps, d)`` array."""
    rng = stream(config.seed, 0, 0) if rng is None else rng
    states, _ = simulate_ensemble(system, np.asarray(x0, dtype=np.float64)[None, :], config.dt,
                                  config.n_steps, config.burn_in_steps, 1, [rng])
    return states[:, 0, :]


def generate_dataset(system: SystemSpec, config: SimConfig) -> PointCloud:
    """Strided post-burn-in states of all trajectories, trajectory-major order.

    With ``target_n`` the pooled states are subsampled without replacement
    (kept in their original order).
    """
    x0s = initial_states(system, config)
    rngs = [stream(config.seed, 0, i) for i in range(config.n_trajectories)]
    states, _ = simulate_ensemble(system, x0s, config.dt, config.n_steps, config.burn_in_steps,
                                  config.stride, rngs)
    points = np.swapaxes(states, 0, 1).reshape(-1, system.dim)
    if points.shape[0] == 0:
        raise DataError("simulation produced no post-burn-in samples")
    if config.target_n is not None and config.target_n < points.shape[0]:
        keep = np.sort(stream(config.seed, 1).choice(points.shape[0], config.target_n, replace=False))
        points = points[keep]
    meta = {"system": system.to_dict(), "sim": config.to_dict(), "rng": "philox/seedsequence"}
    return PointCloud(points, meta)
