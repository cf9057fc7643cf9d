"""Histograms, density and velocity metrics, and a 1D minimum-norm oracle."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from .dynamics import SimConfig, SystemSpec, drift, initial_states, simulate_ensemble
from .errors import DataError, NumericError, ShapeError, UsageError
from .rng import stream
from .velocity import full_residual_norm

log = logging.getLogger(__name__)

HIST_MODES = ("rect", "hex")
_SQRT3 = math.sqrt(3.0)


@dataclass(frozen=True)
class Histogram2D:
    """Normalised 2D histogram of a projection.

    ``resolution`` is ``(nx, ny)`` for rect bins and the hexagon radius
    (centre to corner) for hex bins. ``masses[b]`` belongs to ``centers[b]``.
    """

    mode: str
    dims: tuple[int, int]
    bounds: np.ndarray
    resolution: tuple | float
    masses: np.ndarray
    centers: np.ndarray
    n_in: int
    n_out: int

    @property
    def out_of_bounds_fraction(self) -> float:
        total = self.n_in + self.n_out
        return self.n_out / total if total else 0.0

    def compatible(self, other: "Histogram2D") -> bool:
        return (self.mode == other.mode and self.dims == other.dims
                and np.array_equal(self.bounds, other.bounds)
                and self.resolution == other.resolution
                and self.masses.shape == other.masses.shape)


def padded_bounds(points, dims=(0, 1), pad: float = 0.05) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)[:, list(dims)]
    x = x[np.all(np.isfinite(x), axis=1)]
    if x.shape[0] == 0:
        raise DataError("no finite points to derive histogram bounds from")
    lo, hi = x.min(axis=0), x.max(axis=0)
    width = np.where(hi > lo, hi - lo, 1.0)
    return np.stack([lo - pad * width, hi + pad * width], axis=1)


def _hex_lattice(bounds: np.ndarray, radius: float) -> np.ndarray:
    """Axial coordinates (q, r) of pointy-top hexes whose cells can meet the box."""
    (x0, x1), (y0, y1) = bounds
    r_max = int(math.ceil((y1 - y0) / (1.5 * radius))) + 1
    cells = []
    for r in range(-1, r_max + 1):
        # centre x = sqrt3 * R * (q + r/2) relative to the lower-left corner
        q_lo = int(math.floor(-1 - r / 2.0))
        q_hi = int(math.ceil((x1 - x0) / (_SQRT3 * radius) - r / 2.0 + 1))
        for q in range(q_lo, q_hi + 1):
            cells.append((q, r))
    return np.array(cells, dtype=np.int64)


def _hex_centers(bounds: np.ndarray, radius: float, axial: np.ndarray) -> np.ndarray:
    q, r = axial[:, 0].astype(np.float64), axial[:, 1].astype(np.float64)
    cx = bounds[0, 0] + _SQRT3 * radius * (q + r / 2.0)
    cy = bounds[1, 0] + 1.5 * radius * r
    return np.column_stack([cx, cy])


def _hex_assign(xy: np.ndarray, bounds: np.ndarray, radius: float, axial: np.ndarray,
                centers: np.ndarray) -> np.ndarray:
    """Index of the nearest hex centre; ties go to the lowest bin index."""
    rel_x = xy[:, 0] - bounds[0, 0]
    rel_y = xy[:, 1] - bounds[1, 0]
    qf = (_SQRT3 / 3.0 * rel_x - rel_y / 3.0) / radius
    rf = (2.0 / 3.0 * rel_y) / radius
    base_q, base_r = np.floor(qf).astype(np.int64), np.floor(rf).astype(np.int64)
    lookup = {tuple(c): i for i, c in enumerate(axial.tolist())}
    best = np.full(xy.shape[0], -1, dtype=np.int64)
    best_d = np.full(xy.shape[0], np.inf)
    # the nearest centre is always among the four corners of the axial cell
    for dq, dr in ((0, 0), (1, 0), (0, 1), (1, 1)):
        cand = np.array([lookup.get((q, r), -1) for q, r in zip(base_q + dq, base_r + dr)], dtype=np.int64)
        ok = cand >= 0
        dist = np.full(xy.shape[0], np.inf)
        dist[ok] = np.sum((xy[ok] - centers[cand[ok]]) ** 2, axis=1)
        better = (dist < best_d) | ((dist == best_d) & ok & ((best < 0) | (cand < best)))
        best = np.where(better, cand, best)
        best_d = np.where(better, dist, best_d)
    if np.any(best < 0):
        raise NumericError("hex lattice does not cover the histogram bounds")
    return best


def histogram2d(points, dims=(0, 1), mode: str = "rect", resolution=(64, 64), bounds=None) -> Histogram2D:
    """Occupation histogram of the ``dims`` projection.

    Samples outside ``bounds`` (default: padded data range) are counted in
    ``n_out`` and excluded from the normalisation. Non-finite rows count as
    out of bounds.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("points must be an (N, d) array")
    dims = (int(dims[0]), int(dims[1]))
    if not all(0 <= k < x.shape[1] for k in dims):
        raise ShapeError(f"projection {dims} is invalid for d={x.shape[1]}")
    if mode not in HIST_MODES:
        raise UsageError(f"histogram mode must be one of {HIST_MODES}")
    b = padded_bounds(x, dims) if bounds is None else np.asarray(bounds, dtype=np.float64).reshape(2, 2)
    if not np.all(np.isfinite(b)) or np.any(b[:, 1] <= b[:, 0]):
        raise UsageError("histogram bounds must be finite with lo < hi")
    xy = x[:, list(dims)]
    inside = np.all(np.isfinite(xy), axis=1)
    inside &= (xy[:, 0] >= b[0, 0]) & (xy[:, 0] <= b[0, 1]) & (xy[:, 1] >= b[1, 0]) & (xy[:, 1] <= b[1, 1])
    xy = xy[inside]
    n_in = int(xy.shape[0])
    if n_in == 0:
        raise DataError("no samples inside the histogram bounds")

    if mode == "rect":
        nx, ny = (int(resolution[0]), int(resolution[1]))
        if nx < 1 or ny < 1:
            raise UsageError("rect resolution must be positive")
        ix = np.minimum(((xy[:, 0] - b[0, 0]) / (b[0, 1] - b[0, 0]) * nx).astype(np.int64), nx - 1)
        iy = np.minimum(((xy[:, 1] - b[1, 0]) / (b[1, 1] - b[1, 0]) * ny).astype(np.int64), ny - 1)
        counts = np.bincount(ix * ny + iy, minlength=nx * ny).astype(np.float64)
        cx = b[0, 0] + (np.arange(nx) + 0.5) * (b[0, 1] - b[0, 0]) / nx
        cy = b[1, 0] + (np.arange(ny) + 0.5) * (b[1, 1] - b[1, 0]) / ny
        centers = np.column_stack([np.repeat(cx, ny), np.tile(cy, nx)])
        res = (nx, ny)
    else:
        radius = float(resolution)
        if not radius > 0:
            raise UsageError("hex radius must be positive")
        axial = _hex_lattice(b, radius)
        centers = _hex_centers(b, radius, axial)
        idx = _hex_assign(xy, b, radius, axial, centers)
        counts = np.bincount(idx, minlength=centers.shape[0]).astype(np.float64)
        res = radius
    return Histogram2D(mode, dims, b, res, counts / n_in, centers, n_in, int(x.shape[0]) - n_in)


def tv_distance(h1: Histogram2D, h2: Histogram2D) -> float:
    """Total variation distance 0.5 * sum |p - q| between matched histograms."""
    if not h1.compatible(h2):
        raise UsageError("histograms differ in mode, projection, bounds or resolution")
    return float(min(1.0, 0.5 * np.abs(h1.masses - h2.masses).sum()))


def velocity_error(vel: Callable, truth: SystemSpec, eval_points) -> float:
    """sqrt(sum |v_hat - v|^2 / sum |v|^2) over measure-distributed points."""
    x = eval_points.points if hasattr(eval_points, "points") else np.asarray(eval_points, dtype=np.float64)
    x = np.atleast_2d(x)
    v = drift(truth, x)
    denom = float(np.sum(v * v))
    if denom == 0.0:
        raise DataError("true drift vanishes on all evaluation points")
    diff = np.asarray(vel(x)) - v
    return math.sqrt(float(np.sum(diff * diff)) / denom)


# --------------------------------------------------------------------------
# 1D minimum-norm oracle


def min_norm_oracle_1d(s, ds, D: float, grid, tol: float = 1e-8) -> np.ndarray:
    """Discrete minimum-norm drift on a uniform 1D grid.

    Minimises sum v_j^2 subject to ``s_j v_j + (v_{j+1} - v_{j-1}) / 2h =
    D (s_j^2 + s'_j)`` at interior nodes and the no-flux rows ``v = D s`` at
    both ends, using a pivoted-QR least-squares solve (minimum norm when the
    rows are rank deficient).
    """
    s = np.asarray(s, dtype=np.float64).ravel()
    ds = np.asarray(ds, dtype=np.float64).ravel()
    grid = np.asarray(grid, dtype=np.float64).ravel()
    m = grid.size
    if m < 50:
        raise UsageError("the oracle needs at least 50 grid points")
    if s.shape != (m,) or ds.shape != (m,):
        raise ShapeError("s, s' and grid must have the same length")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(ds))):
        raise DataError("score values must be finite")
    h = (grid[-1] - grid[0]) / (m - 1)
    if not h > 0 or not np.allclose(np.diff(grid), h, rtol=1e-9, atol=0.0):
        raise UsageError("grid must be uniform and increasing")

    a = np.zeros((m, m))
    rhs = np.empty(m)
    j = np.arange(1, m - 1)
    a[j, j] = s[j]
    a[j, j + 1] = 1.0 / (2.0 * h)
    a[j, j - 1] = -1.0 / (2.0 * h)
    rhs[j] = D * (s[j] ** 2 + ds[j])
    a[0, 0] = a[m - 1, m - 1] = 1.0
    rhs[0], rhs[m - 1] = D * s[0], D * s[m - 1]

    v, _, rank, _ = scipy.linalg.lstsq(a, rhs, lapack_driver="gelsy")
    res = float(np.max(np.abs(a @ v - rhs)))
    if res > tol * max(1.0, float(np.max(np.abs(rhs)))):
        raise NumericError(f"oracle constraints are inconsistent: rank {rank} of {m}, "
                           f"max constraint residual {res:.3e}")
    return v


# --------------------------------------------------------------------------
# pipeline evaluation


@dataclass
class EvalConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    projections: list = field(default_factory=lambda: [(0, 1)])
    mode: str = "rect"
    resolution: tuple | float = (64, 64)
    velocity_points: int = 20_000
    seed: int = 0


@dataclass
class EvalReport:
    tv: dict
    velocity_error: float
    residual_rms: float
    out_of_bounds_fraction: float
    divergence_fraction: float
    metadata: dict = field(default_factory=dict)

    @property
    def tv_max(self) -> float:
        return max(self.tv.values())

    def to_dict(self) -> dict:
        return {"tv_distance": dict(self.tv), "tv_max": self.tv_max, "velocity_error": self.velocity_error,
                "residual_rms": self.residual_rms, "out_of_bounds_fraction": self.out_of_bounds_fraction,
                "divergence_fraction": self.divergence_fraction, "metadata": self.metadata}


def _proj_key(dims) -> str:
    return f"x{dims[0]}-x{dims[1]}"


def simulate_samples(system: SystemSpec, sim: SimConfig, seed: int, drift_fn: Callable | None = None
                     ) -> tuple[np.ndarray, float]:
    """Pooled post-burn-in samples and the fraction of diverged trajectories.

    Uses evaluation streams so that reference and learned runs with the same
    ``seed`` see the same noise; only the drift differs.
    """
    x0s = initial_states(system, sim)
    rngs = [stream(seed, 40, r) for r in range(sim.n_trajectories)]
    states, alive = simulate_ensemble(system, x0s, sim.dt, sim.n_steps, sim.burn_in_steps, sim.stride,
                                      rngs, drift_fn, on_blowup="drop")
    pts = np.swapaxes(states, 0, 1).reshape(-1, system.dim)
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    return pts, 1.0 - float(alive.mean())


def histograms(points, config: EvalConfig, bounds: dict | None = None) -> dict:
    out = {}
    for dims in config.projections:
        key = _proj_key(dims)
        out[key] = histogram2d(points, dims, config.mode, config.resolution,
                               None if bounds is None else bounds[key])
    return out


def self_distance(truth: SystemSpec, config: EvalConfig, seed_a: int, seed_b: int) -> dict:
    """TV between two true-drift simulations that differ only in their seed."""
    a, _ = simulate_samples(truth, config.sim, seed_a)
    b, _ = simulate_samples(truth, config.sim, seed_b)
    ha = histograms(a, config)
    hb = histograms(b, config, {k: h.bounds for k, h in ha.items()})
    return {k: tv_distance(ha[k], hb[k]) for k in ha}


def evaluate_pipeline(vel: Callable, score, truth: SystemSpec, config: EvalConfig,
                      reference: np.ndarray | None = None) -> EvalReport:
    """Compare learned and true dynamics through their long-run histograms.

    Both are simulated with ``config.sim`` and the same seed, so only the
    drift differs. See :func:`evaluate_samples` for the metrics.
    """
    if reference is None:
        reference, _ = simulate_samples(truth, config.sim, config.seed)
    learned, diverged = simulate_samples(truth, config.sim, config.seed, drift_fn=vel)
    return evaluate_samples(vel, score, truth, config, reference, learned, diverged)


def evaluate_samples(vel: Callable, score, truth: SystemSpec, config: EvalConfig, reference: np.ndarray,
                     learned: np.ndarray, diverged: float) -> EvalReport:
    """Metrics from already simulated reference and learned samples.

    Histogram bounds come from the reference samples. Divergent learned
    trajectories have been dropped and are reported through ``diverged``.
    """
    ref_h = histograms(reference, config)
    bounds = {k: h.bounds for k, h in ref_h.items()}
    tv = {}
    oob = 0.0
    if learned.shape[0]:
        try:
            learned_h = histograms(learned, config, bounds)
        except DataError:
            learned_h = None
        if learned_h is not None:
            tv = {k: tv_distance(ref_h[k], learned_h[k]) for k in ref_h}
            oob = max(h.out_of_bounds_fraction for h in learned_h.values())
    if not tv:
        tv = {k: 1.0 for k in ref_h}
        oob = 1.0

    rng = stream(config.seed, 41)
    n = min(config.velocity_points, reference.shape[0])
    held_out = reference[np.sort(rng.choice(reference.shape[0], n, replace=False))]
    v_err = velocity_error(vel, truth, held_out)
    res_rms = float("nan")
    if score is not None and hasattr(vel, "with_divergence"):
        res_rms = full_residual_norm(score, vel, held_out)
    meta = {"seed": config.seed, "system": truth.to_dict(), "sim": config.sim.to_dict(),
            "projections": [list(p) for p in config.projections], "mode": config.mode,
            "resolution": list(config.resolution) if isinstance(config.resolution, tuple) else config.resolution,
            "n_reference": int(reference.shape[0]), "n_learned": int(learned.shape[0])}
    return EvalReport(tv, v_err, res_rms, oob, diverged, meta)
