"""Band PDE solver: extension, FD Laplacian, explicit stepping and surface readout.

The loop alternates an extension ``V = E(U)`` with a forward-Euler step
``U <- V + dt (L V - f)`` on interior band nodes. ``E`` is any linear
extension; the learned one is assembled once from the per-patch attention
weights, the classical one lives in ``baselines``.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .band import (BandError, BoundarySpec, BoundaryTags, NarrowBand, band_for_surface,
                   boundary_tag, coverage_max_epsilon, cut_band, default_epsilon)
from .geometry import (AnalyticSphere, OrientedPointCloud, Surface, SurfaceSamples,
                       TriangleMesh, pointcloud_features, sample_surface, surface_features)
from .operator import OperatorParams, attention_weights, forward
from .patches import PatchSet, build_patches
from .training import probe_affine

log = logging.getLogger(__name__)

SurfaceFunction = Callable[[np.ndarray], np.ndarray]


class SolverError(RuntimeError):
    pass


class CoverageError(SolverError):
    pass


@dataclass
class SolveConfig:
    dx: float = 0.03
    eps_factor: float = 3.0
    k: int = 400
    dt: Optional[float] = None
    t_final: float = 0.25
    steady: bool = False
    steady_tol: float = 1e-5
    temperature: float = 0.5
    t_read: Optional[float] = None
    cadence: Optional[int] = None   # None: per-problem default, see cadence_for
    heat_cadence: int = 8
    poisson_cadence: int = 32
    poisson_tol: float = 1e-6
    max_iter: int = 200_000
    boundary: Optional[BoundarySpec] = None
    patch_spacing_factor: float = 0.5
    samples_per_cell: float = 4.0
    max_features: int = 256
    weight_threshold: float = 1e-7
    check_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if not self.dx > 0:
            raise ValueError("dx must be positive")
        if self.dt is not None and self.dt > self.dx ** 2 / 6.0 * (1 + 1e-12):
            raise ValueError(f"dt={self.dt} exceeds the explicit stability bound dx^2/6="
                             f"{self.dx ** 2 / 6.0}")
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.temperature > 0:
            raise ValueError("blend temperature T must be positive")
        for c in (self.cadence, self.heat_cadence, self.poisson_cadence):
            if c is not None and c < 1:
                raise ValueError("cadence must be at least 1")

    @property
    def epsilon(self) -> float:
        return default_epsilon(self.dx, self.k, self.eps_factor)

    @property
    def time_step(self) -> float:
        return self.dx ** 2 / 6.0 if self.dt is None else self.dt

    def cadence_for(self, problem: str) -> int:
        """Steps between re-extensions. Poisson relaxes to a stationary field, so
        stale extensions cost nothing there; heat needs them fresh."""
        if self.cadence is not None:
            return self.cadence
        return self.poisson_cadence if problem == "poisson" else self.heat_cadence

    @property
    def readout_width(self) -> float:
        return self.epsilon if self.t_read is None else self.t_read


@dataclass
class Discretization:
    """Everything about a surface that does not depend on the extension operator."""

    surface: Surface
    samples: SurfaceSamples
    band: NarrowBand
    laplacian: sp.csr_matrix
    tags: BoundaryTags
    readout_points: np.ndarray
    readout: SurfaceReadout
    epsilon: float
    build_time: float = 0.0


@dataclass
class ExtensionOperator:
    matrix: sp.csr_matrix
    kind: str
    patches: Optional[PatchSet] = None
    build_time: float = 0.0

    def __call__(self, U: np.ndarray) -> np.ndarray:
        return self.matrix @ U


@dataclass
class SolveReport:
    iterations: int
    wall_time: float
    residual_history: List[float]
    field: np.ndarray
    readout: np.ndarray
    converged: bool = True
    t: float = 0.0
    snapshots: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = dict(iterations=self.iterations, wall_time=self.wall_time, converged=self.converged,
                   t=self.t, final_residual=self.residual_history[-1] if self.residual_history
                   else None, n_band=len(self.field), n_readout=len(self.readout))
        out.update(self.info)
        return out


# ---------------------------------------------------------------------------
# discretization


def surface_area(surface: Surface) -> float:
    if isinstance(surface, TriangleMesh):
        return float(surface.face_areas().sum())
    if isinstance(surface, AnalyticSphere):
        return 4.0 * math.pi * surface.radius ** 2
    lo, hi = surface.bbox()
    e = hi - lo
    return float(2 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2]))


def default_samples(surface: Surface, dx: float, per_cell: float = 4.0,
                    seed: int = 0) -> SurfaceSamples:
    if isinstance(surface, OrientedPointCloud):
        return pointcloud_features(surface).samples
    n = int(math.ceil(per_cell * surface_area(surface) / dx ** 2))
    return surface_features(surface, sample_surface(surface, n, seed))


def default_readout_points(surface: Surface, samples: SurfaceSamples) -> np.ndarray:
    if isinstance(surface, TriangleMesh):
        return surface.vertices
    if isinstance(surface, OrientedPointCloud):
        return surface.points
    return samples.positions


def laplacian_matrix(band: NarrowBand) -> sp.csr_matrix:
    """7-point Laplacian rows on interior nodes, zero rows elsewhere."""
    n = len(band)
    h2 = band.spacing ** 2
    I = np.nonzero(band.interior)[0]
    rows = np.concatenate([np.repeat(I, 6), I])
    cols = np.concatenate([band.neighbors[I].ravel(), I])
    vals = np.concatenate([np.full(6 * len(I), 1.0 / h2), np.full(len(I), -6.0 / h2)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def laplacian_fd(band: NarrowBand, values: np.ndarray):
    """FD Laplacian on interior nodes; returns (values, flag of non-interior nodes)."""
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValueError("field must be finite")
    out = np.zeros(len(band))
    I = band.interior
    nb = band.neighbors[I]
    out[I] = (values[nb].sum(axis=1) - 6.0 * values[I]) / band.spacing ** 2
    return out, ~I


def readout_matrix(band: NarrowBand, points: np.ndarray, t_read: float,
                   radius: float, tree: Optional[cKDTree] = None) -> sp.csr_matrix:
    """Normalized Gaussian weights from band nodes within ``radius`` of each point."""
    tree = cKDTree(band.positions) if tree is None else tree
    nbrs = tree.query_ball_point(points, radius)
    lens = np.array([len(v) for v in nbrs])
    if np.any(lens == 0):
        bad = np.nonzero(lens == 0)[0]
        raise SolverError(f"{bad.size} surface points have no band node within {radius:.4g}; "
                          f"first: {points[bad[0]]}")
    rows = np.repeat(np.arange(len(points)), lens)
    cols = np.concatenate([np.asarray(v, dtype=np.int64) for v in nbrs])
    d2 = np.sum((band.positions[cols] - points[rows]) ** 2, axis=1)
    w = np.exp(-d2 / t_read ** 2)
    R = sp.csr_matrix((w, (rows, cols)), shape=(len(points), len(band)))
    norm = np.asarray(R.sum(axis=1)).ravel()
    return sp.diags(1.0 / norm) @ R


class SurfaceReadout:
    """Readout at fixed surface points, ``R @ V``.

    Every band node within 2 eps enters a row, several hundred per point, so
    for large point sets the rows are rebuilt chunk by chunk on each product
    instead of being stored.
    """

    def __init__(self, band: NarrowBand, points: np.ndarray, t_read: float, radius: float,
                 chunk: int = 2048, max_stored: int = 20_000_000):
        self.band, self.points = band, np.atleast_2d(points)
        self.t_read, self.radius, self.chunk = t_read, radius, chunk
        self._tree = cKDTree(band.positions)
        parts, nnz = [], 0
        for s in range(0, len(self.points), chunk):
            R = self._rows(s)
            nnz += R.nnz
            if nnz > max_stored:
                parts = None
                break
            parts.append(R)
        self._R = sp.vstack(parts).tocsr() if parts else None
        if self._R is None:
            d, _ = self._tree.query(self.points, distance_upper_bound=radius)
            if not np.all(np.isfinite(d)):
                raise SolverError(f"{int(np.sum(~np.isfinite(d)))} surface points have no "
                                  f"band node within {radius:.4g}")

    def _rows(self, start: int) -> sp.csr_matrix:
        return readout_matrix(self.band, self.points[start:start + self.chunk], self.t_read,
                              self.radius, self._tree)

    @property
    def shape(self):
        return (len(self.points), len(self.band))

    def __matmul__(self, V: np.ndarray) -> np.ndarray:
        if self._R is not None:
            return self._R @ V
        return np.concatenate([self._rows(s) @ V for s in range(0, len(self.points), self.chunk)])


def readout_surface(band: NarrowBand, values: np.ndarray, points: np.ndarray,
                    t_read: float, radius: Optional[float] = None) -> np.ndarray:
    radius = 2.0 * band.epsilon if radius is None else radius
    return SurfaceReadout(band, points, t_read, radius) @ values


def prepare(surface: Surface, config: SolveConfig, samples: Optional[SurfaceSamples] = None,
            readout_points: Optional[np.ndarray] = None, pad: float = 0.0) -> Discretization:
    """Band, Laplacian, boundary tags and readout weights for a surface.

    ``pad`` widens the band beyond epsilon (used by interpolation-based
    extensions that need full stencils around every closest point).
    """
    t0 = time.time()
    if samples is None:
        samples = default_samples(surface, config.dx, config.samples_per_cell, config.seed)
    eps = config.epsilon
    band = band_for_surface(surface, samples, config.dx, eps + pad,
                            margin=eps + pad + 3 * config.dx)
    tags = boundary_tag(band, None)
    if readout_points is None:
        readout_points = default_readout_points(surface, samples)
    if config.boundary is not None:
        spec = config.boundary
        base = 2.0 * config.dx if spec.tol is None else spec.tol
        # padded stencils reach further past the cut; clamp that zone too
        spec = dataclasses.replace(spec, tol=base + pad)
        band = cut_band(band, spec)
        tags = boundary_tag(band, spec, surface)
        # samples in the clamped strip stay so patches can reach its nodes
        keep = spec.cut.signed(samples.positions) >= -spec.tol
        samples = samples.subset(np.nonzero(keep)[0])
        readout_points = readout_points[spec.cut.signed(readout_points) >= 0]
    R = SurfaceReadout(band, readout_points, config.readout_width, 2.0 * eps)
    return Discretization(surface, samples, band, laplacian_matrix(band), tags,
                          np.asarray(readout_points), R, eps, time.time() - t0)


# ---------------------------------------------------------------------------
# learned extension


def blend_weights(x: np.ndarray, center: np.ndarray, length: float, T: float) -> np.ndarray:
    """Patch blending weights exp(-(|x - p|/length)^2 / T)."""
    return np.exp(-np.sum((x - center) ** 2, axis=1) / (length ** 2 * T))


def _check_cover(patches: PatchSet, n: int):
    cnt = patches.coverage_count(n)
    if np.any(cnt == 0):
        raise CoverageError(f"{int(np.sum(cnt == 0))} band nodes are covered by no patch")


def extend(params: OperatorParams, patches: PatchSet, band: NarrowBand, U: np.ndarray,
           temperature: float = 0.5) -> np.ndarray:
    """Direct evaluation: per-patch normalized prediction, blended across patches."""
    U = np.asarray(U, dtype=float)
    _check_cover(patches, len(band))
    length = coverage_max_epsilon(band.spacing, patches.k)
    num = np.zeros(len(band))
    den = np.zeros(len(band))
    for p in patches:
        u = U[p.band_idx]
        sc, off = probe_affine(u[:, None])
        sc, off = float(sc[0]), float(off[0])
        if sc == 0.0:
            pred = u.copy()
        else:
            pred = forward(params, p, (u + off) * sc) / sc - off
        w = blend_weights(band.positions[p.band_idx], p.frame.center, length, temperature)
        np.add.at(num, p.band_idx, w * pred)
        np.add.at(den, p.band_idx, w)
    return num / den


def extension_matrix(params: OperatorParams, patches: PatchSet, band: NarrowBand,
                     temperature: float = 0.5, threshold: float = 1e-7) -> sp.csr_matrix:
    """Sparse matrix of the blended learned extension.

    Attention weights below ``threshold`` are dropped and each row
    renormalized, which keeps rows convex. The per-patch affine probe map
    commutes with a convex combination, so the matrix reproduces ``extend``.
    """
    _check_cover(patches, len(band))
    length = coverage_max_epsilon(band.spacing, patches.k)
    n = len(band)
    rows, cols, vals = [], [], []
    den = np.zeros(n)
    for p in patches:
        W = attention_weights(params, p)
        if threshold > 0:
            W = np.where(W >= threshold, W, 0.0)
            W /= W.sum(axis=1, keepdims=True)
        b = blend_weights(band.positions[p.band_idx], p.frame.center, length, temperature)
        r, c = np.nonzero(W)
        rows.append(p.band_idx[r])
        cols.append(p.band_idx[c])
        vals.append(W[r, c] * b[r])
        np.add.at(den, p.band_idx, b)
    M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n))
    M.sum_duplicates()
    return sp.diags(1.0 / den) @ M


def learned_extension(disc: Discretization, params: OperatorParams,
                      config: SolveConfig) -> ExtensionOperator:
    t0 = time.time()
    spacing = config.patch_spacing_factor * coverage_max_epsilon(config.dx, config.k)
    patches = build_patches(disc.band, disc.samples, config.k, spacing, config.seed,
                            max_features=config.max_features)
    E = extension_matrix(params, patches, disc.band, config.temperature,
                         config.weight_threshold)
    return ExtensionOperator(E.tocsr(), "learned", patches, time.time() - t0)


# ---------------------------------------------------------------------------
# time stepping


def heat_step(band: NarrowBand, V: np.ndarray, dt: float, laplacian=None,
              source: Optional[np.ndarray] = None, tags: Optional[BoundaryTags] = None) -> np.ndarray:
    """Forward Euler on interior nodes; other nodes copy V; tags re-clamped."""
    if dt > band.spacing ** 2 / 6.0 * (1 + 1e-12):
        raise ValueError(f"dt={dt} exceeds the stability bound {band.spacing ** 2 / 6.0}")
    LV = laplacian @ V if laplacian is not None else laplacian_fd(band, V)[0]
    inc = LV if source is None else LV - source * band.interior
    out = V + dt * inc
    if tags is not None and len(tags):
        out[tags.indices] = tags.values
    return out


def _clamp(V, tags):
    if len(tags):
        V = V.copy()
        V[tags.indices] = tags.values
    return V


def _evolve(disc: Discretization, ext: ExtensionOperator, U0: np.ndarray, dt: float,
            n_steps: int, config: SolveConfig, m: int, source: Optional[np.ndarray] = None,
            stop: Optional[Callable] = None, snapshot_every: int = 0):
    """Shared loop. Returns (extended field, steps taken, residuals, converged, snapshots)."""
    band, L, tags = disc.band, disc.laplacian, disc.tags
    U = _clamp(np.asarray(U0, dtype=float), tags)
    V_prev = None
    residuals: List[float] = []
    snapshots = {}
    converged = stop is None
    src = None if source is None else source * band.interior
    n = 0
    V = U
    for n in range(n_steps):
        V = _clamp(ext(U), tags) if n % m == 0 else U
        if not np.all(np.isfinite(V)):
            raise SolverError(f"non-finite field at step {n}")
        if stop is not None and n % (m * config.check_every) == 0:
            if V_prev is not None:
                r = stop(V, V_prev, m * config.check_every * dt)
                residuals.append(r)
                if r < config_tol(config, source):
                    converged = True
                    break
            V_prev = V
        if snapshot_every and n % snapshot_every == 0:
            snapshots[n * dt] = disc.readout @ V
        inc = L @ V
        if src is not None:
            inc -= src
        U = V + dt * inc
        if len(tags):
            U[tags.indices] = tags.values
    else:
        n = n_steps
        V = _clamp(ext(U), tags)
    return V, n, residuals, converged, snapshots


def config_tol(config: SolveConfig, source) -> float:
    return config.poisson_tol if source is not None else config.steady_tol


def _stationarity(V, V_prev, span):
    return float(np.max(np.abs(V - V_prev)) / span)


def _stationarity_mod_const(V, V_prev, span):
    d = V - V_prev
    return float(np.max(np.abs(d - d.mean())) / span)


def run_heat(disc: Discretization, ext: ExtensionOperator, u0: SurfaceFunction,
             config: SolveConfig, snapshot_every: int = 0) -> SolveReport:
    """Heat flow from U0 = u0(cp); to ``t_final`` or, with ``steady``, to stationarity."""
    t0 = time.time()
    U0 = np.asarray(u0(disc.band.cp), dtype=float)
    dt = config.time_step
    if config.steady:
        n_steps = config.max_iter
        stop = _stationarity
    else:
        n_steps = max(1, int(math.ceil(config.t_final / dt - 1e-9)))
        dt = config.t_final / n_steps
        stop = None
    m = config.cadence_for("heat")
    V, n, res, conv, snaps = _evolve(disc, ext, U0, dt, n_steps, config, m, stop=stop,
                                     snapshot_every=snapshot_every)
    if config.steady and not conv:
        log.warning("heat flow did not reach the steady tolerance in %d steps", n)
    return SolveReport(n, time.time() - t0, res, V, disc.readout @ V, conv, n * dt, snaps,
                       dict(extension=ext.kind, dt=dt, cadence=m,
                            n_band=len(disc.band), nnz_extension=ext.matrix.nnz))


def zero_mean(values: np.ndarray, weights: Optional[np.ndarray] = None) -> np.ndarray:
    if weights is None:
        return values - values.mean()
    return values - np.sum(weights * values) / np.sum(weights)


def run_poisson(disc: Discretization, ext: ExtensionOperator, f: SurfaceFunction,
                config: SolveConfig) -> SolveReport:
    """Pseudo-time relaxation U <- E(U) + dt (L E(U) - f) to a stationary extended field.

    The iteration leaves constants free, so stationarity is measured modulo
    a uniform drift. The returned readout is projected to zero mean.
    """
    t0 = time.time()
    f_band = np.asarray(f(disc.band.cp), dtype=float)
    f_band = f_band - float(np.mean(f(disc.samples.positions)))
    dt = config.time_step
    m = config.cadence_for("poisson")
    V, n, res, conv, _ = _evolve(disc, ext, np.zeros(len(disc.band)), dt, config.max_iter,
                                 config, m, source=f_band, stop=_stationarity_mod_const)
    if not conv:
        log.warning("Poisson relaxation stopped at %d iterations without convergence", n)
    band_res = float(np.max(np.abs((disc.laplacian @ V - f_band)[disc.band.interior])))
    out = zero_mean(disc.readout @ V)
    V = V - float(np.mean(disc.readout @ V))
    return SolveReport(n, time.time() - t0, res, V, out, conv, n * dt, {},
                       dict(extension=ext.kind, dt=dt, cadence=m,
                            band_residual=band_res, n_band=len(disc.band),
                            nnz_extension=ext.matrix.nnz))


def solve_heat(surface: Surface, params: OperatorParams, u0: SurfaceFunction,
               config: SolveConfig, **kw) -> SolveReport:
    disc = prepare(surface, config, **kw)
    ext = learned_extension(disc, params, config)
    rep = run_heat(disc, ext, u0, config)
    rep.info.update(setup_time=disc.build_time + ext.build_time)
    return rep


def solve_poisson(surface: Surface, params: OperatorParams, f: SurfaceFunction,
                  config: SolveConfig, **kw) -> SolveReport:
    if config.boundary is not None:
        raise SolverError("the Poisson solver handles closed surfaces only")
    disc = prepare(surface, config, **kw)
    ext = learned_extension(disc, params, config)
    rep = run_poisson(disc, ext, f, config)
    rep.info.update(setup_time=disc.build_time + ext.build_time)
    return rep
