"""Reference solvers: interpolating CPM, cotangent-Laplacian FEM and sphere harmonics."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import factorial, lpmv

from .band import NarrowBand
from .geometry import TriangleMesh
from .solver import (Discretization, ExtensionOperator, SolveConfig, SolveReport, SolverError,
                     prepare, run_heat, run_poisson)

log = logging.getLogger(__name__)

COT_CLAMP = 1e6


# ---------------------------------------------------------------------------
# closest point method with tricubic re-extension


def lagrange_weights(t: np.ndarray) -> np.ndarray:
    """Cubic Lagrange weights for nodes at -1, 0, 1, 2 evaluated at t in [0, 1)."""
    t = np.asarray(t, dtype=float)
    return np.stack([-t * (t - 1) * (t - 2) / 6.0,
                     (t + 1) * (t - 1) * (t - 2) / 2.0,
                     -(t + 1) * t * (t - 2) / 2.0,
                     (t + 1) * t * (t - 1) / 6.0], axis=-1)


@dataclass
class InterpStencil:
    base: np.ndarray       # (n, 3) grid index of the stencil's first node
    weights: tuple         # three (n, 4) per-axis weight arrays

    @classmethod
    def at(cls, band: NarrowBand, points: np.ndarray) -> "InterpStencil":
        g = (points - band.grid.origin) / band.spacing
        cell = np.floor(g).astype(np.int64)
        t = g - cell
        return cls(cell - 1, tuple(lagrange_weights(t[:, a]) for a in range(3)))


def tricubic_matrix(band: NarrowBand, points: Optional[np.ndarray] = None,
                    skip: Optional[np.ndarray] = None) -> sp.csr_matrix:
    """Interpolation of band values at ``points`` (default: every node's closest point).

    Rows listed in ``skip`` (clamped nodes) become identity rows.
    """
    pts = band.cp if points is None else np.atleast_2d(points)
    n = len(pts)
    ar = np.arange(n)
    rows, cols, vals = [], [], []
    if skip is not None and len(skip):
        if points is not None:
            raise ValueError("skip applies to the closest-point extension only")
        keep = np.ones(n, dtype=bool)
        keep[skip] = False
        ar = np.nonzero(keep)[0]
        pts = pts[ar]
        rows.append(np.asarray(skip))
        cols.append(np.asarray(skip))
        vals.append(np.ones(len(skip)))
    st = InterpStencil.at(band, pts)
    for i in range(4):
        for j in range(4):
            for k in range(4):
                idx = band.lookup(st.base + np.array([i, j, k]))
                if np.any(idx < 0):
                    bad = int(np.nonzero(idx < 0)[0][0])
                    raise SolverError(f"interpolation stencil of node {int(ar[bad])} (point "
                                      f"{pts[bad]}) leaves the band; widen the padding")
                rows.append(ar)
                cols.append(idx)
                vals.append(st.weights[0][:, i] * st.weights[1][:, j] * st.weights[2][:, k])
    M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, len(band)))
    M.sum_duplicates()
    return M


def cpm_reextend(band: NarrowBand, values: np.ndarray) -> np.ndarray:
    return tricubic_matrix(band) @ np.asarray(values, dtype=float)


def cpm_extension(disc: Discretization) -> ExtensionOperator:
    t0 = time.time()
    M = tricubic_matrix(disc.band, skip=disc.tags.indices)
    return ExtensionOperator(M, "cpm-tricubic", None, time.time() - t0)


CPM_PAD_LAYERS = 2


def cpm_config(config: SolveConfig) -> SolveConfig:
    """Classical CPM re-extends after every step unless a cadence is forced."""
    return config if config.cadence is not None else dataclasses.replace(config, cadence=1)


def cpm_prepare(surface, config: SolveConfig, **kw) -> Discretization:
    return prepare(surface, config, pad=CPM_PAD_LAYERS * config.dx, **kw)


def cpm_solve_heat(surface, u0, config: SolveConfig, **kw) -> SolveReport:
    disc = cpm_prepare(surface, config, **kw)
    rep = run_heat(disc, cpm_extension(disc), u0, cpm_config(config))
    rep.info.update(setup_time=disc.build_time)
    return rep


def cpm_solve_poisson(surface, f, config: SolveConfig, **kw) -> SolveReport:
    disc = cpm_prepare(surface, config, **kw)
    rep = run_poisson(disc, cpm_extension(disc), f, cpm_config(config))
    rep.info.update(setup_time=disc.build_time)
    return rep


# ---------------------------------------------------------------------------
# cotangent FEM


@dataclass
class SparseLaplacian:
    L: sp.csr_matrix        # symmetric, rows sum to zero, negative semi-definite
    mass: np.ndarray        # lumped (barycentric) areas

    @property
    def n(self) -> int:
        return len(self.mass)

    def triplets(self):
        c = self.L.tocoo()
        return c.row, c.col, c.data


def cotan_laplacian(mesh: TriangleMesh) -> SparseLaplacian:
    V, F = mesh.vertices, mesh.faces
    n = len(V)
    rows, cols, vals = [], [], []
    clamped = 0
    for a in range(3):
        i, j, k = F[:, a], F[:, (a + 1) % 3], F[:, (a + 2) % 3]
        u = V[j] - V[i]
        v = V[k] - V[i]
        cr = np.linalg.norm(np.cross(u, v), axis=1)
        dot = np.einsum("ij,ij->i", u, v)
        with np.errstate(divide="ignore", invalid="ignore"):
            cot = dot / cr
        bad = ~np.isfinite(cot) | (np.abs(cot) > COT_CLAMP)
        if bad.any():
            clamped += int(bad.sum())
            cot = np.where(np.isfinite(cot), cot, np.sign(dot) * COT_CLAMP)
            cot = np.clip(cot, -COT_CLAMP, COT_CLAMP)
        w = 0.5 * cot                       # angle at i weighs the opposite edge (j, k)
        rows += [j, k]
        cols += [k, j]
        vals += [w, w]
    if clamped:
        log.warning("clamped %d cotangents of degenerate triangles", clamped)
    W = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n))
    W.sum_duplicates()
    L = W - sp.diags(np.asarray(W.sum(axis=1)).ravel())
    mass = np.zeros(n)
    areas = mesh.face_areas()
    for a in range(3):
        np.add.at(mass, F[:, a], areas / 3.0)
    return SparseLaplacian(L.tocsr(), mass)


@dataclass
class FemResult:
    values: np.ndarray
    iterations: int
    converged: bool
    wall_time: float
    residual: float = 0.0


def fem_solve_poisson(mesh: TriangleMesh, f: Callable, tol: float = 1e-10,
                      lap: Optional[SparseLaplacian] = None) -> FemResult:
    """Zero-mean solution of L u = M f by conjugate gradients on -L."""
    t0 = time.time()
    lap = cotan_laplacian(mesh) if lap is None else lap
    M = lap.mass
    fv = np.asarray(f(mesh.vertices), dtype=float)
    fv = fv - np.sum(M * fv) / M.sum()
    b = -(M * fv)
    if np.max(np.abs(b)) == 0.0:
        return FemResult(np.zeros(lap.n), 0, True, time.time() - t0)
    it = [0]

    def cb(_):
        it[0] += 1

    u, info = spla.cg(-lap.L, b, rtol=tol, atol=0.0, maxiter=10 * lap.n, callback=cb)
    u = u - np.sum(M * u) / M.sum()
    res = float(np.linalg.norm(lap.L @ u - M * fv) / np.linalg.norm(b))
    if info != 0:
        log.warning("CG stopped without convergence (info=%d, rel. residual %.2e)", info, res)
    return FemResult(u, it[0], info == 0, time.time() - t0, res)


def fem_stable_dt(lap: SparseLaplacian, safety: float = 0.9) -> float:
    """Explicit Euler step from a Gershgorin bound on the spectrum of M^-1 L."""
    absrow = np.asarray(abs(lap.L).sum(axis=1)).ravel()
    lam_max = float(np.max(absrow / lap.mass))
    return safety * 2.0 / lam_max


def fem_solve_heat(mesh: TriangleMesh, u0: Callable, t_final: float = 0.25,
                   dt: Optional[float] = None, steady_tol: Optional[float] = None,
                   dirichlet: Optional[tuple] = None, max_steps: int = 10_000_000,
                   lap: Optional[SparseLaplacian] = None) -> FemResult:
    """Explicit steps u <- u + dt M^-1 L u.

    ``dirichlet`` is (vertex indices, values) clamped after each step; with
    ``steady_tol`` the loop runs until max|du|/dt falls below it.
    """
    t0 = time.time()
    lap = cotan_laplacian(mesh) if lap is None else lap
    dt = fem_stable_dt(lap) if dt is None else dt
    u = np.asarray(u0(mesh.vertices), dtype=float).copy()
    A = sp.diags(1.0 / lap.mass) @ lap.L
    if dirichlet is not None:
        u[dirichlet[0]] = dirichlet[1]
    if steady_tol is None:
        n = max(1, int(math.ceil(t_final / dt - 1e-9)))
        dt = t_final / n
    else:
        n = max_steps
    conv = steady_tol is None
    for s in range(n):
        du = dt * (A @ u)
        if dirichlet is not None:
            du[dirichlet[0]] = 0.0
        u += du
        if steady_tol is not None and np.max(np.abs(du)) / dt < steady_tol:
            conv = True
            break
    return FemResult(u, s + 1, conv, time.time() - t0)


def fem_solve_dirichlet_steady(mesh: TriangleMesh, boundary: np.ndarray, g: np.ndarray,
                               lap: Optional[SparseLaplacian] = None) -> FemResult:
    """Steady state of heat flow with Dirichlet data: L_II u_I = -L_IB g."""
    t0 = time.time()
    lap = cotan_laplacian(mesh) if lap is None else lap
    n = lap.n
    is_b = np.zeros(n, dtype=bool)
    is_b[boundary] = True
    I = np.nonzero(~is_b)[0]
    u = np.zeros(n)
    u[boundary] = g
    L = lap.L.tocsr()
    rhs = -(L[I][:, boundary] @ np.asarray(g, dtype=float))
    u[I] = spla.spsolve(L[I][:, I].tocsc(), rhs)
    return FemResult(u, 1, True, time.time() - t0)


# ---------------------------------------------------------------------------
# sphere oracles


def real_sph_harm(l: int, m: int, points: np.ndarray) -> np.ndarray:
    """Orthonormal real spherical harmonic at the directions of ``points``."""
    if l < 0 or abs(m) > l:
        raise ValueError(f"need 0 <= |m| <= l, got l={l}, m={m}")
    p = np.atleast_2d(points)
    r = np.linalg.norm(p, axis=1)
    ct = np.clip(p[:, 2] / r, -1.0, 1.0)
    phi = np.arctan2(p[:, 1], p[:, 0])
    am = abs(m)
    norm = math.sqrt((2 * l + 1) / (4 * math.pi) * factorial(l - am) / factorial(l + am))
    # lpmv carries the Condon-Shortley phase; strip it
    P = (-1) ** am * lpmv(am, l, ct)
    if m == 0:
        return norm * P
    if m > 0:
        return math.sqrt(2) * norm * P * np.cos(am * phi)
    return math.sqrt(2) * norm * P * np.sin(am * phi)


def sphere_analytic(kind: str, l: int, m: int = 0, t: Optional[float] = None,
                    radius: float = 1.0) -> Callable[[np.ndarray], np.ndarray]:
    """Closed-form solution on a sphere for data Y_l^m.

    heat: u(t) = exp(-l(l+1) t / R^2) Y_l^m. poisson with f = Y_l^m:
    u = -R^2 Y_l^m / (l(l+1)).
    """
    lam = l * (l + 1) / radius ** 2
    if kind == "heat":
        if t is None:
            raise ValueError("heat solution needs a time")
        a = math.exp(-lam * t)
        return lambda x: a * real_sph_harm(l, m, x)
    if kind == "poisson":
        if l < 1:
            raise ValueError("Poisson data must have zero mean (l >= 1)")
        return lambda x: -real_sph_harm(l, m, x) / lam
    raise ValueError(f"unknown kind {kind!r}")
