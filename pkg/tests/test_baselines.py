import math

import numpy as np
import pytest
import scipy.special as ss

from surfband.band import band_for_surface
from surfband.baselines import (cotan_laplacian, cpm_config, cpm_extension, cpm_prepare,
                                cpm_reextend,
                                fem_solve_dirichlet_steady, fem_solve_heat, fem_solve_poisson,
                                fem_stable_dt, lagrange_weights, real_sph_harm, sphere_analytic,
                                tricubic_matrix)
from surfband.geometry import AnalyticSphere, icosphere, sample_surface
from surfband.solver import SolveConfig, SolverError, run_heat

from conftest import grid_plane


# --- tricubic interpolation ------------------------------------------------------------


def test_lagrange_weights_reproduce_cubics(rng):
    t = rng.uniform(0, 1, 50)
    W = lagrange_weights(t)
    nodes = np.array([-1.0, 0.0, 1.0, 2.0])
    for p in range(4):
        np.testing.assert_allclose(W @ nodes ** p, t ** p, atol=1e-14)
    np.testing.assert_allclose(lagrange_weights(np.zeros(1))[0], [0, 1, 0, 0], atol=1e-15)


@pytest.fixture(scope="module")
def fine_band():
    s = AnalyticSphere()
    samples = sample_surface(s, 6000, seed=0)
    return band_for_surface(s, samples, 0.05, 0.25)


def test_tricubic_reproduces_cubics(fine_band, rng):
    band = fine_band
    x = band.positions
    M = tricubic_matrix(band)
    for _ in range(3):
        c = rng.normal(size=20)
        def cubic(p):
            a, b, z = p[:, 0], p[:, 1], p[:, 2]
            terms = [np.ones_like(a), a, b, z, a * a, b * b, z * z, a * b, a * z, b * z,
                     a ** 3, b ** 3, z ** 3, a * a * b, a * a * z, b * b * a, b * b * z,
                     z * z * a, z * z * b, a * b * z]
            return np.stack(terms, 1) @ c
        np.testing.assert_allclose(M @ cubic(x), cubic(band.cp), atol=1e-9)


def test_tricubic_rows_sum_to_one_and_skip(fine_band):
    M = tricubic_matrix(fine_band, skip=np.array([0, 5]))
    np.testing.assert_allclose(np.asarray(M.sum(axis=1)).ravel(), 1.0, atol=1e-12)
    assert M[0, 0] == 1.0 and M[0].nnz == 1
    with pytest.raises(ValueError):
        tricubic_matrix(fine_band, points=fine_band.cp[:3], skip=np.array([0]))


def test_tricubic_rejects_points_outside(fine_band):
    with pytest.raises(SolverError):
        tricubic_matrix(fine_band, points=np.array([[0.0, 0.0, 0.0]]))


def test_cpm_reextend_is_normal_constant(fine_band):
    band = fine_band
    g = lambda p: p[:, 2] / np.linalg.norm(p, axis=1)
    v = cpm_reextend(band, g(band.positions))
    # g is already constant along normals, the interpolation error is O(h^4)
    assert np.max(np.abs(v - g(band.cp))) < 1e-4


# --- cotangent FEM --------------------------------------------------------------------------


def test_cotan_structure():
    lap = cotan_laplacian(icosphere(2))
    L = lap.L
    assert abs(L - L.T).max() < 1e-14
    np.testing.assert_allclose(np.asarray(L.sum(axis=1)).ravel(), 0.0, atol=1e-12)
    assert np.all(L.diagonal() < 0)
    assert lap.mass.sum() == pytest.approx(icosphere(2).face_areas().sum())


def test_cotan_exact_on_planar_quadratic():
    mesh = grid_plane(10, 1.0)
    lap = cotan_laplacian(mesh)
    x, y = mesh.vertices[:, 0], mesh.vertices[:, 1]
    inner = (x > 1e-9) & (x < 1 - 1e-9) & (y > 1e-9) & (y < 1 - 1e-9)
    np.testing.assert_allclose((lap.L @ (2 * x - 3 * y))[inner], 0.0, atol=1e-12)
    # on this regular grid the weak Laplacian of x^2 + y^2 is 4 times the dual area
    np.testing.assert_allclose((lap.L @ (x * x + y * y))[inner], 4 * lap.mass[inner], rtol=1e-10)


def test_fem_poisson_converges_on_sphere():
    errs = []
    for lvl in (2, 3, 4):
        mesh = icosphere(lvl)
        f = lambda p: real_sph_harm(2, 0, p)
        res = fem_solve_poisson(mesh, f)
        assert res.converged
        truth = sphere_analytic("poisson", 2)(mesh.vertices)
        assert abs(np.sum(res.values * cotan_laplacian(mesh).mass)) < 1e-10
        errs.append(np.max(np.abs(res.values - truth)))
    assert errs[0] / errs[1] > 3 and errs[1] / errs[2] > 3


def test_fem_poisson_zero_data():
    res = fem_solve_poisson(icosphere(1), lambda p: np.ones(len(p)))
    assert res.iterations == 0 and np.all(res.values == 0)


def test_fem_heat_decay_and_constants():
    mesh = icosphere(3)
    lap = cotan_laplacian(mesh)
    assert fem_stable_dt(lap) > 0
    res = fem_solve_heat(mesh, lambda p: real_sph_harm(1, 0, p), t_final=0.25, lap=lap)
    truth = sphere_analytic("heat", 1, t=0.25)(mesh.vertices)
    assert np.max(np.abs(res.values - truth)) < 0.02 * np.ptp(truth)
    const = fem_solve_heat(mesh, lambda p: np.full(len(p), 2.5), t_final=0.1, lap=lap)
    np.testing.assert_allclose(const.values, 2.5, atol=1e-12)


def test_fem_heat_steady_dirichlet_matches_direct():
    mesh = grid_plane(8, 1.0)
    x, y = mesh.vertices[:, 0], mesh.vertices[:, 1]
    rim = np.nonzero((x < 1e-9) | (x > 1 - 1e-9) | (y < 1e-9) | (y > 1 - 1e-9))[0]
    g = 1.0 + x[rim] - 0.5 * y[rim]
    direct = fem_solve_dirichlet_steady(mesh, rim, g)
    # linear data is discrete-harmonic on a planar mesh
    np.testing.assert_allclose(direct.values, 1.0 + x - 0.5 * y, atol=1e-10)
    flow = fem_solve_heat(mesh, lambda p: np.zeros(len(p)), steady_tol=1e-9, dirichlet=(rim, g))
    assert flow.converged
    np.testing.assert_allclose(flow.values, direct.values, atol=1e-8)


# --- spherical harmonics oracle ---------------------------------------------------------------


def _complex_ylm(l, m, p):
    th = np.arccos(np.clip(p[:, 2], -1, 1))
    ph = np.arctan2(p[:, 1], p[:, 0])
    if hasattr(ss, "sph_harm_y"):
        return ss.sph_harm_y(l, m, th, ph)
    return ss.sph_harm(m, l, ph, th)


def test_real_harmonics_match_complex_convention(rng):
    p = rng.normal(size=(40, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    for l in range(4):
        for m in range(-l, l + 1):
            Y = _complex_ylm(l, abs(m), p)
            if m == 0:
                ref = Y.real
            elif m > 0:
                ref = math.sqrt(2) * (-1) ** m * Y.real
            else:
                ref = math.sqrt(2) * (-1) ** m * Y.imag
            np.testing.assert_allclose(real_sph_harm(l, m, p), ref, atol=1e-12)


def test_real_harmonics_are_orthonormal():
    # Gauss-Legendre in cos(theta) times a uniform rule in phi is exact here
    x, w = np.polynomial.legendre.leggauss(12)
    ph = 2 * np.pi * np.arange(24) / 24
    X, P = np.meshgrid(x, ph, indexing="ij")
    s = np.sqrt(1 - X ** 2)
    pts = np.column_stack([(s * np.cos(P)).ravel(), (s * np.sin(P)).ravel(), X.ravel()])
    wt = np.repeat(w, 24) * (2 * np.pi / 24)
    Ys = [real_sph_harm(l, m, pts) for l in range(4) for m in range(-l, l + 1)]
    G = np.array([[np.sum(wt * a * b) for b in Ys] for a in Ys])
    np.testing.assert_allclose(G, np.eye(len(Ys)), atol=1e-12)


def test_sphere_analytic_forms():
    p = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    np.testing.assert_allclose(sphere_analytic("poisson", 2)(p), -real_sph_harm(2, 0, p) / 6)
    np.testing.assert_allclose(sphere_analytic("heat", 1, t=0.5)(p),
                               math.exp(-1.0) * real_sph_harm(1, 0, p))
    np.testing.assert_allclose(sphere_analytic("poisson", 1, radius=2.0)(2 * p),
                               -4 * real_sph_harm(1, 0, p) / 2)
    with pytest.raises(ValueError):
        sphere_analytic("heat", 1)
    with pytest.raises(ValueError):
        sphere_analytic("poisson", 0)
    with pytest.raises(ValueError):
        real_sph_harm(1, 2, p)


# --- CPM end to end -----------------------------------------------------------------------------


def test_cpm_heat_on_sphere_coarse():
    cfg = SolveConfig(dx=0.1, t_final=0.1)
    assert cpm_config(cfg).cadence == 1
    assert cpm_config(SolveConfig(dx=0.1, cadence=4)).cadence == 4
    disc = cpm_prepare(AnalyticSphere(), cfg)
    rep = run_heat(disc, cpm_extension(disc), lambda p: real_sph_harm(1, 0, p), cpm_config(cfg))
    assert rep.info["cadence"] == 1
    truth = sphere_analytic("heat", 1, t=rep.t)(disc.readout_points)
    assert np.sqrt(np.mean((rep.readout - truth) ** 2)) / np.ptp(truth) < 0.05
