import numpy as np
import pytest
from scipy.spatial.distance import pdist

from surfband.band import band_for_surface
from surfband.geometry import AnalyticSphere, SurfaceSamples, sample_surface
from surfband.patches import (LocalFrame, PatchError, augment_rotate, build_patch, build_patches,
                              default_patch_spacing, dump_centers_xyz, from_local,
                              place_patch_centers, random_rotation, to_local)

from conftest import grid_plane


def random_frame(rng):
    n = rng.normal(size=3)
    return LocalFrame.from_sample(rng.normal(size=3), n, rng.normal(size=3))


# --- frames ------------------------------------------------------------------


def test_frame_orthonormal_and_right_handed(rng):
    for _ in range(20):
        f = random_frame(rng)
        np.testing.assert_allclose(f.axes @ f.axes.T, np.eye(3), atol=1e-12)
        assert abs(f.det - 1) < 1e-12
    with pytest.raises(ValueError):
        LocalFrame(np.zeros(3), np.diag([1.0, 1.0, 2.0]))


def test_to_local_round_trip(rng):
    f = random_frame(rng)
    p = rng.normal(size=(50, 3))
    n = rng.normal(size=(50, 3))
    lp, ln = to_local(f, p, n)
    bp, bn = from_local(f, lp, ln)
    np.testing.assert_allclose(bp, p, atol=1e-12)
    np.testing.assert_allclose(bn, n, atol=1e-12)
    np.testing.assert_allclose(to_local(f, f.center[None]), 0.0, atol=1e-15)
    _, nn = to_local(f, f.center[None], f.axes[0][None])
    np.testing.assert_allclose(nn, [[1, 0, 0]], atol=1e-15)


# --- centers -------------------------------------------------------------------


def test_centers_on_sphere_are_separated():
    s = sample_surface(AnalyticSphere(), 20_000, seed=0)
    c = place_patch_centers(s, 0.3, seed=0)
    pts = s.positions[c]
    assert pdist(pts).min() >= 0.3
    cap = 4 * np.pi / (np.pi * 0.15 ** 2)
    assert 0.5 * cap <= len(c) <= 2 * cap
    # maximal: every sample is within spacing of some center
    from scipy.spatial import cKDTree
    d, _ = cKDTree(pts).query(s.positions)
    assert d.max() < 0.3


def test_tiny_spacing_keeps_every_sample():
    s = sample_surface(AnalyticSphere(), 300, seed=0)
    assert len(place_patch_centers(s, 1e-9)) == 300


def test_centers_reach_disconnected_components():
    s = sample_surface(AnalyticSphere(), 2000, seed=0)
    far = s.positions + np.array([10.0, 0, 0])
    both = SurfaceSamples(np.vstack([s.positions, far]), np.vstack([s.normals, s.normals]))
    c = place_patch_centers(both, 0.5)
    assert np.any(c < 2000) and np.any(c >= 2000)


def test_huge_spacing_single_center(caplog):
    s = sample_surface(AnalyticSphere(), 500, seed=0)
    assert len(place_patch_centers(s, 10.0)) == 1
    assert "single center" in caplog.text
    with pytest.raises(ValueError):
        place_patch_centers(s, 0.0)


# --- patch construction ---------------------------------------------------------


def plane_setup():
    m = grid_plane(40, size=2.0, z=0.0)
    m.vertices[:, :2] -= 1.0
    s = sample_surface(m, 20_000, seed=0)
    band = band_for_surface(m, s, 0.05, 0.15)
    return s, band


def test_plane_patch_symmetric_about_surface():
    s, band = plane_setup()
    ci = int(np.argmin(np.linalg.norm(s.positions[:, :2] - [0.013, -0.007], axis=1)))
    p = build_patch(ci, band, s, k=81)
    z = np.sort(p.band_local[:, 0])
    # the band is symmetric about z = 0, so the normal coordinates pair up
    assert abs(np.sum(band.positions[p.band_idx, 2])) < 1e-9
    np.testing.assert_allclose(z, -z[::-1], atol=1e-9)
    np.testing.assert_allclose(to_local(p.frame, p.frame.center[None]), 0.0, atol=1e-15)


def test_patch_contents(sphere_setup):
    _, samples, band, patches = sphere_setup
    p = patches.patches[3]
    assert len(np.unique(p.band_idx)) == p.k == 100
    np.testing.assert_allclose(p.band_local, (band.positions[p.band_idx] - p.frame.center)
                               @ p.frame.axes.T, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(p.feat_local[:, 3:], axis=1), 1.0, atol=1e-12)
    # the stencil is the k nearest nodes
    d = np.linalg.norm(band.positions - p.frame.center, axis=1)
    assert d[p.band_idx].max() <= np.sort(d)[p.k - 1] + 1e-12


def test_margin_monotone(sphere_setup):
    _, samples, band, patches = sphere_setup
    c = int(patches.centers[0])
    n0 = build_patch(c, band, samples, 100, margin=0.0, max_features=None).n_features
    n1 = build_patch(c, band, samples, 100, margin=0.1, max_features=None).n_features
    assert n1 >= n0 > 0


def test_patch_deterministic(sphere_setup):
    _, samples, band, patches = sphere_setup
    c = int(patches.centers[5])
    a = build_patch(c, band, samples, 100)
    b = build_patch(c, band, samples, 100)
    assert np.array_equal(a.band_idx, b.band_idx) and np.array_equal(a.feat_local, b.feat_local)


def test_patch_errors(sphere_setup):
    _, samples, band, _ = sphere_setup
    with pytest.raises(PatchError):
        build_patch(0, band, samples, len(band) + 1)
    empty_far = SurfaceSamples(samples.positions[:1] * 50, samples.normals[:1],
                               t1=samples.t1[:1], t2=samples.t2[:1])
    with pytest.raises(PatchError):
        build_patch(0, band, empty_far, 10, margin=0.0)


def test_default_spacing_matches_coverage_radius():
    assert default_patch_spacing(0.1, 400) == pytest.approx(0.5 * 0.1 * 4.5708, rel=1e-3)


def test_patchset_covers_band(sphere_setup):
    _, _, band, patches = sphere_setup
    cnt = patches.coverage_count(len(band))
    assert cnt.min() >= 1
    assert np.median(cnt) >= 2


def test_centers_dump(tmp_path, sphere_setup):
    patches = sphere_setup[3]
    p = tmp_path / "c.xyz"
    dump_centers_xyz(patches.patches, p)
    data = np.loadtxt(p)
    assert data.shape == (len(patches), 6)
    np.testing.assert_allclose(np.linalg.norm(data[:, 3:], axis=1), 1.0, atol=1e-8)


# --- augmentation ------------------------------------------------------------------


def test_identity_rotation_is_noop(sphere_setup):
    p = sphere_setup[3].patches[0]
    q = augment_rotate(p, rotation=np.eye(3))
    assert np.array_equal(q.band_local, p.band_local)
    assert np.array_equal(q.feat_local, p.feat_local)


def test_rotation_is_isometry(sphere_setup):
    p = sphere_setup[3].patches[0]
    q = augment_rotate(p, seed=7)
    np.testing.assert_allclose(pdist(q.band_local), pdist(p.band_local), atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(q.feat_local[:, 3:], axis=1),
                               np.linalg.norm(p.feat_local[:, 3:], axis=1), atol=1e-12)
    # the frame records the rotation, so world positions are unchanged
    np.testing.assert_allclose(from_local(q.frame, q.band_local), from_local(p.frame, p.band_local),
                               atol=1e-12)
    R = random_rotation(7)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(R) - 1) < 1e-12


def test_frames_equivariant_under_rigid_rotation():
    # rotate the world: the local tensors of a patch at the rotated center agree
    # up to a rotation about the normal (the tangent-pair gauge)
    s = AnalyticSphere()
    samples = sample_surface(s, 6000, seed=0)
    band = band_for_surface(s, samples, 0.1, 0.25)
    R = random_rotation(3)
    p = build_patch(10, band, samples, 60)
    world = from_local(p.frame, p.band_local) @ R.T
    frame_r = LocalFrame(p.frame.center @ R.T, p.frame.axes @ R.T)
    local_r = to_local(frame_r, world)
    np.testing.assert_allclose(local_r, p.band_local, atol=1e-12)
    # any other tangent pair differs by a rotation about the first axis only
    t1 = frame_r.axes[2]
    other = LocalFrame.from_sample(frame_r.center, frame_r.axes[0], t1)
    lo = to_local(other, world)
    np.testing.assert_allclose(lo[:, 0], p.band_local[:, 0], atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(lo[:, 1:], axis=1),
                               np.linalg.norm(p.band_local[:, 1:], axis=1), atol=1e-12)
