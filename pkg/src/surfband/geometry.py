"""Surface representations, sampling and local differential features.

Three surface kinds are supported: triangle meshes, oriented point clouds and
the analytic sphere. Every kind can be sampled into a :class:`SurfaceSamples`
block (struct-of-arrays) carrying positions, unit normals and, when
available, a principal frame with curvatures.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order, connected_components, minimum_spanning_tree
from scipy.spatial import ConvexHull, cKDTree

log = logging.getLogger(__name__)

UMBILIC_TOL = 1e-4


class GeometryError(ValueError):
    """Raised for malformed or degenerate geometric input."""


class MeshLoadError(GeometryError):
    pass


def _normalize_rows(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def tangent_basis(normals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Arbitrary orthonormal tangent pair (t1, t2) with t2 = n x t1."""
    normals = np.atleast_2d(normals)
    helper = np.zeros_like(normals)
    use_x = np.abs(normals[:, 0]) < 0.9
    helper[use_x, 0] = 1.0
    helper[~use_x, 1] = 1.0
    t1 = _normalize_rows(helper - np.sum(helper * normals, axis=1, keepdims=True) * normals)
    t2 = np.cross(normals, t1)
    return t1, t2


# ---------------------------------------------------------------------------
# surface types


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise GeometryError("face index out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def face_cross(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        return np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        return _normalize_rows(self.face_cross())

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted average of incident face normals.

        Isolated vertices take the normal of the nearest face centroid.
        """
        c = self.face_cross()  # |c| = 2 * area, so summing c is area weighting
        acc = np.zeros_like(self.vertices)
        for j in range(3):
            np.add.at(acc, self.faces[:, j], c)
        norm = np.linalg.norm(acc, axis=1)
        isolated = norm == 0
        if isolated.any() and len(self.faces):
            cent = self.vertices[self.faces].mean(axis=1)
            _, idx = cKDTree(cent).query(self.vertices[isolated])
            acc[isolated] = c[idx]
        return _normalize_rows(acc)

    def boundary_vertices(self) -> np.ndarray:
        """Boolean mask of vertices incident to an edge used by one face."""
        f = self.faces
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, counts = np.unique(edges, axis=0, return_counts=True)
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[uniq[counts == 1].ravel()] = True
        return mask

    def adjacency(self) -> sp.csr_matrix:
        f = self.faces
        i = np.concatenate([f[:, 0], f[:, 1], f[:, 2], f[:, 1], f[:, 2], f[:, 0]])
        j = np.concatenate([f[:, 1], f[:, 2], f[:, 0], f[:, 0], f[:, 1], f[:, 2]])
        a = sp.csr_matrix((np.ones(len(i)), (i, j)), shape=(self.n_vertices,) * 2)
        a.data[:] = 1.0
        return a

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


@dataclass
class OrientedPointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise GeometryError("points and normals differ in length")
            nrm = np.linalg.norm(self.normals, axis=1)
            if np.any(nrm == 0):
                raise GeometryError("zero-length normal in point cloud")
            self.normals = self.normals / nrm[:, None]

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.points.min(axis=0), self.points.max(axis=0)


@dataclass
class AnalyticSphere:
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        if not self.radius > 0:
            raise GeometryError("sphere radius must be positive")
        self.radius = float(self.radius)

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.center - self.radius, self.center + self.radius


Surface = Union[TriangleMesh, OrientedPointCloud, AnalyticSphere]


@dataclass
class SurfaceSamples:
    """Block of surface samples.

    ``t1``/``t2``/``kappa1``/``kappa2`` are None when the representation
    provides no curvature; rows that are NaN mark locally absent curvature
    (e.g. mesh boundary).
    """

    positions: np.ndarray
    normals: Optional[np.ndarray] = None
    t1: Optional[np.ndarray] = None
    t2: Optional[np.ndarray] = None
    kappa1: Optional[np.ndarray] = None
    kappa2: Optional[np.ndarray] = None
    face_ids: Optional[np.ndarray] = None
    bary: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, idx) -> "SurfaceSamples":
        def take(a):
            return None if a is None else a[idx]

        return SurfaceSamples(*(take(getattr(self, f)) for f in
                                ("positions", "normals", "t1", "t2", "kappa1", "kappa2",
                                 "face_ids", "bary")))

    def frames(self) -> np.ndarray:
        """(n, 3, 3) rows (n, t1, t2); arbitrary tangent pair where t1 is absent."""
        if self.normals is None:
            raise GeometryError("samples carry no normals")
        n = self.normals
        t1 = None if self.t1 is None else self.t1.copy()
        fallback_t1, _ = tangent_basis(n)
        if t1 is None:
            t1 = fallback_t1
        else:
            bad = ~np.isfinite(t1).all(axis=1)
            t1[bad] = fallback_t1[bad]
            t1 = _normalize_rows(t1 - np.sum(t1 * n, axis=1, keepdims=True) * n)
        t2 = np.cross(n, t1)
        return np.stack([n, t1, t2], axis=1)


# ---------------------------------------------------------------------------
# I/O


def load_mesh(path: Union[str, os.PathLike], triangulate: bool = True) -> TriangleMesh:
    """Read an ASCII OBJ file.

    Polygons are fan-triangulated (or rejected when ``triangulate`` is
    False); faces with zero area are dropped and counted in a warning.
    """
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(t) for t in parts[1:4]])
                    if len(verts[-1]) != 3:
                        raise ValueError("vertex needs 3 coordinates")
                elif parts[0] == "f":
                    idx = []
                    for tok in parts[1:]:
                        k = int(tok.split("/")[0])
                        idx.append(k - 1 if k > 0 else len(verts) + k)
                    if len(idx) < 3:
                        raise ValueError("face with fewer than 3 vertices")
                    if len(idx) > 3 and not triangulate:
                        raise ValueError(f"non-triangular face with {len(idx)} vertices")
                    for a in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[a], idx[a + 1]])
            except ValueError as exc:
                raise MeshLoadError(f"{path}:{lineno}: {exc}") from exc
    if not verts or not faces:
        raise MeshLoadError(f"{path}: no vertices or faces found")
    try:
        mesh = TriangleMesh(np.array(verts), np.array(faces))
    except GeometryError as exc:
        raise MeshLoadError(f"{path}: {exc}") from exc
    return drop_degenerate_faces(mesh)


def drop_degenerate_faces(mesh: TriangleMesh, tol: float = 1e-14) -> TriangleMesh:
    areas = mesh.face_areas()
    scale = max(np.ptp(mesh.vertices, axis=0).max(), 1e-300) ** 2
    keep = areas > tol * scale
    n_bad = int((~keep).sum())
    if n_bad:
        log.warning("dropped %d degenerate faces", n_bad)
        mesh = TriangleMesh(mesh.vertices, mesh.faces[keep])
    return mesh


def save_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def load_xyz(path) -> OrientedPointCloud:
    """Read "x y z [nx ny nz]" lines."""
    data = np.loadtxt(path, ndmin=2)
    if data.shape[1] not in (3, 6):
        raise GeometryError(f"{path}: expected 3 or 6 columns, got {data.shape[1]}")
    return OrientedPointCloud(data[:, :3], data[:, 3:6] if data.shape[1] == 6 else None)


def save_xyz(cloud: OrientedPointCloud, path) -> None:
    data = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    np.savetxt(path, data, fmt="%.17g")


def load_surface(path) -> Surface:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".obj":
        return load_mesh(path)
    if ext in (".xyz", ".xyzn", ".txt"):
        return load_xyz(path)
    raise GeometryError(f"unsupported surface file: {path}")


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class Transform:
    """p_normalized = (p - center) * scale."""

    center: np.ndarray
    scale: float

    def apply(self, p: np.ndarray) -> np.ndarray:
        return (np.asarray(p) - self.center) * self.scale

    def inverse(self, p: np.ndarray) -> np.ndarray:
        return np.asarray(p) / self.scale + self.center


def surface_bbox(surface: Surface) -> tuple[np.ndarray, np.ndarray]:
    return surface.bbox()


def normalize_shape(surface: Surface) -> tuple[Surface, Transform]:
    """Center the tight bounding box at the origin with longest side 1."""
    lo, hi = surface.bbox()
    extent = float(np.max(hi - lo))
    if not extent > 0:
        raise GeometryError("zero-extent geometry cannot be normalized")
    tf = Transform(center=0.5 * (lo + hi), scale=1.0 / extent)
    return transform_surface(surface, tf), tf


def transform_surface(surface: Surface, tf: Transform) -> Surface:
    if isinstance(surface, AnalyticSphere):
        return AnalyticSphere(tf.apply(surface.center), surface.radius * tf.scale)
    if isinstance(surface, TriangleMesh):
        return TriangleMesh(tf.apply(surface.vertices), surface.faces.copy())
    if isinstance(surface, OrientedPointCloud):
        return OrientedPointCloud(tf.apply(surface.points),
                                  None if surface.normals is None else surface.normals.copy())
    raise TypeError(type(surface))


# ---------------------------------------------------------------------------
# sampling


def sample_surface(surface: Surface, n: int, seed: int = 0,
                   replace_points: bool = False) -> SurfaceSamples:
    """Draw ``n`` samples approximately uniform by area.

    Meshes use area-weighted face selection with uniform barycentric
    coordinates; clouds use a random subset (or all points); spheres use
    normalized Gaussian draws. Geometry features are filled in as well.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    if isinstance(surface, AnalyticSphere):
        d = _normalize_rows(rng.standard_normal((n, 3)))
        samples = SurfaceSamples(surface.center + surface.radius * d)
        return sphere_features(surface, samples)
    if isinstance(surface, TriangleMesh):
        areas = surface.face_areas()
        fid = rng.choice(len(areas), size=n, p=areas / areas.sum())
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        bary = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
        pos = np.einsum("nk,nkd->nd", bary, surface.vertices[surface.faces[fid]])
        samples = SurfaceSamples(pos, face_ids=fid, bary=bary)
        return mesh_features(surface, samples)
    if isinstance(surface, OrientedPointCloud):
        m = len(surface.points)
        if n > m and not replace_points:
            raise GeometryError(f"requested {n} samples from a cloud of {m} points")
        idx = np.arange(m) if n == m else np.sort(rng.choice(m, size=n, replace=n > m))
        if surface.normals is not None:
            return SurfaceSamples(surface.points[idx], surface.normals[idx].copy())
        feats = pointcloud_features(surface)
        keep = np.isin(feats.source_index, idx)
        return SurfaceSamples(feats.samples.positions[keep], feats.samples.normals[keep])
    raise TypeError(type(surface))


# ---------------------------------------------------------------------------
# features


def sphere_features(sphere: AnalyticSphere, samples: SurfaceSamples) -> SurfaceSamples:
    d = samples.positions - sphere.center
    n = d / np.linalg.norm(d, axis=1, keepdims=True)
    t1, t2 = tangent_basis(n)
    k = np.full(len(n), 1.0 / sphere.radius)
    return replace(samples, normals=n, t1=t1, t2=t2, kappa1=k, kappa2=k.copy())


def vertex_curvatures(mesh: TriangleMesh, normals: Optional[np.ndarray] = None):
    """Per-vertex principal curvatures and directions by local quadric fit.

    Fits ``h = a u^2 + b u v + c v^2 + d u + e v`` over the two-ring in the
    vertex tangent frame. Curvature is positive where the surface bends away
    from the normal (a sphere with outward normals has kappa = 1/r).
    Boundary vertices get NaN.

    Returns (kappa1, kappa2, t1, t2) with kappa1 >= kappa2.
    """
    if normals is None:
        normals = mesh.vertex_normals()
    nv = mesh.n_vertices
    a1 = mesh.adjacency()
    ring = ((a1 + a1 @ a1) > 0).tocoo()
    keep = ring.row != ring.col
    vi, vj = ring.row[keep], ring.col[keep]
    e1, e2 = tangent_basis(normals)
    d = mesh.vertices[vj] - mesh.vertices[vi]
    u = np.sum(d * e1[vi], axis=1)
    v = np.sum(d * e2[vi], axis=1)
    h = np.sum(d * normals[vi], axis=1)
    # scale-free weighting keeps the normal equations conditioned
    s2 = np.zeros(nv)
    np.add.at(s2, vi, u * u + v * v)
    cnt = np.bincount(vi, minlength=nv).astype(float)
    s = np.sqrt(s2 / np.maximum(cnt, 1))[vi]
    s = np.where(s > 0, s, 1.0)
    un, vn = u / s, v / s
    A = np.stack([un * un, un * vn, vn * vn, un, vn], axis=1)
    ata = np.zeros((nv, 5, 5))
    atb = np.zeros((nv, 5))
    np.add.at(ata, vi, A[:, :, None] * A[:, None, :])
    np.add.at(atb, vi, A * (h / s)[:, None])
    ok = cnt >= 5
    ok &= ~mesh.boundary_vertices()
    coef = np.full((nv, 5), np.nan)
    reg = 1e-12 * np.eye(5)
    coef[ok] = np.linalg.solve(ata[ok] + reg, atb[ok][..., None])[..., 0]
    # undo the normalization: h/s = a (u/s)^2 ... -> second derivatives scale by 1/s
    svert = np.zeros(nv)
    svert[vi] = s
    a, b, c = coef[:, 0] / svert, coef[:, 1] / svert, coef[:, 2] / svert
    # gradient correction: the fitted slope tilts the frame slightly; ignored at second order
    shape = -np.stack([np.stack([2 * a, b], -1), np.stack([b, 2 * c], -1)], -2)
    k1, k2, dirs = _sym2_eig(shape)
    t1 = dirs[:, 0, None] * e1 + dirs[:, 1, None] * e2
    t1 = _normalize_rows(t1)
    t2 = np.cross(normals, t1)
    bad = ~ok
    k1[bad] = k2[bad] = np.nan
    t1[bad] = np.nan
    t2[bad] = np.nan
    return k1, k2, t1, t2


def _sym2_eig(m: np.ndarray):
    """Eigen-decomposition of batched symmetric 2x2; returns (k_max, k_min, v_max)."""
    a, b, c = m[:, 0, 0], m[:, 0, 1], m[:, 1, 1]
    mean = 0.5 * (a + c)
    rad = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    k1, k2 = mean + rad, mean - rad
    theta = 0.5 * np.arctan2(2 * b, a - c)
    v = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    return k1, k2, v


def mesh_features(mesh: TriangleMesh, samples: SurfaceSamples,
                  curvature: bool = True) -> SurfaceSamples:
    """Fill normals (and principal frames) for samples carrying face ids."""
    if samples.face_ids is None or samples.bary is None:
        raise GeometryError("mesh samples need face ids and barycentric coordinates")
    vn = mesh.vertex_normals()
    tri = mesh.faces[samples.face_ids]
    n = _normalize_rows(np.einsum("nk,nkd->nd", samples.bary, vn[tri]))
    if not curvature:
        return replace(samples, normals=n)
    k1v, k2v, t1v, t2v = vertex_curvatures(mesh, vn)
    # interpolate ambient shape tensors; directions are sign-ambiguous
    tens = (k1v[:, None, None] * t1v[:, :, None] * t1v[:, None, :]
            + k2v[:, None, None] * t2v[:, :, None] * t2v[:, None, :])
    S = np.einsum("nk,nkij->nij", samples.bary, tens[tri])
    e1, e2 = tangent_basis(n)
    E = np.stack([e1, e2], axis=1)  # (n, 2, 3)
    S2 = np.einsum("nai,nij,nbj->nab", E, S, E)
    absent = ~np.isfinite(S2).all(axis=(1, 2))
    S2[absent] = 0.0
    k1, k2, dirs = _sym2_eig(S2)
    t1 = _normalize_rows(dirs[:, 0, None] * e1 + dirs[:, 1, None] * e2)
    umb = np.abs(k1 - k2) < UMBILIC_TOL
    t1[umb] = e1[umb]
    t2 = np.cross(n, t1)
    k1[absent] = k2[absent] = np.nan
    t1[absent] = np.nan
    t2[absent] = np.nan
    return replace(samples, normals=n, t1=t1, t2=t2, kappa1=k1, kappa2=k2)


@dataclass
class CloudFeatures:
    samples: SurfaceSamples
    source_index: np.ndarray  # row in the input cloud for every kept sample
    dropped: np.ndarray


def pointcloud_features(cloud: OrientedPointCloud, k_nn: int = 16,
                        rank_tol: float = 1e-8) -> CloudFeatures:
    """PCA normals from k-NN neighborhoods.

    Signs follow the stored normals when present; otherwise they are
    propagated along a minimum spanning tree of the k-NN graph, seeded at the
    highest point which is oriented +z. Rank-deficient neighborhoods are
    dropped. No curvature is emitted.
    """
    pts = cloud.points
    m = len(pts)
    if k_nn < 3:
        raise ValueError("k_nn must be at least 3")
    if m < k_nn:
        raise GeometryError(f"cloud has {m} points, fewer than k_nn={k_nn}")
    tree = cKDTree(pts)
    _, nbr = tree.query(pts, k=k_nn)
    nb = pts[nbr]
    c = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", c, c) / k_nn
    w, vec = np.linalg.eigh(cov)
    normals = vec[:, :, 0]
    scale = np.maximum(w[:, 2], 1e-300)
    degenerate = w[:, 1] <= rank_tol * scale
    if cloud.normals is not None:
        flip = np.sum(normals * cloud.normals, axis=1) < 0
        normals[flip] *= -1
    else:
        normals = _orient_by_mst(pts, normals, nbr, ~degenerate)
    keep = ~degenerate
    idx = np.nonzero(keep)[0]
    return CloudFeatures(SurfaceSamples(pts[keep], normals[keep]), idx, np.nonzero(degenerate)[0])


def _orient_by_mst(pts, normals, nbr, valid):
    m = len(pts)
    rows = np.repeat(np.arange(m), nbr.shape[1])
    cols = nbr.ravel()
    good = valid[rows] & valid[cols] & (rows != cols)
    rows, cols = rows[good], cols[good]
    wgt = 1.0 - np.abs(np.sum(normals[rows] * normals[cols], axis=1)) + 1e-9
    g = sp.csr_matrix((wgt, (rows, cols)), shape=(m, m))
    g = g.maximum(g.T)
    tree = minimum_spanning_tree(g)
    tree = tree + tree.T
    normals = normals.copy()
    ncomp, labels = connected_components(tree, directed=False)
    for comp in range(ncomp):
        members = np.nonzero((labels == comp) & valid)[0]
        if members.size == 0:
            continue
        seed = members[np.argmax(pts[members, 2])]
        if normals[seed, 2] < 0:
            normals[seed] *= -1
        order, pred = breadth_first_order(tree, seed, directed=False)
        for node in order[1:]:
            if np.dot(normals[node], normals[pred[node]]) < 0:
                normals[node] *= -1
    return normals


def surface_features(surface: Surface, samples: SurfaceSamples) -> SurfaceSamples:
    if isinstance(surface, AnalyticSphere):
        return sphere_features(surface, samples)
    if isinstance(surface, TriangleMesh):
        return mesh_features(surface, samples)
    return samples


# ---------------------------------------------------------------------------
# shape generators


def icosphere(level: int = 0, radius: float = 1.0) -> TriangleMesh:
    """Subdivided icosahedron projected onto the sphere."""
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
                  [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
                  [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=float)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    v = _normalize_rows(v)
    for _ in range(level):
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        mid = _normalize_rows(0.5 * (v[uniq[:, 0]] + v[uniq[:, 1]]))
        base = len(v)
        v = np.vstack([v, mid])
        nf = len(f)
        m01 = base + inv[:nf]
        m12 = base + inv[nf:2 * nf]
        m20 = base + inv[2 * nf:]
        f = np.concatenate([
            np.stack([f[:, 0], m01, m20], 1),
            np.stack([f[:, 1], m12, m01], 1),
            np.stack([f[:, 2], m20, m12], 1),
            np.stack([m01, m12, m20], 1)])
    return TriangleMesh(radius * v, f)


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def hull_mesh(points: np.ndarray) -> TriangleMesh:
    """Triangulate points on a convex surface (sphere Delaunay) with outward faces."""
    hull = ConvexHull(points)
    f = hull.simplices.copy()
    mesh = TriangleMesh(points, f)
    c = mesh.face_cross()
    cent = points[f].mean(axis=1) - points.mean(axis=0)
    flip = np.sum(c * cent, axis=1) < 0
    f[flip] = f[flip][:, ::-1]
    return drop_degenerate_faces(TriangleMesh(points, f))


def blue_noise_sphere(n: int, seed: int = 0, candidates: int = 10) -> np.ndarray:
    """Best-candidate (farthest point) sampling on the unit sphere."""
    rng = np.random.default_rng(seed)
    pool = _normalize_rows(rng.standard_normal((n * candidates, 3)))
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = 0
    dmin = np.linalg.norm(pool - pool[0], axis=1)
    for i in range(1, n):
        j = int(np.argmax(dmin))
        chosen[i] = j
        dmin = np.minimum(dmin, np.linalg.norm(pool - pool[j], axis=1))
    return pool[chosen]


SPHERE_MODES = ("regular", "random", "jittered", "blue-noise")


def sphere_mesh(n_vertices: int, mode: str = "regular", seed: int = 0,
                radius: float = 1.0, jitter: float = 0.25) -> TriangleMesh:
    """Sphere triangulation with ``n_vertices`` vertices in a sampling mode.

    regular: Fibonacci lattice; random: normalized Gaussian draws; jittered:
    Fibonacci plus Gaussian noise of ``jitter`` times the mean spacing;
    blue-noise: farthest-point selection from a random pool.
    """
    rng = np.random.default_rng(seed)
    if mode == "regular":
        p = fibonacci_sphere(n_vertices)
    elif mode == "random":
        p = _normalize_rows(rng.standard_normal((n_vertices, 3)))
    elif mode == "jittered":
        spacing = np.sqrt(4 * np.pi / n_vertices)
        p = _normalize_rows(fibonacci_sphere(n_vertices)
                            + jitter * spacing * rng.standard_normal((n_vertices, 3)))
    elif mode == "blue-noise":
        p = blue_noise_sphere(n_vertices, seed=seed)
    else:
        raise ValueError(f"unknown sphere mode {mode!r}")
    return hull_mesh(radius * p)


def torus_mesh(major: float = 0.35, minor: float = 0.15, n_major: int = 96,
               n_minor: int = 40) -> TriangleMesh:
    """Parametric torus around the z axis (genus 1, closed)."""
    u = 2 * np.pi * np.arange(n_major) / n_major
    v = 2 * np.pi * np.arange(n_minor) / n_minor
    uu, vv = np.meshgrid(u, v, indexing="ij")
    r = major + minor * np.cos(vv)
    verts = np.stack([r * np.cos(uu), r * np.sin(uu), minor * np.sin(vv)], -1).reshape(-1, 3)
    i = np.arange(n_major)[:, None]
    j = np.arange(n_minor)[None, :]
    a = i * n_minor + j
    b = ((i + 1) % n_major) * n_minor + j
    c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
    d = i * n_minor + (j + 1) % n_minor
    faces = np.concatenate([np.stack([a, b, c], -1).reshape(-1, 3),
                            np.stack([a, c, d], -1).reshape(-1, 3)])
    return TriangleMesh(verts, faces)


def spherical_cap_mesh(n_vertices: int, axis: int = 1, level: float = -0.5,
                       radius: float = 1.0) -> TriangleMesh:
    """Open sphere cap {x_axis >= level * radius} with its rim exactly on the cut plane.

    The triangulation is the convex hull of cap lattice points plus a rim
    ring; the planar lid faces are then removed.
    """
    p = fibonacci_sphere(n_vertices)
    p = p[p[:, axis] > level + 1e-3]
    rim_r = np.sqrt(1 - level ** 2)
    spacing = np.sqrt(4 * np.pi / n_vertices)
    n_rim = max(8, int(round(2 * np.pi * rim_r / spacing)))
    ang = 2 * np.pi * np.arange(n_rim) / n_rim
    others = [k for k in range(3) if k != axis]
    rim = np.zeros((n_rim, 3))
    rim[:, others[0]] = rim_r * np.cos(ang)
    rim[:, others[1]] = rim_r * np.sin(ang)
    rim[:, axis] = level
    pts = np.vstack([p, rim])
    hull = ConvexHull(pts)
    f = hull.simplices
    is_rim = np.zeros(len(pts), dtype=bool)
    is_rim[len(p):] = True
    f = f[~is_rim[f].all(axis=1)]
    mesh = TriangleMesh(radius * pts, f)
    c = mesh.face_cross()
    cent = mesh.vertices[f].mean(axis=1)
    flip = np.sum(c * cent, axis=1) < 0
    f = f.copy()
    f[flip] = f[flip][:, ::-1]
    return TriangleMesh(radius * pts, f)


def make_training_shape(seed: int = 0, bump_count: int = 30, bump_height: float = 0.3,
                        bump_width: float = 0.17, level: int = 5) -> TriangleMesh:
    """Icosphere radially displaced by randomly placed Gaussian bumps.

    Bump heights are drawn in [bump_height/2, bump_height]; ``bump_height=0``
    gives the exact sphere.
    """
    if bump_count < 1:
        raise ValueError("bump_count must be at least 1")
    rng = np.random.default_rng(seed)
    base = icosphere(level)
    dirs = base.vertices
    centers = _normalize_rows(rng.standard_normal((bump_count, 3)))
    heights = bump_height * rng.uniform(0.5, 1.0, bump_count)
    ang = np.arccos(np.clip(dirs @ centers.T, -1.0, 1.0))
    r = 1.0 + np.exp(-0.5 * (ang / bump_width) ** 2) @ heights
    return TriangleMesh(dirs * r[:, None], base.faces)
