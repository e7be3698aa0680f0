"""Cartesian grids, the epsilon narrow band and the closest-point map."""
from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .geometry import (AnalyticSphere, OrientedPointCloud, Surface, SurfaceSamples,
                       TriangleMesh, _normalize_rows)

log = logging.getLogger(__name__)

MISSING = -1
# +x, -x, +y, -y, +z, -z
NEIGHBOR_OFFSETS = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])


class BandError(RuntimeError):
    pass


class ClosestPointError(ValueError):
    """Raised where the closest point is not unique (e.g. a sphere's center)."""


@dataclass(frozen=True)
class Grid:
    origin: np.ndarray
    spacing: float
    dims: tuple

    def __post_init__(self):
        if not self.spacing > 0:
            raise ValueError("grid spacing must be positive")
        if len(self.dims) != 3 or min(self.dims) < 4:
            raise ValueError(f"grid dims must be three values >= 4, got {self.dims}")

    def position(self, ijk: np.ndarray) -> np.ndarray:
        return self.origin + np.asarray(ijk) * self.spacing

    def linear(self, ijk: np.ndarray) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=np.int64)
        nx, ny, nz = self.dims
        return (ijk[..., 0] * ny + ijk[..., 1]) * nz + ijk[..., 2]

    def contains(self, ijk: np.ndarray) -> np.ndarray:
        ijk = np.asarray(ijk)
        return np.all((ijk >= 0) & (ijk < np.asarray(self.dims)), axis=-1)


def build_grid(lo, hi, spacing: float, margin: float, epsilon: float = 0.0,
               max_nodes: int = 50_000_000) -> Grid:
    """Grid covering [lo, hi] dilated by ``margin`` with origin snapped to ``spacing``."""
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    if margin < epsilon:
        raise ValueError(f"margin {margin} is smaller than the band width {epsilon}")
    lo = np.asarray(lo, dtype=float) - margin
    hi = np.asarray(hi, dtype=float) + margin
    i0 = np.floor(lo / spacing - 1e-9)
    i1 = np.ceil(hi / spacing + 1e-9)
    dims = tuple(int(v) for v in np.maximum(i1 - i0 + 1, 4))
    total = int(np.prod(dims, dtype=np.int64))
    if total > max_nodes:
        raise BandError(f"grid of {dims} ({total} nodes) exceeds the node budget "
                        f"{max_nodes}; use a larger spacing")
    return Grid(origin=i0 * spacing, spacing=float(spacing), dims=dims)


# ---------------------------------------------------------------------------
# closest points


def closest_point_triangles(p, a, b, c):
    """Closest point on triangles (a, b, c) to points p, row-wise.

    Region-based method from Ericson, Real-Time Collision Detection, 5.1.5.
    Returns (points, barycentric weights).
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp_ = p - c
    d5 = np.einsum("ij,ij->i", ab, cp_)
    d6 = np.einsum("ij,ij->i", ac, cp_)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    n = len(p)
    bary = np.zeros((n, 3))
    done = np.zeros(n, dtype=bool)

    def assign(mask, w):
        nonlocal done
        m = mask & ~done
        bary[m] = w[m] if np.ndim(w) == 2 else w
        done |= m

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), np.array([1.0, 0.0, 0.0]))
        assign((d3 >= 0) & (d4 <= d3), np.array([0.0, 1.0, 0.0]))
        v = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), np.stack([1 - v, v, np.zeros(n)], 1))
        assign((d6 >= 0) & (d5 <= d6), np.array([0.0, 0.0, 1.0]))
        w = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), np.stack([1 - w, np.zeros(n), w], 1))
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
               np.stack([np.zeros(n), 1 - w, w], 1))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        assign(np.ones(n, dtype=bool), np.stack([1 - v - w, v, w], 1))
    q = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:] * c
    return q, bary


@dataclass
class _MeshIndex:
    tree: cKDTree
    radius: float
    vertex_normals: np.ndarray


_MESH_INDEX: dict = {}


def _mesh_index(mesh: TriangleMesh) -> _MeshIndex:
    key = id(mesh)
    hit = _MESH_INDEX.get(key)
    if hit is not None and hit[0] is mesh:
        return hit[1]
    tri = mesh.vertices[mesh.faces]
    cent = tri.mean(axis=1)
    radius = float(np.max(np.linalg.norm(tri - cent[:, None, :], axis=2)))
    idx = _MeshIndex(cKDTree(cent), radius, mesh.vertex_normals())
    if len(_MESH_INDEX) > 16:
        _MESH_INDEX.clear()
    _MESH_INDEX[key] = (mesh, idx)
    return idx


@functools.singledispatch
def closest_point(surface, x: np.ndarray):
    """Closest surface point and surface normal for each row of ``x``.

    Returns (points, normals), both (n, 3).
    """
    raise TypeError(f"no closest-point rule for {type(surface).__name__}")


@closest_point.register
def _(surface: AnalyticSphere, x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = x - surface.center
    r = np.linalg.norm(d, axis=1)
    if np.any(r <= 1e-14 * surface.radius):
        raise ClosestPointError("closest point is ambiguous at the sphere center")
    n = d / r[:, None]
    return surface.center + surface.radius * n, n


@closest_point.register
def _(surface: TriangleMesh, x, smooth_normals: bool = True, k0: int = 16):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    index = _mesh_index(surface)
    nf = len(surface.faces)
    out_p = np.empty_like(x)
    out_n = np.empty_like(x)
    todo = np.arange(len(x))
    k = min(k0, nf)
    V, F = surface.vertices, surface.faces
    while todo.size:
        dc, fid = index.tree.query(x[todo], k=k)
        dc = dc.reshape(len(todo), -1)
        fid = fid.reshape(len(todo), -1)
        m = fid.shape[1]
        px = np.repeat(x[todo], m, axis=0)
        f = F[fid.ravel()]
        q, bary = closest_point_triangles(px, V[f[:, 0]], V[f[:, 1]], V[f[:, 2]])
        dist = np.linalg.norm(px - q, axis=1).reshape(-1, m)
        # lowest face id among exact ties
        dmin = dist.min(axis=1)
        tie = np.isclose(dist, dmin[:, None], rtol=0, atol=1e-15 * max(1.0, dmin.max(initial=0)))
        fid_masked = np.where(tie, fid, np.iinfo(np.int64).max)
        best = np.argmin(fid_masked, axis=1)
        sel = np.arange(len(todo)) * m + best
        verified = (dc[:, -1] - index.radius >= dmin) | (m >= nf)
        rows = todo[verified]
        qsel = q[sel][verified]
        out_p[rows] = qsel
        fsel = f[sel][verified]
        if smooth_normals:
            nrm = np.einsum("nk,nkd->nd", bary[sel][verified], index.vertex_normals[fsel])
        else:
            nrm = np.cross(V[fsel[:, 1]] - V[fsel[:, 0]], V[fsel[:, 2]] - V[fsel[:, 0]])
        out_n[rows] = _normalize_rows(nrm)
        todo = todo[~verified]
        k = min(2 * k, nf)
    return out_p, out_n


@closest_point.register
def _(surface: OrientedPointCloud, x, project: bool = True):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if surface.normals is None:
        raise BandError("point cloud closest points need normals; run pointcloud_features")
    _, idx = _cloud_tree(surface).query(x)
    p = surface.points[idx]
    n = surface.normals[idx]
    if project:
        p = x - np.sum((x - p) * n, axis=1, keepdims=True) * n
    return p, n.copy()


_CLOUD_TREES: dict = {}


def _cloud_tree(cloud: OrientedPointCloud) -> cKDTree:
    hit = _CLOUD_TREES.get(id(cloud))
    if hit is not None and hit[0] is cloud:
        return hit[1]
    tree = cKDTree(cloud.points)
    if len(_CLOUD_TREES) > 16:
        _CLOUD_TREES.clear()
    _CLOUD_TREES[id(cloud)] = (cloud, tree)
    return tree


# ---------------------------------------------------------------------------
# narrow band


@dataclass
class NarrowBand:
    grid: Grid
    epsilon: float
    ijk: np.ndarray
    positions: np.ndarray
    cp: np.ndarray
    cp_normal: np.ndarray
    neighbors: np.ndarray
    interior: np.ndarray
    linear_index: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.ijk)

    @property
    def spacing(self) -> float:
        return self.grid.spacing

    @property
    def dist(self) -> np.ndarray:
        return np.linalg.norm(self.positions - self.cp, axis=1)

    def lookup(self, ijk: np.ndarray) -> np.ndarray:
        """Band index of grid nodes, MISSING where absent."""
        ijk = np.asarray(ijk, dtype=np.int64)
        inside = self.grid.contains(ijk)
        lin = self.grid.linear(np.where(inside[..., None], ijk, 0))
        pos = np.searchsorted(self.linear_index, lin)
        pos = np.minimum(pos, len(self.linear_index) - 1)
        found = inside & (self.linear_index[pos] == lin)
        return np.where(found, pos, MISSING)

    def subset(self, keep: np.ndarray) -> "NarrowBand":
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.nonzero(keep)[0]
        return _assemble(self.grid, self.epsilon, self.ijk[keep], self.cp[keep],
                         self.cp_normal[keep])


def _assemble(grid, epsilon, ijk, cp, cpn) -> NarrowBand:
    lin = grid.linear(ijk)
    order = np.argsort(lin, kind="stable")
    ijk, cp, cpn, lin = ijk[order], cp[order], cpn[order], lin[order]
    band = NarrowBand(grid=grid, epsilon=float(epsilon), ijk=ijk, positions=grid.position(ijk),
                      cp=cp, cp_normal=cpn, neighbors=np.empty((len(ijk), 6), dtype=np.int64),
                      interior=np.empty(len(ijk), dtype=bool), linear_index=lin)
    for d, off in enumerate(NEIGHBOR_OFFSETS):
        band.neighbors[:, d] = band.lookup(ijk + off)
    band.interior[:] = np.all(band.neighbors != MISSING, axis=1)
    return band


def _sample_spacing(samples: np.ndarray) -> float:
    if len(samples) < 2:
        return 0.0
    d, _ = cKDTree(samples).query(samples, k=2)
    return float(np.max(d[:, 1]))


def extract_band(grid: Grid, surface: Surface, samples: Optional[SurfaceSamples],
                 epsilon: float, check_stencil: bool = True) -> NarrowBand:
    """Grid nodes within ``epsilon`` of the surface.

    Candidates are found by scattering surface samples into grid cells and
    dilating by epsilon plus the sample spacing; each candidate is then
    confirmed with the exact closest-point map.
    """
    h = grid.spacing
    if check_stencil and epsilon < 2 * h - 1e-12:
        raise ValueError(f"epsilon {epsilon} is below two grid spacings ({2 * h})")
    if samples is None or len(samples) == 0:
        raise BandError("extract_band needs surface samples for candidate scattering")
    pts = samples.positions
    delta = _sample_spacing(pts)
    cells = np.floor((pts - grid.origin) / h).astype(np.int64)
    occ = np.zeros(grid.dims, dtype=bool)
    cells = np.clip(cells, 0, np.asarray(grid.dims) - 1)
    occ[cells[:, 0], cells[:, 1], cells[:, 2]] = True
    # a cell corner can be sqrt(3)h from a sample inside it
    reach = (epsilon + delta) / h + np.sqrt(3) + 1e-9
    m = int(np.ceil(reach))
    r = np.arange(-m, m + 1)
    ball = (r[:, None, None] ** 2 + r[None, :, None] ** 2 + r[None, None, :] ** 2) <= reach ** 2
    cand = ndimage.binary_dilation(occ, structure=ball)
    ijk = np.argwhere(cand).astype(np.int64)
    if len(ijk) == 0:
        raise BandError("no candidate band nodes")
    pos = grid.position(ijk)
    # the true distance is at least the sample distance minus the sample spacing
    ds, _ = cKDTree(pts).query(pos, distance_upper_bound=epsilon + delta + 1e-9)
    near = np.isfinite(ds)
    ijk, pos = ijk[near], pos[near]
    if len(ijk) == 0:
        raise BandError("narrow band is empty")
    cp, cpn = closest_point(surface, pos)
    dist = np.linalg.norm(pos - cp, axis=1)
    keep = dist <= epsilon
    if not keep.any():
        raise BandError("narrow band is empty")
    return _assemble(grid, epsilon, ijk[keep], cp[keep], cpn[keep])


def band_for_surface(surface: Surface, samples: SurfaceSamples, spacing: float,
                     epsilon: float, margin: Optional[float] = None) -> NarrowBand:
    lo, hi = surface.bbox()
    margin = epsilon + 3 * spacing if margin is None else margin
    grid = build_grid(lo, hi, spacing, margin, epsilon)
    return extract_band(grid, surface, samples, epsilon)


def coverage_max_epsilon(spacing: float, k: int) -> float:
    """Largest band half-width for which k-node stencils can still cover the band."""
    if k < 1 or not spacing > 0:
        raise ValueError("need k >= 1 and spacing > 0")
    return spacing * (3.0 * k / (4.0 * np.pi)) ** (1.0 / 3.0)


# the bound is a continuum volume count; on the lattice a band at exactly the
# bound can leave a few nodes outside every stencil
COVERAGE_SAFETY = 0.9


def default_epsilon(spacing: float, k: int, factor: float = 3.0) -> float:
    return min(factor * spacing, COVERAGE_SAFETY * coverage_max_epsilon(spacing, k))


# ---------------------------------------------------------------------------
# boundaries


@dataclass(frozen=True)
class PlaneCut:
    """Keeps the part of the surface where sign * (x[axis] - level) >= 0."""

    axis: int
    level: float
    sign: float = 1.0

    def signed(self, p: np.ndarray) -> np.ndarray:
        return self.sign * (np.asarray(p)[..., self.axis] - self.level)


@dataclass
class BoundarySpec:
    cut: PlaneCut
    g: Callable[[np.ndarray], np.ndarray]
    tol: Optional[float] = None


@dataclass
class BoundaryTags:
    indices: np.ndarray
    values: np.ndarray

    def __len__(self):
        return len(self.indices)

    def apply(self, field_values: np.ndarray) -> np.ndarray:
        field_values[self.indices] = self.values
        return field_values


def rim_points(surface: Surface, cut: PlaneCut, p: np.ndarray, iters: int = 3) -> np.ndarray:
    """Approximate nearest points of the cut curve (surface ∩ plane) to surface points p."""
    q = np.array(p, dtype=float, copy=True)
    for _ in range(iters):
        q[:, cut.axis] = cut.level
        q, _ = closest_point(surface, q)
    q[:, cut.axis] = cut.level
    return q


def boundary_tag(band: NarrowBand, spec: Optional[BoundarySpec],
                 surface: Optional[Surface] = None) -> BoundaryTags:
    """Tag nodes whose closest point lies past the cut, within ``tol``.

    Clamp values are ``g`` at the nearest point of the cut curve. With no
    spec the tag set is empty.
    """
    if spec is None:
        return BoundaryTags(np.zeros(0, dtype=np.int64), np.zeros(0))
    tol = 2.0 * band.spacing if spec.tol is None else spec.tol
    s = spec.cut.signed(band.cp)
    idx = np.nonzero((s < 0) & (s >= -tol))[0]
    if idx.size == 0:
        log.warning("boundary spec given but no band node was tagged")
        return BoundaryTags(idx, np.zeros(0))
    rim = rim_points(surface, spec.cut, band.cp[idx]) if surface is not None else band.cp[idx].copy()
    if surface is None:
        rim[:, spec.cut.axis] = spec.cut.level
    vals = np.asarray(spec.g(rim), dtype=float).reshape(-1)
    return BoundaryTags(idx, vals)


def cut_band(band: NarrowBand, spec: BoundarySpec) -> NarrowBand:
    """Drop nodes whose closest point lies further than ``tol`` past the cut."""
    tol = 2.0 * band.spacing if spec.tol is None else spec.tol
    keep = spec.cut.signed(band.cp) >= -tol
    return band.subset(keep)


def dump_band_csv(band: NarrowBand, values: Optional[np.ndarray], path) -> None:
    vals = np.zeros(len(band)) if values is None else np.asarray(values)
    data = np.column_stack([band.ijk, band.positions, band.cp, vals])
    header = "ix,iy,iz,x,y,z,cp_x,cp_y,cp_z,value"
    fmt = ["%d"] * 3 + ["%.10g"] * 7
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt=fmt)
