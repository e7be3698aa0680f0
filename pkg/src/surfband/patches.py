"""Surface-centered patches: center placement, local frames and stencils."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .band import NarrowBand, coverage_max_epsilon
from .geometry import SurfaceSamples

log = logging.getLogger(__name__)


class PatchError(RuntimeError):
    pass


@dataclass(frozen=True)
class LocalFrame:
    """Origin on the surface and rows (n, t1, t2) of an orthonormal basis."""

    center: np.ndarray
    axes: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.axes, dtype=float)
        if a.shape != (3, 3):
            raise ValueError("frame axes must be 3x3")
        if not np.allclose(a @ a.T, np.eye(3), atol=1e-5):
            raise ValueError("frame axes are not orthonormal")

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.axes))

    @classmethod
    def from_sample(cls, position, normal, t1) -> "LocalFrame":
        n = np.asarray(normal, dtype=float)
        n = n / np.linalg.norm(n)
        t1 = np.asarray(t1, dtype=float)
        t1 = t1 - (t1 @ n) * n
        t1 = t1 / np.linalg.norm(t1)
        return cls(np.asarray(position, dtype=float), np.stack([n, t1, np.cross(n, t1)]))


def to_local(frame: LocalFrame, points: np.ndarray, normals: Optional[np.ndarray] = None):
    p = (np.asarray(points) - frame.center) @ frame.axes.T
    if normals is None:
        return p
    return p, np.asarray(normals) @ frame.axes.T


def from_local(frame: LocalFrame, points: np.ndarray, normals: Optional[np.ndarray] = None):
    p = np.asarray(points) @ frame.axes + frame.center
    if normals is None:
        return p
    return p, np.asarray(normals) @ frame.axes


@dataclass
class Patch:
    """One local unit of computation.

    ``band_local`` and the position half of ``feat_local`` are in world
    length units; ``scale`` is the length the operator divides by before
    its encoders see them (the grid spacing).
    """

    frame: LocalFrame
    band_idx: np.ndarray
    band_local: np.ndarray
    feat_local: np.ndarray
    scale: float = 1.0

    @property
    def k(self) -> int:
        return len(self.band_idx)

    @property
    def n_features(self) -> int:
        return len(self.feat_local)


def place_patch_centers(samples: SurfaceSamples, spacing: float, seed: int = 0,
                        k_nn: int = 8) -> np.ndarray:
    """Greedy flood fill over the sample k-NN graph.

    A popped sample becomes a center when it is at least ``spacing`` from
    every accepted center. When the frontier empties, restart from the
    lowest-index unvisited sample so every component gets centers.
    Returns indices into ``samples``.
    """
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    pts = samples.positions
    n = len(pts)
    if n == 0:
        raise PatchError("no samples")
    kk = min(k_nn + 1, n)
    _, nbr = cKDTree(pts).query(pts, k=kk)
    nbr = nbr.reshape(n, -1)
    rng = np.random.default_rng(seed)
    start = int(rng.integers(n))
    visited = np.zeros(n, dtype=bool)
    cells: dict = {}
    centers = []

    def far_enough(p):
        c = np.floor(p / spacing).astype(int)
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for j in cells.get((c[0] + dx, c[1] + dy, c[2] + dz), ()):
                        if np.sum((pts[j] - p) ** 2) < spacing * spacing:
                            return False
        return True

    next_unvisited = 0
    while True:
        queue = deque([start])
        visited[start] = True
        while queue:
            i = queue.popleft()
            if far_enough(pts[i]):
                centers.append(i)
                key = tuple(np.floor(pts[i] / spacing).astype(int))
                cells.setdefault(key, []).append(i)
            for j in nbr[i]:
                if not visited[j]:
                    visited[j] = True
                    queue.append(j)
        while next_unvisited < n and visited[next_unvisited]:
            next_unvisited += 1
        if next_unvisited >= n:
            break
        start = next_unvisited
    centers = np.array(centers, dtype=np.int64)
    if len(centers) == 1 and n > 1:
        log.warning("patch spacing %.3g exceeds the shape size; a single center was placed", spacing)
    return centers


def _knn_lowest_index(tree: cKDTree, x: np.ndarray, k: int) -> np.ndarray:
    # over-query so distance ties at the k-th place resolve to the lowest index
    m = min(k + 16, tree.n)
    d, idx = tree.query(x, k=m)
    order = np.lexsort((idx, np.round(d, 12)))
    return np.sort(idx[order[:k]])


def build_patch(center: int, band: NarrowBand, samples: SurfaceSamples, k: int,
                margin: Optional[float] = None, max_features: Optional[int] = 256,
                band_tree: Optional[cKDTree] = None, sample_tree: Optional[cKDTree] = None,
                seed: int = 0) -> Patch:
    """Patch at sample ``center``: its k nearest band nodes plus nearby features.

    ``margin`` dilates the bounding box of the stencil when gathering
    surface features (default 10% of the box diagonal). Features beyond
    ``max_features`` are subsampled with a seeded generator.
    """
    if len(band) < k:
        raise PatchError(f"band has {len(band)} nodes, fewer than k={k}")
    axes = samples.subset(np.array([center])).frames()[0]
    frame = LocalFrame(samples.positions[center].copy(), axes)
    band_tree = cKDTree(band.positions) if band_tree is None else band_tree
    idx = _knn_lowest_index(band_tree, frame.center, k)
    nodes = band.positions[idx]
    lo, hi = nodes.min(axis=0), nodes.max(axis=0)
    if margin is None:
        margin = 0.1 * float(np.linalg.norm(hi - lo))
    lo, hi = lo - margin, hi + margin
    sample_tree = cKDTree(samples.positions) if sample_tree is None else sample_tree
    half = 0.5 * (hi - lo)
    cand = np.array(sample_tree.query_ball_point(0.5 * (lo + hi), float(np.linalg.norm(half))),
                    dtype=np.int64)
    if cand.size:
        p = samples.positions[cand]
        cand = cand[np.all((p >= lo) & (p <= hi), axis=1)]
    if cand.size == 0:
        raise PatchError("patch has no surface features inside its bounding box")
    cand = np.sort(cand)
    if max_features is not None and cand.size > max_features:
        rng = np.random.default_rng([seed, int(center)])
        cand = np.sort(rng.choice(cand, max_features, replace=False))
    fp, fn = to_local(frame, samples.positions[cand], samples.normals[cand])
    return Patch(frame=frame, band_idx=idx, band_local=to_local(frame, nodes),
                 feat_local=np.hstack([fp, fn]), scale=band.spacing)


@dataclass
class PatchSet:
    patches: list
    centers: np.ndarray
    k: int
    spacing: float

    def __len__(self):
        return len(self.patches)

    def __iter__(self):
        return iter(self.patches)

    def coverage_count(self, n_nodes: int) -> np.ndarray:
        cnt = np.zeros(n_nodes, dtype=np.int64)
        for p in self.patches:
            cnt[p.band_idx] += 1
        return cnt

    @property
    def center_positions(self) -> np.ndarray:
        return np.array([p.frame.center for p in self.patches])


def default_patch_spacing(grid_spacing: float, k: int, factor: float = 0.5) -> float:
    return factor * coverage_max_epsilon(grid_spacing, k)


def build_patches(band: NarrowBand, samples: SurfaceSamples, k: int = 400,
                  spacing: Optional[float] = None, seed: int = 0, margin: Optional[float] = None,
                  max_features: Optional[int] = 256, repair: bool = True) -> PatchSet:
    """Place centers and build every patch; optionally add centers until all nodes are covered."""
    if band.epsilon > coverage_max_epsilon(band.spacing, k) + 1e-12:
        log.warning("band width %.4g exceeds the coverage bound for k=%d", band.epsilon, k)
    spacing = default_patch_spacing(band.spacing, k) if spacing is None else spacing
    centers = list(place_patch_centers(samples, spacing, seed))
    btree = cKDTree(band.positions)
    stree = cKDTree(samples.positions)
    patches = [build_patch(c, band, samples, k, margin, max_features, btree, stree, seed)
               for c in centers]
    ps = PatchSet(patches, np.array(centers), k, spacing)
    if repair:
        # add centers at the surface points below uncovered nodes until no progress
        miss = np.nonzero(ps.coverage_count(len(band)) == 0)[0]
        while miss.size:
            log.info("adding patches to cover %d uncovered band nodes", miss.size)
            _, cs = stree.query(band.cp[miss])
            for c in np.unique(cs):
                ps.patches.append(build_patch(int(c), band, samples, k, margin, max_features,
                                              btree, stree, seed))
            ps.centers = np.append(ps.centers, np.unique(cs))
            left = np.nonzero(ps.coverage_count(len(band)) == 0)[0]
            if left.size == miss.size:
                log.warning("%d band nodes remain uncovered; reduce epsilon or raise k",
                            left.size)
                break
            miss = left
    return ps


def random_rotation(seed) -> np.ndarray:
    return Rotation.random(random_state=np.random.default_rng(seed)).as_matrix()


def augment_rotate(patch: Patch, seed=None, rotation: Optional[np.ndarray] = None) -> Patch:
    """Rotate stencil and features jointly; the frame records the composed axes."""
    R = random_rotation(seed) if rotation is None else np.asarray(rotation)
    feat = np.hstack([patch.feat_local[:, :3] @ R.T, patch.feat_local[:, 3:] @ R.T])
    frame = LocalFrame(patch.frame.center, R @ patch.frame.axes)
    return replace(patch, frame=frame, band_local=patch.band_local @ R.T, feat_local=feat)


def dump_centers_xyz(patches: Sequence[Patch], path) -> None:
    c = np.array([p.frame.center for p in patches])
    n = np.array([p.frame.axes[0] for p in patches])
    np.savetxt(path, np.hstack([c, n]), fmt="%.10g")
