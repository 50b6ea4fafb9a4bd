"""Spatial kernels shared by preprocessing and descriptors.

Neighbor search is a radius-bounded k-nearest query over a kd-tree.
Normals come from the smallest principal direction of each point's
neighborhood, oriented toward a viewpoint.  The covariance is taken
about displacements from the query point so that a rigid translation
of the cloud leaves the arithmetic bit-for-bit unchanged.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

NOISE = -1
_UNSEEN = -2

# neighborhoods flatter than this eigenvalue floor still get a normal;
# fewer than MIN_NORMAL_NEIGHBORS neighbors falls back to +Z
MIN_NORMAL_NEIGHBORS = 3
FALLBACK_NORMAL = np.array([0.0, 0.0, 1.0])


class InsufficientPointsError(ValueError):
    pass


@dataclass
class PointSet:
    """Flat list of valid points with their source grid coordinates."""

    points: np.ndarray  # N x 3 f32
    back_index: np.ndarray  # N x 2 int, (row, col) in the source grid

    def __post_init__(self) -> None:
        self.points = np.ascontiguousarray(self.points, dtype=np.float32)
        self.back_index = np.ascontiguousarray(self.back_index, dtype=np.int64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be Nx3, got {self.points.shape}")
        if self.back_index.shape != (self.points.shape[0], 2):
            raise ValueError("back_index must be Nx2 and match points")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class PlaneModel:
    """Plane n . p + offset = 0 with unit normal n."""

    normal: np.ndarray
    offset: float

    def distance(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return np.abs(pts @ np.asarray(self.normal, dtype=np.float64) + self.offset)


@dataclass
class NormalField:
    normals: np.ndarray  # N x 3 f32, unit length

    def __post_init__(self) -> None:
        self.normals = np.ascontiguousarray(self.normals, dtype=np.float32)


@dataclass
class SpatialIndex:
    points: np.ndarray  # N x 3 f64 working copy
    tree: cKDTree


def point_set_from_cloud(cloud) -> PointSet:
    """Flatten the valid points of an organized cloud."""
    mask = cloud.valid_mask & np.isfinite(cloud.grid).all(axis=2)
    rows, cols = np.nonzero(mask)
    return PointSet(points=cloud.grid[rows, cols],
                    back_index=np.stack([rows, cols], axis=1))


def build_index(ps: PointSet) -> SpatialIndex:
    pts = ps.points.astype(np.float64)
    return SpatialIndex(points=pts, tree=cKDTree(pts))


def radius_knn(index: SpatialIndex, q: np.ndarray, radius: float,
               max_nn: int) -> tuple[np.ndarray, np.ndarray]:
    """Up to ``max_nn`` nearest points within ``radius`` of ``q``.

    Returns (indices, distances) sorted by (distance, index).  Distances
    are inclusive of the radius.  If the query point is itself a member
    of the set (bit-equal coordinates at distance zero), that one entry
    is excluded.
    """
    if max_nn < 1:
        raise ValueError("max_nn must be >= 1")
    n = index.points.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64), np.empty(0)
    q64 = np.asarray(np.asarray(q, dtype=np.float32), dtype=np.float64)
    k = min(max_nn + 1, n)
    dist, idx = index.tree.query(q64, k=k, distance_upper_bound=np.nextafter(radius, np.inf))
    dist, idx = np.atleast_1d(dist), np.atleast_1d(idx)
    hit = np.isfinite(dist)
    idx, dist = idx[hit], dist[hit]
    # recompute exactly and re-filter so the radius bound is inclusive
    dist = np.sqrt(((index.points[idx] - q64) ** 2).sum(axis=1))
    keep = dist <= radius
    idx, dist = idx[keep], dist[keep]
    order = np.lexsort((idx, dist))
    idx, dist = idx[order], dist[order]
    if dist.size and dist[0] == 0.0:
        zero = np.nonzero(dist == 0.0)[0]
        same = zero[np.all(index.points[idx[zero]] == q64, axis=1)]
        if same.size:
            drop = same[0]  # the member instance with the lowest index
            idx = np.delete(idx, drop)
            dist = np.delete(dist, drop)
    return idx[:max_nn].astype(np.int64), dist[:max_nn]


def _batched_neighbors(index: SpatialIndex, radius: float, max_nn: int):
    """Neighbor table for every point of the indexed set, self excluded.

    Returns (idx, dist) of shape (N, max_nn); missing entries hold the
    sentinel index N and an infinite distance.
    """
    pts = index.points
    n = pts.shape[0]
    k = min(max_nn + 1, n)
    dist, idx = index.tree.query(pts, k=k, distance_upper_bound=np.nextafter(radius, np.inf))
    if k == 1:
        dist, idx = dist[:, None], idx[:, None]
    self_col = idx == np.arange(n)[:, None]
    dist = np.where(self_col, np.inf, dist)
    idx = np.where(self_col, n, idx)
    order = np.lexsort((idx, dist), axis=1)
    rows = np.arange(n)[:, None]
    dist, idx = dist[rows, order], idx[rows, order]
    return idx[:, :max_nn], dist[:, :max_nn]


def estimate_normals(ps: PointSet, radius: float, max_nn: int,
                     viewpoint: np.ndarray) -> NormalField:
    """Per-point unit normals oriented so n . (viewpoint - p) >= 0.

    The normal is the least-variance direction of the point plus its
    radius neighborhood.  Points with fewer than three neighbors get
    the +Z fallback, flipped toward the viewpoint.
    """
    pts = ps.points.astype(np.float64)
    n = pts.shape[0]
    vp = np.asarray(viewpoint, dtype=np.float64)
    if n == 0:
        return NormalField(np.empty((0, 3), dtype=np.float32))
    index = build_index(ps)
    nbr_idx, nbr_dist = _batched_neighbors(index, radius, max_nn)
    have = np.isfinite(nbr_dist)
    counts = have.sum(axis=1)

    # displacements from each query point; the point itself contributes a
    # zero row, so the neighborhood holds counts+1 points
    safe_idx = np.where(have, nbr_idx, 0)
    disp = np.where(have[:, :, None], pts[safe_idx] - pts[:, None, :], 0.0)
    m = (counts + 1).astype(np.float64)[:, None]
    mean = disp.sum(axis=1) / m[:, 0][:, None]
    centered = np.where(have[:, :, None], disp - mean[:, None, :], 0.0)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    cov += np.einsum("ni,nj->nij", -mean, -mean)  # the query point's own term
    cov /= m[:, :, None]

    normals = np.tile(FALLBACK_NORMAL, (n, 1))
    ok = counts >= MIN_NORMAL_NEIGHBORS
    if ok.any():
        _, vecs = np.linalg.eigh(cov[ok])
        normals[ok] = vecs[:, :, 0]  # eigenvalues ascending
    flip = np.einsum("ni,ni->n", normals, vp[None, :] - pts) < 0
    normals[flip] = -normals[flip]
    return NormalField(normals.astype(np.float32))


def ransac_plane(ps: PointSet, n_sample: int = 50, iterations: int = 1000,
                 inlier_thresh: float = 0.005, seed: int = 0) -> PlaneModel:
    """Best-inlier-count plane over seeded random rounds.

    Each round draws ``n_sample`` points without replacement and fits a
    least-squares plane through them (smallest right singular direction
    of the centered sample).  Rank-deficient draws are skipped.
    """
    pts = ps.points.astype(np.float64)
    n = pts.shape[0]
    if n < n_sample:
        raise InsufficientPointsError(f"need {n_sample} points for a round, have {n}")
    rng = np.random.default_rng(seed)
    best_count = -1
    best: PlaneModel | None = None
    for _ in range(iterations):
        pick = rng.choice(n, size=n_sample, replace=False)
        sample = pts[pick]
        centroid = sample.mean(axis=0)
        _, s, vt = np.linalg.svd(sample - centroid, full_matrices=False)
        if s[1] <= max(s[0], 1.0) * 1e-12:
            continue  # collinear draw, plane undetermined
        normal = vt[2]
        offset = -float(normal @ centroid)
        count = int((np.abs(pts @ normal + offset) <= inlier_thresh).sum())
        if count > best_count:
            best_count = count
            best = PlaneModel(normal=normal.copy(), offset=offset)
    if best is None:
        raise InsufficientPointsError("all rounds degenerate, no plane found")
    return best


def dbscan(ps: PointSet, eps: float = 0.006, min_points: int = 30) -> np.ndarray:
    """Density clustering; returns a label per point, ``NOISE`` (-1) for none.

    A point is core when its inclusive eps-neighborhood holds at least
    ``min_points`` points.  Border points attach to the first cluster
    that claims them in scan order.  Cluster ids are renumbered so that
    they ascend with each cluster's smallest member index.
    """
    n = len(ps)
    labels = np.full(n, _UNSEEN, dtype=np.int64)
    if n == 0:
        return labels
    index = build_index(ps)
    neighborhoods = index.tree.query_ball_point(index.points, r=eps)
    neighborhoods = [np.sort(np.asarray(nb, dtype=np.int64)) for nb in neighborhoods]
    is_core = np.array([nb.size >= min_points for nb in neighborhoods])

    cid = 0
    for i in range(n):
        if labels[i] != _UNSEEN:
            continue
        if not is_core[i]:
            labels[i] = NOISE
            continue
        labels[i] = cid
        queue = deque(neighborhoods[i])
        while queue:
            j = queue.popleft()
            if labels[j] == NOISE:
                labels[j] = cid  # border point, first cluster claims it
            if labels[j] != _UNSEEN:
                continue
            labels[j] = cid
            if is_core[j]:
                queue.extend(neighborhoods[j])
        cid += 1

    # canonical ids: ascending with the smallest member index of each cluster
    if cid > 1:
        firsts = np.full(cid, n, dtype=np.int64)
        clustered = labels >= 0
        np.minimum.at(firsts, labels[clustered], np.nonzero(clustered)[0])
        remap = np.empty(cid, dtype=np.int64)
        remap[np.argsort(firsts, kind="stable")] = np.arange(cid)
        labels[clustered] = remap[labels[clustered]]
    return labels
