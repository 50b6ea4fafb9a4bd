"""Patch descriptor grids.

Every descriptor maps a scan to a ``PatchFeatureGrid``: one feature
vector per patch of an 8x8-pixel tiling, 28x28 patches at the default
224 resolution.  Depth descriptors read the Z channel; FPFH works on
the valid 3D points and is invariant to rigid motion of the cloud.

Histogram votes in the angle features are linearly split between the
two nearest bins.  That keeps every descriptor continuous in the point
coordinates, which is what bounds the drift under rotated inputs; a
hard assignment would jump a full bin for an epsilon change of an
angle sitting on a bin edge.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .geometry import PointSet, NormalField
from .io import OrganizedPointCloud

PATCH = 8  # pixel edge of one patch cell
DEFAULT_GRID = 28

HOG_BINS = 8
SIFT_SPATIAL_BINS = 4
SIFT_ORI_BINS = 8
SIFT_BIN_PX = 4.0
SIFT_SIGMA = 8.0
SIFT_CLAMP = 0.2
SIFT_DOM_BINS = 36

_EPS_NORM = 1e-12


@dataclass
class PatchFeatureGrid:
    """G x G x D grid of patch feature vectors plus the method tag."""

    values: np.ndarray
    method: str

    def __post_init__(self) -> None:
        if self.values.ndim != 3 or self.values.shape[0] != self.values.shape[1]:
            raise ValueError(f"grid must be GxGxD, got {self.values.shape}")
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)

    @property
    def grid_size(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1, self.values.shape[2])


@dataclass
class FpfhParams:
    radius: float = 0.25
    max_nn: int = 100
    bins_per_angle: int = 11
    normal_radius: float = 0.05
    normal_max_nn: int = 30
    viewpoint: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def dim(self) -> int:
        return 3 * self.bins_per_angle


def pool_to_grid(dense: np.ndarray, grid_size: int = DEFAULT_GRID) -> np.ndarray:
    """Average-pool an H x W x D map onto a grid_size^2 grid.

    Block boundaries are floor(i * H / G), so all cells get at least one
    pixel and equal blocks fall out when H is a multiple of G.
    """
    if dense.ndim != 3:
        raise ValueError(f"expected HxWxD, got {dense.shape}")
    h, w, _ = dense.shape
    if h < grid_size or w < grid_size:
        raise ValueError(f"cannot pool {h}x{w} onto {grid_size}x{grid_size}")
    rb = (np.arange(grid_size + 1) * h) // grid_size
    cb = (np.arange(grid_size + 1) * w) // grid_size
    acc = np.add.reduceat(dense.astype(np.float64), rb[:-1], axis=0)
    acc = np.add.reduceat(acc, cb[:-1], axis=1)
    area = np.diff(rb)[:, None] * np.diff(cb)[None, :]
    return (acc / area[:, :, None]).astype(np.float32)


def raw_depth_patches(depth: np.ndarray) -> PatchFeatureGrid:
    """Flattened 8x8 depth patches, row-major within the patch."""
    h, w = depth.shape
    if h % PATCH or w % PATCH or h != w:
        raise ValueError(f"depth must be square with side a multiple of {PATCH}")
    g = h // PATCH
    vals = depth.reshape(g, PATCH, g, PATCH).transpose(0, 2, 1, 3).reshape(g, g, PATCH * PATCH)
    return PatchFeatureGrid(values=vals.astype(np.float32), method="raw")


def raw_rgb_patches(rgb: np.ndarray) -> PatchFeatureGrid:
    """Raw color control: flattened 8x8 patches of all three channels."""
    h, w, c = rgb.shape
    if c != 3 or h % PATCH or w % PATCH or h != w:
        raise ValueError(f"rgb must be square HxWx3 with side a multiple of {PATCH}")
    g = h // PATCH
    scaled = rgb.astype(np.float32) / 255.0
    vals = scaled.reshape(g, PATCH, g, PATCH, 3).transpose(0, 2, 1, 3, 4)
    return PatchFeatureGrid(values=vals.reshape(g, g, PATCH * PATCH * 3),
                            method="rgb_raw")


# ----------------------------------------------------------------------- hog

def _l2_normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    norm = np.sqrt((v * v).sum(axis=axis, keepdims=True))
    return v / np.maximum(norm, _EPS_NORM)


def hog_depth(depth: np.ndarray) -> PatchFeatureGrid:
    """Oriented-gradient histograms: 8 unsigned bins per 8x8 cell, and a
    2x2 cell block per patch (clamped at the last row/column), L2
    normalized to 32 dimensions."""
    h, w = depth.shape
    if h % PATCH or w % PATCH or h != w:
        raise ValueError(f"depth must be square with side a multiple of {PATCH}")
    g = h // PATCH
    gy, gx = np.gradient(depth.astype(np.float64))
    mag = np.hypot(gx, gy)
    ori = np.arctan2(gy, gx) % np.pi  # unsigned orientation in [0, pi)
    bins = np.minimum((ori / (np.pi / HOG_BINS)).astype(np.int64), HOG_BINS - 1)

    rows, cols = np.divmod(np.arange(h * w), w)
    cell = (rows // PATCH) * g + (cols // PATCH)
    flat = np.bincount(cell * HOG_BINS + bins.ravel(), weights=mag.ravel(),
                       minlength=g * g * HOG_BINS)
    cells = flat.reshape(g, g, HOG_BINS)

    r1 = np.minimum(np.arange(g) + 1, g - 1)
    block = np.concatenate([cells,
                            cells[:, r1, :],
                            cells[r1, :, :],
                            cells[r1][:, r1, :]], axis=2)
    return PatchFeatureGrid(values=_l2_normalize(block).astype(np.float32),
                            method="hog")


# --------------------------------------------------------------------- dsift

def dsift_depth(depth: np.ndarray) -> PatchFeatureGrid:
    """Dense SIFT on depth: one 128-dim descriptor per 8x8 anchor.

    Each descriptor is aligned to its dominant gradient direction, then
    gradients in a rotated 16x16 support are soft-assigned into 4x4
    spatial x 8 orientation bins, normalized, clamped at 0.2 and
    renormalized.
    """
    h, w = depth.shape
    if h % PATCH or w % PATCH or h != w:
        raise ValueError(f"depth must be square with side a multiple of {PATCH}")
    g = h // PATCH
    gy, gx = np.gradient(depth.astype(np.float64))
    mag = np.hypot(gx, gy)
    ori = np.arctan2(gy, gx) % (2 * np.pi)

    half = SIFT_SPATIAL_BINS * SIFT_BIN_PX / 2  # 8 px
    reach = int(np.ceil(half * np.sqrt(2))) + 1
    offs = np.arange(-reach, reach + 1)
    dom_width = 2 * np.pi / SIFT_DOM_BINS

    out = np.zeros((g, g, SIFT_SPATIAL_BINS, SIFT_SPATIAL_BINS, SIFT_ORI_BINS))
    for p in range(g):
        cr = p * PATCH + (PATCH - 1) / 2
        rr = np.round(cr).astype(int) + offs
        rok = (rr >= 0) & (rr < h)
        for q in range(g):
            cc = q * PATCH + (PATCH - 1) / 2
            jj = np.round(cc).astype(int) + offs
            cok = (jj >= 0) & (jj < w)
            r2d, c2d = np.meshgrid(rr[rok], jj[cok], indexing="ij")
            dy = r2d - cr
            dx = c2d - cc
            m = mag[r2d, c2d]
            if not m.any():
                continue
            o = ori[r2d, c2d]
            gauss = np.exp(-(dx * dx + dy * dy) / (2 * SIFT_SIGMA ** 2))
            wgt = m * gauss

            dom_hist = np.bincount(
                np.minimum((o / dom_width).astype(np.int64), SIFT_DOM_BINS - 1).ravel(),
                weights=wgt.ravel(), minlength=SIFT_DOM_BINS)
            theta = (np.argmax(dom_hist) + 0.5) * dom_width

            ct, st = np.cos(-theta), np.sin(-theta)
            x = ct * dx - st * dy
            y = st * dx + ct * dy
            keep = (np.abs(x) <= half) & (np.abs(y) <= half)
            if not keep.any():
                continue
            x, y = x[keep], y[keep]
            rel = (o[keep] - theta) % (2 * np.pi)
            wk = wgt[keep]

            rbin = y / SIFT_BIN_PX + (SIFT_SPATIAL_BINS - 1) / 2
            cbin = x / SIFT_BIN_PX + (SIFT_SPATIAL_BINS - 1) / 2
            obin = rel / (2 * np.pi / SIFT_ORI_BINS)
            r0 = np.floor(rbin).astype(np.int64)
            c0 = np.floor(cbin).astype(np.int64)
            o0 = np.floor(obin).astype(np.int64)
            fr, fc, fo = rbin - r0, cbin - c0, obin - o0

            desc = np.zeros(SIFT_SPATIAL_BINS * SIFT_SPATIAL_BINS * SIFT_ORI_BINS)
            for dr, wr in ((r0, 1 - fr), (r0 + 1, fr)):
                rin = (dr >= 0) & (dr < SIFT_SPATIAL_BINS)
                for dc, wc in ((c0, 1 - fc), (c0 + 1, fc)):
                    cin = rin & (dc >= 0) & (dc < SIFT_SPATIAL_BINS)
                    if not cin.any():
                        continue
                    for do, wo in ((o0, 1 - fo), (o0 + 1, fo)):
                        ob = do % SIFT_ORI_BINS
                        idx = (dr[cin] * SIFT_SPATIAL_BINS + dc[cin]) * SIFT_ORI_BINS + ob[cin]
                        desc += np.bincount(idx, weights=(wk * wr * wc * wo)[cin],
                                            minlength=desc.size)
            out[p, q] = desc.reshape(SIFT_SPATIAL_BINS, SIFT_SPATIAL_BINS, SIFT_ORI_BINS)

    flat = out.reshape(g, g, -1)
    flat = _l2_normalize(flat)
    flat = np.minimum(flat, SIFT_CLAMP)
    flat = _l2_normalize(flat)
    return PatchFeatureGrid(values=flat.astype(np.float32), method="dsift")


# ---------------------------------------------------------------------- fpfh

def _soft_votes(x: np.ndarray, lo: float, hi: float, nbins: int,
                circular: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split unit votes linearly between the two nearest bins."""
    pos = (x - lo) / (hi - lo) * nbins - 0.5
    b = np.floor(pos).astype(np.int64)
    f = pos - b
    if circular:
        b0 = b % nbins
        b1 = (b + 1) % nbins
    else:
        b0 = np.clip(b, 0, nbins - 1)
        b1 = np.clip(b + 1, 0, nbins - 1)
    return b0, b1, f


def _pair_angles(p_src: np.ndarray, n_src: np.ndarray, p_tgt: np.ndarray,
                 n_tgt: np.ndarray):
    """Darboux-frame angle features for point pairs.

    Returns (alpha, phi, theta, keep) where ``keep`` drops coincident
    pairs and pairs whose displacement is parallel to the source normal
    (the frame is undefined there).
    """
    d = p_tgt - p_src
    dist = np.sqrt((d * d).sum(axis=1))
    u = n_src
    v = np.cross(d, u)
    vn = np.sqrt((v * v).sum(axis=1))
    keep = (dist > 0) & (vn > dist * 1e-9)
    safe_d = np.maximum(dist, _EPS_NORM)[:, None]
    safe_v = np.maximum(vn, _EPS_NORM)[:, None]
    v = v / safe_v
    w = np.cross(u, v)
    alpha = (v * n_tgt).sum(axis=1)
    phi = (u * d).sum(axis=1) / safe_d[:, 0]
    theta = np.arctan2((w * n_tgt).sum(axis=1), (u * n_tgt).sum(axis=1))
    return alpha, phi, theta, keep, dist


def _spfh_histogram(alpha, phi, theta, src, n_points, nbins) -> np.ndarray:
    """Accumulate per-point angle histograms; rows are unnormalized."""
    hists = np.zeros((n_points, 3 * nbins))
    for col, (vals, lo, hi, circ) in enumerate(
            [(alpha, -1.0, 1.0, False), (phi, -1.0, 1.0, False),
             (theta, -np.pi, np.pi, True)]):
        b0, b1, f = _soft_votes(vals, lo, hi, nbins, circ)
        base = src * (3 * nbins) + col * nbins
        part = np.bincount(base + b0, weights=1 - f, minlength=n_points * 3 * nbins)
        part += np.bincount(base + b1, weights=f, minlength=n_points * 3 * nbins)
        hists += part.reshape(n_points, 3 * nbins)
    return hists


def spfh(p_index: int, ps: PointSet, nf: NormalField, neighbors: np.ndarray,
         bins_per_angle: int = 11) -> np.ndarray:
    """Simplified point feature histogram of one point against its
    neighbors; each of the three sub-histograms sums to 100."""
    neighbors = np.asarray(neighbors, dtype=np.int64)
    if neighbors.size == 0:
        return np.zeros(3 * bins_per_angle)
    pts = ps.points.astype(np.float64)
    nrm = nf.normals.astype(np.float64)
    p_src = np.broadcast_to(pts[p_index], (neighbors.size, 3))
    n_src = np.broadcast_to(nrm[p_index], (neighbors.size, 3))
    alpha, phi, theta, keep, _ = _pair_angles(p_src, n_src, pts[neighbors],
                                              nrm[neighbors])
    if not keep.any():
        return np.zeros(3 * bins_per_angle)
    src = np.zeros(int(keep.sum()), dtype=np.int64)
    hist = _spfh_histogram(alpha[keep], phi[keep], theta[keep], src, 1,
                           bins_per_angle)[0]
    return hist * (100.0 / keep.sum())


def fpfh_points(ps: PointSet, params: FpfhParams) -> np.ndarray:
    """Per-point FPFH descriptors: own SPFH plus the distance-weighted
    mean of the neighbors' SPFHs."""
    n = len(ps)
    nbins = params.bins_per_angle
    out = np.zeros((n, 3 * nbins))
    if n == 0:
        return out
    nf = geo.estimate_normals(ps, params.normal_radius, params.normal_max_nn,
                              np.asarray(params.viewpoint, dtype=np.float64))
    index = geo.build_index(ps)
    nbr_idx, nbr_dist = geo._batched_neighbors(index, params.radius, params.max_nn)
    have = np.isfinite(nbr_dist)

    src = np.repeat(np.arange(n), have.sum(axis=1))
    tgt = nbr_idx[have]
    pts = index.points
    nrm = nf.normals.astype(np.float64)

    alpha, phi, theta, keep, dist = _pair_angles(pts[src], nrm[src], pts[tgt],
                                                 nrm[tgt])
    src, tgt, dist = src[keep], tgt[keep], dist[keep]
    alpha, phi, theta = alpha[keep], phi[keep], theta[keep]
    counts = np.bincount(src, minlength=n)

    hist = _spfh_histogram(alpha, phi, theta, src, n, nbins)
    nonzero = counts > 0
    spfh_all = np.zeros_like(hist)
    spfh_all[nonzero] = hist[nonzero] * (100.0 / counts[nonzero])[:, None]

    # distance-weighted neighbor term, chunked over source segments
    acc = np.zeros_like(spfh_all)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    block = 4096
    for i0 in range(0, n, block):
        i1 = min(i0 + block, n)
        lo, hi = bounds[i0], bounds[i1]
        if lo == hi:
            continue
        contrib = spfh_all[tgt[lo:hi]] / dist[lo:hi, None]
        local = bounds[i0:i1] - lo
        seg = np.flatnonzero(counts[i0:i1])
        if seg.size:
            acc[i0 + seg] = np.add.reduceat(contrib, local[seg])
    out = spfh_all.copy()
    out[nonzero] += acc[nonzero] / counts[nonzero, None]
    return out


def fpfh_grid(cloud: OrganizedPointCloud, params: FpfhParams | None = None,
              grid_size: int = DEFAULT_GRID) -> PatchFeatureGrid:
    """FPFH descriptors of the valid points, scattered back onto the
    organized grid and average-pooled to the patch grid."""
    params = params or FpfhParams()
    ps = geo.point_set_from_cloud(cloud)
    h, w = cloud.grid.shape[:2]
    if len(ps) == 0:
        warnings.warn("no valid points, returning a zero descriptor grid")
        return PatchFeatureGrid(
            values=np.zeros((grid_size, grid_size, params.dim), dtype=np.float32),
            method="fpfh")
    feats = fpfh_points(ps, params)
    dense = np.zeros((h, w, params.dim))
    dense[ps.back_index[:, 0], ps.back_index[:, 1]] = feats
    return PatchFeatureGrid(values=pool_to_grid(dense, grid_size), method="fpfh")


def concat_features(a: PatchFeatureGrid, b: PatchFeatureGrid) -> PatchFeatureGrid:
    """Per-patch concatenation of two grids with matching layout."""
    if a.grid_size != b.grid_size:
        raise ValueError(f"grid mismatch: {a.grid_size} vs {b.grid_size}")
    return PatchFeatureGrid(values=np.concatenate([a.values, b.values], axis=2),
                            method="fused")
