"""Scan preprocessing: downsampling and background removal.

The cloud is resized by nearest-neighbor selection on the organized
grid so original coordinates are kept; RGB is resized bicubically and
ground truth by nearest neighbor.  Background removal fits a plane
through the valid points of a boundary strip, zeroes everything near
that plane, then keeps only the largest density cluster among the
survivors.  Removed points are zeroed in both the cloud and the RGB
image; the ground-truth mask is never touched.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import geometry as geo
from .io import OrganizedPointCloud, RgbImage, Sample

DEFAULT_TARGET_SIZE = 224


@dataclass
class PreprocessConfig:
    enabled: bool = True
    target_size: int = DEFAULT_TARGET_SIZE
    boundary_strip: int = 10           # pixels used for the plane fit
    plane_dist: float = 0.005          # zero points this close to the plane
    ransac_n_sample: int = 50
    ransac_iterations: int = 1000
    dbscan_eps: float = 0.006
    dbscan_min_points: int = 30
    # per-class crop shape (rows, cols) applied before resizing; classes
    # not listed are center-cropped to a square when non-square
    aspect_override: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.target_size < 28 or self.target_size % 28:
            raise ValueError(f"target_size must be a positive multiple of 28, "
                             f"got {self.target_size}")


def _nearest_map(src: int, dst: int) -> np.ndarray:
    # floor mapping keeps cell (0,0) at (0,0); upscaling is rejected upstream
    return (np.arange(dst) * src) // dst


def _center_crop(h: int, w: int, ch: int, cw: int) -> tuple[slice, slice]:
    if ch > h or cw > w:
        raise ValueError(f"crop {ch}x{cw} exceeds source {h}x{w}")
    r0 = (h - ch) // 2
    c0 = (w - cw) // 2
    return slice(r0, r0 + ch), slice(c0, c0 + cw)


def resize_sample(s: Sample, cfg: PreprocessConfig, cls: str | None = None) -> Sample:
    """Crop to the target aspect ratio and downsample to ``target_size``."""
    h, w = s.cloud.grid.shape[:2]
    if cls is not None and cls in cfg.aspect_override:
        ch, cw = cfg.aspect_override[cls]
    elif h != w:
        ch = cw = min(h, w)
    else:
        ch, cw = h, w
    rs, cs = _center_crop(h, w, ch, cw)
    grid = s.cloud.grid[rs, cs]
    rgb = s.rgb.pixels[rs, cs]
    gt = s.gt_mask[rs, cs] if s.gt_mask is not None else None

    t = cfg.target_size
    if ch < t or cw < t:
        raise ValueError(f"refusing to upscale {ch}x{cw} to {t}x{t}")
    rmap = _nearest_map(ch, t)
    cmap = _nearest_map(cw, t)
    grid = grid[rmap][:, cmap]
    gt = gt[rmap][:, cmap] if gt is not None else None
    rgb = np.asarray(Image.fromarray(rgb).resize((t, t), Image.BICUBIC))
    return Sample(cloud=OrganizedPointCloud(grid.copy()), rgb=RgbImage(rgb),
                  label=s.label, gt_mask=gt, sample_id=s.sample_id, defect=s.defect)


def _boundary_strip_points(cloud: OrganizedPointCloud, strip: int) -> geo.PointSet:
    h, w = cloud.grid.shape[:2]
    border = np.zeros((h, w), dtype=bool)
    border[:strip, :] = True
    border[h - strip:, :] = True
    border[:, :strip] = True
    border[:, w - strip:] = True
    mask = border & cloud.valid_mask & np.isfinite(cloud.grid).all(axis=2)
    rows, cols = np.nonzero(mask)
    return geo.PointSet(points=cloud.grid[rows, cols],
                        back_index=np.stack([rows, cols], axis=1))


def remove_background(s: Sample, cfg: PreprocessConfig, seed: int = 0) -> Sample:
    """Zero out the background plane and everything off the main cluster."""
    grid = s.cloud.grid.copy()
    rgb = s.rgb.pixels.copy()
    grid[~np.isfinite(grid).all(axis=2)] = 0.0

    cloud = OrganizedPointCloud(grid)
    strip_ps = _boundary_strip_points(cloud, cfg.boundary_strip)
    if len(strip_ps) >= cfg.ransac_n_sample:
        plane = geo.ransac_plane(strip_ps, n_sample=cfg.ransac_n_sample,
                                 iterations=cfg.ransac_iterations,
                                 inlier_thresh=cfg.plane_dist, seed=seed)
        valid = cloud.valid_mask
        rows, cols = np.nonzero(valid)
        near = plane.distance(grid[rows, cols]) <= cfg.plane_dist
        grid[rows[near], cols[near]] = 0.0
        rgb[rows[near], cols[near]] = 0
    else:
        warnings.warn("boundary strip too sparse for a plane fit, keeping background")

    cloud = OrganizedPointCloud(grid)
    survivors = geo.point_set_from_cloud(cloud)
    if len(survivors):
        labels = geo.dbscan(survivors, eps=cfg.dbscan_eps,
                            min_points=cfg.dbscan_min_points)
        n_clusters = labels.max() + 1
        if n_clusters <= 0:
            drop = np.ones(len(survivors), dtype=bool)
            warnings.warn("no dense cluster survived background removal")
        else:
            sizes = np.bincount(labels[labels >= 0], minlength=n_clusters)
            drop = labels != int(np.argmax(sizes))
        rr, cc = survivors.back_index[drop].T
        grid[rr, cc] = 0.0
        rgb[rr, cc] = 0
    else:
        warnings.warn("no points survived plane removal")

    return Sample(cloud=OrganizedPointCloud(grid), rgb=RgbImage(rgb), label=s.label,
                  gt_mask=s.gt_mask, sample_id=s.sample_id, defect=s.defect)


def preprocess_sample(s: Sample, cfg: PreprocessConfig, cls: str | None = None,
                      seed: int = 0) -> Sample:
    """Resize, then strip the background when preprocessing is enabled."""
    s = resize_sample(s, cfg, cls=cls)
    if cfg.enabled:
        s = remove_background(s, cfg, seed=seed)
    return s
