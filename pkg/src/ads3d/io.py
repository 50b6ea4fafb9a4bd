"""Tensor file format, dataset layout and sample loading.

The on-disk tensor format ("ADTN") is a little-endian binary container:

    magic   4 bytes  b"ADTN"
    version u8       currently 1
    dtype   u8       0=f32, 1=f64, 2=u8, 3=u16
    ndim    u8
    reserved u8      0
    dims    ndim x u64
    payload row-major array data

Datasets live under ``<root>/<class>/<split>/<defect>/{xyz,rgb,gt}/``
where split is "train" or "test" and the train split only contains the
"good" defect directory.  Clouds are H x W x 3 f32 ADTN tensors, RGB
images and ground-truth masks are 8-bit PNG (or u8 ADTN).
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

MAGIC = b"ADTN"
FORMAT_VERSION = 1

# dtype code <-> numpy dtype, little-endian enforced on disk
_DTYPE_CODES = {0: "<f4", 1: "<f8", 2: "u1", 3: "<u2"}
_CODE_FOR_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1,
                  np.dtype(np.uint8): 2, np.dtype(np.uint16): 3}

# refuse to allocate tensors past this element count when reading
_MAX_ELEMENTS = 1 << 40

MASK_THRESHOLD = 127  # mask pixel is anomalous iff value > this


class AdtnError(Exception):
    """Base class for tensor container format errors."""


class BadMagicError(AdtnError):
    pass


class UnsupportedDtypeError(AdtnError):
    pass


class TruncatedPayloadError(AdtnError):
    pass


class DimOverflowError(AdtnError):
    """Dimension list is empty, contains zeros, or describes an absurd size."""


class DataError(Exception):
    """Dataset-level problem: missing file or inconsistent sample."""


class MissingFileError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


def write_tensor(arr: np.ndarray, path: str | Path) -> None:
    """Write an array to an ADTN container file."""
    dt = np.dtype(arr.dtype)
    if dt not in _CODE_FOR_KIND:
        raise UnsupportedDtypeError(f"cannot serialize dtype {dt}")
    if arr.ndim == 0 or arr.ndim > 255:
        raise DimOverflowError(f"need 1..255 dimensions, got {arr.ndim}")
    if any(d == 0 for d in arr.shape):
        raise DimOverflowError(f"zero-sized dimension in {arr.shape}")
    code = _CODE_FOR_KIND[dt]
    header = struct.pack("<4sBBBB", MAGIC, FORMAT_VERSION, code, arr.ndim, 0)
    dims = np.asarray(arr.shape, dtype="<u8").tobytes()
    payload = np.ascontiguousarray(arr).astype(_DTYPE_CODES[code], copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dims)
        fh.write(payload)


def read_tensor(path: str | Path) -> np.ndarray:
    """Read an ADTN container file back into a numpy array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise TruncatedPayloadError(f"{path}: file shorter than header")
    magic, version, code, ndim, _ = struct.unpack("<4sBBBB", raw[:8])
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedDtypeError(f"{path}: unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise UnsupportedDtypeError(f"{path}: unknown dtype code {code}")
    if ndim == 0:
        raise DimOverflowError(f"{path}: tensor has no dimensions")
    dim_bytes = raw[8:8 + 8 * ndim]
    if len(dim_bytes) < 8 * ndim:
        raise TruncatedPayloadError(f"{path}: header cut short")
    dims = tuple(int(d) for d in np.frombuffer(dim_bytes, dtype="<u8"))
    if any(d == 0 for d in dims):
        raise DimOverflowError(f"{path}: zero-sized dimension in {dims}")
    count = 1
    for d in dims:
        count *= d
    if count > _MAX_ELEMENTS:
        raise DimOverflowError(f"{path}: {count} elements overflow sanity cap")
    dt = np.dtype(_DTYPE_CODES[code])
    payload = raw[8 + 8 * ndim:]
    if len(payload) < count * dt.itemsize:
        raise TruncatedPayloadError(
            f"{path}: expected {count * dt.itemsize} payload bytes, got {len(payload)}")
    arr = np.frombuffer(payload[:count * dt.itemsize], dtype=dt).reshape(dims)
    # native byte order for downstream math
    return arr.astype(dt.newbyteorder("="), copy=True)


@dataclass
class OrganizedPointCloud:
    """Grid of XYZ coordinates; all-zero triples mark invalid points."""

    grid: np.ndarray  # H x W x 3 f32

    def __post_init__(self) -> None:
        if self.grid.ndim != 3 or self.grid.shape[2] != 3:
            raise DimensionMismatchError(f"cloud grid must be HxWx3, got {self.grid.shape}")
        self.grid = np.ascontiguousarray(self.grid, dtype=np.float32)

    @property
    def valid_mask(self) -> np.ndarray:
        return np.any(self.grid != 0, axis=2)

    @property
    def depth(self) -> np.ndarray:
        """Z channel of the grid."""
        return self.grid[:, :, 2]


@dataclass
class RgbImage:
    pixels: np.ndarray  # H x W x 3 u8

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DimensionMismatchError(f"rgb must be HxWx3, got {self.pixels.shape}")
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)


@dataclass
class Sample:
    """One scan: cloud + RGB, plus label and ground truth for test samples."""

    cloud: OrganizedPointCloud
    rgb: RgbImage
    label: str  # "normal" or "anomalous"
    gt_mask: np.ndarray | None = None  # H x W bool, test samples only
    sample_id: str = ""
    defect: str = field(default="good")

    def __post_init__(self) -> None:
        if self.cloud.grid.shape[:2] != self.rgb.pixels.shape[:2]:
            raise DimensionMismatchError(
                f"cloud {self.cloud.grid.shape[:2]} vs rgb {self.rgb.pixels.shape[:2]}")
        if self.gt_mask is not None:
            self.gt_mask = np.ascontiguousarray(self.gt_mask, dtype=bool)
            if self.gt_mask.shape != self.cloud.grid.shape[:2]:
                raise DimensionMismatchError(
                    f"gt {self.gt_mask.shape} vs cloud {self.cloud.grid.shape[:2]}")


def read_image_u8(path: Path) -> np.ndarray:
    """Read an RGB image or mask stored as PNG or as a u8 ADTN tensor."""
    if path.suffix == ".adtn":
        arr = read_tensor(path)
        if arr.dtype != np.uint8:
            raise DimensionMismatchError(f"{path}: expected u8 image tensor")
        return arr
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB") if img.mode not in ("L", "RGB") else img)


def write_image_u8(arr: np.ndarray, path: Path) -> None:
    Image.fromarray(arr).save(path)


def _resolve(directory: Path, stem: str, exts: tuple[str, ...]) -> Path | None:
    for ext in exts:
        p = directory / f"{stem}{ext}"
        if p.exists():
            return p
    return None


def find_sample_ids(root: str | Path, cls: str, split: str) -> list[tuple[str, str]]:
    """List (defect, stem) pairs for a class split, sorted for determinism."""
    base = Path(root) / cls / split
    if not base.is_dir():
        raise MissingFileError(f"no split directory {base}")
    out = []
    for defect_dir in sorted(p for p in base.iterdir() if p.is_dir()):
        xyz = defect_dir / "xyz"
        if not xyz.is_dir():
            continue
        for f in sorted(xyz.iterdir()):
            if f.suffix in (".adtn", ".tiff", ".tif"):
                out.append((defect_dir.name, f.stem))
    return out


def load_sample(root: str | Path, cls: str, split: str, sample_id: str) -> Sample:
    """Load one sample; ``sample_id`` is "<defect>/<stem>" or a bare stem.

    A bare stem is searched across defect directories in sorted order.
    Test samples always carry a ground-truth mask; "good" test samples
    without a mask file get an all-false one.
    """
    base = Path(root) / cls / split
    if "/" in sample_id:
        defect, stem = sample_id.split("/", 1)
        candidates = [(defect, stem)]
    else:
        if not base.is_dir():
            raise MissingFileError(f"no split directory {base}")
        candidates = [(d.name, sample_id) for d in sorted(base.iterdir()) if d.is_dir()]
    for defect, stem in candidates:
        xyz_path = _resolve(base / defect / "xyz", stem, (".adtn",))
        if xyz_path is not None:
            break
    else:
        raise MissingFileError(f"no cloud for sample {sample_id!r} under {base}")

    grid = read_tensor(xyz_path)
    if grid.ndim != 3 or grid.shape[2] != 3:
        raise DimensionMismatchError(f"{xyz_path}: cloud must be HxWx3, got {grid.shape}")
    cloud = OrganizedPointCloud(grid.astype(np.float32, copy=False))

    rgb_path = _resolve(base / defect / "rgb", stem, (".png", ".adtn"))
    if rgb_path is None:
        raise MissingFileError(f"no rgb image for sample {defect}/{stem} under {base}")
    rgb = RgbImage(read_image_u8(rgb_path))

    label = "normal" if defect == "good" else "anomalous"
    gt_mask = None
    if split == "test":
        gt_path = _resolve(base / defect / "gt", stem, (".png", ".adtn"))
        if gt_path is not None:
            raw_mask = read_image_u8(gt_path)
            if raw_mask.ndim == 3:
                raw_mask = raw_mask[:, :, 0]
            gt_mask = raw_mask > MASK_THRESHOLD
        else:
            if label == "anomalous":
                raise MissingFileError(f"anomalous sample {defect}/{stem} lacks a gt mask")
            gt_mask = np.zeros(grid.shape[:2], dtype=bool)

    sample = Sample(cloud=cloud, rgb=rgb, label=label, gt_mask=gt_mask,
                    sample_id=stem, defect=defect)
    if label == "anomalous" and gt_mask is not None and not gt_mask.any():
        raise DataError(f"anomalous sample {defect}/{stem} has an empty gt mask")
    if label == "normal" and gt_mask is not None and gt_mask.any():
        warnings.warn(f"normal sample {defect}/{stem} has marked gt pixels")
    return sample
