"""Float TIFF point clouds to ADTN tensors.

Scanner exports store organized point clouds as 3-channel float TIFF;
the conversion is a lossless value copy, except that pixels containing
NaN collapse to the all-zero triple, the container's invalid-point
convention.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import tifffile

from . import adtn
from .backbone import ExportError


class TiffLayoutError(ExportError):
    """TIFF is not a 3-channel float image."""


def convert_tiff(src: str | Path, dst: str | Path | None = None) -> np.ndarray:
    """Read a 3-channel float TIFF; optionally write it as an ADTN tensor."""
    try:
        arr = tifffile.imread(src)
    except FileNotFoundError:
        raise
    except Exception as exc:  # reader errors are all layout problems to us
        raise TiffLayoutError(f"{src}: unreadable TIFF ({exc})") from exc
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise TiffLayoutError(
            f"{src}: expected an H x W x 3 image, got shape {arr.shape}")
    if arr.dtype not in (np.float32, np.float64):
        raise TiffLayoutError(f"{src}: expected float samples, got {arr.dtype}")
    arr = np.ascontiguousarray(arr)
    bad = np.isnan(arr).any(axis=2)
    if bad.any():
        arr[bad] = 0.0
    if dst is not None:
        adtn.write_tensor(arr, dst)
    return arr
