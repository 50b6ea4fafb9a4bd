"""Seeded synthetic scan generator.

Scenes are organized height fields on a 0.002 m lattice: either a
full-frame gently bumped surface or a hemisphere resting on a flat
background plane.  Geometric anomalies dent or raise a local Gaussian
patch whose slopes are several times steeper than any normal bump;
color anomalies recolor a blotch while leaving geometry untouched.

Every sample draws from three independent seeded streams (geometry,
texture, anomaly), so toggling an anomaly cannot disturb the other
draws: a color-anomalous cloud is bit-identical to the normal cloud of
the same sample slot.

Background pixels stay within 0.005 m of the z=0 plane except for the
optional wave artifacts: raised ridges on the background of test
samples, disconnected from the object, that plane-distance filtering
alone cannot remove.  They model acquisition artifacts and give the
background-removal stage something real to do.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt

from .io import write_image_u8, write_tensor

PITCH = 0.002  # lattice pitch in meters

ANOMALY_KINDS = ("geometric_dent", "geometric_bump", "color_blotch", "mixed")
SURFACE_KINDS = ("bumpy_plane", "hemisphere")

ROLE_TRAIN = "train"
ROLE_TEST_GOOD = "test_good"
ROLE_TEST_ANOM = "test_anom"
_ROLE_CODES = {ROLE_TRAIN: 0, ROLE_TEST_GOOD: 1, ROLE_TEST_ANOM: 2}

# mask footprint: cells deformed by more than this fraction of the peak
_FOOTPRINT_FRACTION = 0.25
_PALETTE = (np.array([70, 110, 180], dtype=np.int16),
            np.array([205, 160, 85], dtype=np.int16))


@dataclass
class SynthSpec:
    n_train: int = 50
    n_test_good: int = 20
    n_test_anom: int = 20
    size: int = 224
    anomaly_kind: str = "geometric_dent"
    surface_kind: str = "bumpy_plane"
    noise_std: float = 5e-4
    background_wave: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.n_train, self.n_test_good, self.n_test_anom) < 1:
            raise ValueError("sample counts must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.size < 32:
            raise ValueError("size must be >= 32")
        if self.anomaly_kind not in ANOMALY_KINDS:
            raise ValueError(f"anomaly_kind must be one of {ANOMALY_KINDS}")
        if self.surface_kind not in SURFACE_KINDS:
            raise ValueError(f"surface_kind must be one of {SURFACE_KINDS}")
        if self.background_wave and self.surface_kind != "hemisphere":
            raise ValueError("wave artifacts need a background plane "
                             "(surface_kind=hemisphere)")


def _streams(spec: SynthSpec, role: str, index: int):
    base = np.random.SeedSequence([spec.seed, _ROLE_CODES[role], index])
    geom, color, anomaly = base.spawn(3)
    return (np.random.default_rng(geom), np.random.default_rng(color),
            np.random.default_rng(anomaly))


def _pixel_grid(size: int):
    return np.meshgrid(np.arange(size, dtype=np.float64),
                       np.arange(size, dtype=np.float64), indexing="ij")


def _surface(spec: SynthSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    """Base height field in meters plus the object-pixel mask."""
    size = spec.size
    ii, jj = _pixel_grid(size)
    if spec.surface_kind == "bumpy_plane":
        z = np.full((size, size), 0.003)
        for _ in range(int(rng.integers(4, 9))):
            cr, cc = rng.uniform(0, size - 1, 2)
            amp = rng.uniform(0.004, 0.010)
            sig = rng.uniform(0.10, 0.18) * size
            z += amp * np.exp(-((ii - cr) ** 2 + (jj - cc) ** 2) / (2 * sig * sig))
        return z, np.ones((size, size), dtype=bool)
    # hemisphere on the z=0 plane
    center = (size - 1) / 2
    radius = 0.38 * size * PITCH
    d = np.hypot(ii - center, jj - center) * PITCH
    dome = d < radius
    z = np.zeros((size, size))
    z[dome] = np.sqrt(radius * radius - d[dome] ** 2)
    return z, dome


def _wave_field(spec: SynthSpec, rng, object_mask: np.ndarray) -> np.ndarray:
    """Raised ridges on the background, kept clear of the object so the
    cluster filter can separate them."""
    size = spec.size
    ii, jj = _pixel_grid(size)
    clearance = distance_transform_edt(~object_mask)
    allowed = clearance >= 8.0
    field = np.zeros((size, size))
    anchor_rows, anchor_cols = np.nonzero(clearance >= 20.0)
    if anchor_rows.size == 0:  # frame too tight for a clear ridge
        return field
    for _ in range(int(rng.integers(3, 6))):
        at = int(rng.integers(anchor_rows.size))
        p0 = np.array([anchor_rows[at], anchor_cols[at]], dtype=np.float64)
        theta = rng.uniform(0, np.pi)
        u = np.array([np.cos(theta), np.sin(theta)])
        along = (ii - p0[0]) * u[0] + (jj - p0[1]) * u[1]
        perp = (ii - p0[0]) * -u[1] + (jj - p0[1]) * u[0]
        width = rng.uniform(2.5, 4.0)
        half_len = rng.uniform(0.12, 0.20) * size
        height = rng.uniform(0.015, 0.025)
        field += height * np.exp(-perp * perp / (2 * width * width)
                                 - (along / half_len) ** 4)
    field[~allowed] = 0.0
    return field


def _texture(spec: SynthSpec, rng) -> np.ndarray:
    """Two-tone procedural texture with mild brightness jitter."""
    size = spec.size
    ii, jj = _pixel_grid(size)
    t = np.zeros((size, size))
    for _ in range(3):
        freq = rng.uniform(2.0, 7.0) / size
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        t += np.sin(2 * np.pi * freq * (jj * np.cos(theta) + ii * np.sin(theta))
                    + phase)
    rgb = np.where(t[:, :, None] > 0, _PALETTE[1], _PALETTE[0])
    rgb = rgb + rng.integers(-8, 9, size=rgb.shape, dtype=np.int16)
    return np.clip(rgb, 0, 255).astype(np.uint8)


def _patch_geometry(spec: SynthSpec, rng, object_mask: np.ndarray):
    """Center and mask radius for an anomaly patch, placed so the whole
    footprint stays on the object and inside the frame."""
    size = spec.size
    area_frac = rng.uniform(0.010, 0.060)
    mask_radius = np.sqrt(area_frac * size * size / np.pi)
    if spec.surface_kind == "hemisphere":
        dome_r = 0.38 * size
        center = (size - 1) / 2
        reach = dome_r - mask_radius - 6.0
        angle = rng.uniform(0, 2 * np.pi)
        rad = np.sqrt(rng.uniform(0, 1)) * reach
        cr = center + rad * np.sin(angle)
        cc = center + rad * np.cos(angle)
    else:
        margin = mask_radius + 4.0
        cr, cc = rng.uniform(margin, size - 1 - margin, 2)
    return cr, cc, mask_radius


def _apply_geometric(spec, rng, z, object_mask, sign: float):
    cr, cc, mask_radius = _patch_geometry(spec, rng, object_mask)
    depth = rng.uniform(0.012, 0.020)
    sigma = mask_radius / np.sqrt(2.0 * np.log(1.0 / _FOOTPRINT_FRACTION))
    ii, jj = _pixel_grid(spec.size)
    bump = depth * np.exp(-((ii - cr) ** 2 + (jj - cc) ** 2) / (2 * sigma * sigma))
    bump[~object_mask] = 0.0  # tails must not leak onto the background plane
    mask = bump > _FOOTPRINT_FRACTION * depth
    return z + sign * bump, mask


def _apply_blotch(spec, rng, rgb, object_mask):
    cr, cc, mask_radius = _patch_geometry(spec, rng, object_mask)
    ii, jj = _pixel_grid(spec.size)
    mask = (ii - cr) ** 2 + (jj - cc) ** 2 <= mask_radius * mask_radius
    shifted = rgb.copy()
    shifted[mask] = rgb[mask][:, [2, 0, 1]]  # cycle channels: 120 degree hue turn
    return shifted, mask


def build_sample(spec: SynthSpec, role: str, index: int,
                 with_anomaly: bool | None = None):
    """One synthetic sample: (cloud grid f32, rgb u8, gt mask or None).

    ``with_anomaly`` overrides the role's default, which lets callers
    compare an anomalous slot against its untouched twin.
    """
    if role not in _ROLE_CODES:
        raise ValueError(f"unknown role {role!r}")
    rng_geom, rng_color, rng_anom = _streams(spec, role, index)
    size = spec.size

    z, object_mask = _surface(spec, rng_geom)
    z = z + rng_geom.normal(0.0, spec.noise_std, size=z.shape)
    if spec.surface_kind == "hemisphere":
        bg = ~object_mask
        z[bg] = np.clip(z[bg], -0.004, 0.004)
    if spec.background_wave and role != ROLE_TRAIN:
        z = z + _wave_field(spec, rng_geom, object_mask)
    rgb = _texture(spec, rng_color)

    anomalous = (role == ROLE_TEST_ANOM) if with_anomaly is None else with_anomaly
    mask = None
    if anomalous:
        kind = spec.anomaly_kind
        if kind == "mixed":
            kind = rng_anom.choice(ANOMALY_KINDS[:3])
        if kind == "geometric_dent":
            z, mask = _apply_geometric(spec, rng_anom, z, object_mask, -1.0)
        elif kind == "geometric_bump":
            z, mask = _apply_geometric(spec, rng_anom, z, object_mask, +1.0)
        else:
            rgb, mask = _apply_blotch(spec, rng_anom, rgb, object_mask)

    ii, jj = _pixel_grid(size)
    grid = np.stack([jj * PITCH, ii * PITCH, z], axis=-1).astype(np.float32)
    return grid, rgb, mask


def _spec_lines(spec: SynthSpec, class_name: str) -> str:
    pairs = {f.name: getattr(spec, f.name) for f in fields(spec)}
    pairs["class_name"] = class_name
    return "\n".join(f"{k}={pairs[k]}" for k in sorted(pairs)) + "\n"


def generate_dataset(spec: SynthSpec, out_root: str | Path,
                     class_name: str = "synth") -> Path:
    """Write the dataset tree and echo the generator settings."""
    out_root = Path(out_root)
    plan = ([(ROLE_TRAIN, "train", "good", i) for i in range(spec.n_train)]
            + [(ROLE_TEST_GOOD, "test", "good", i) for i in range(spec.n_test_good)]
            + [(ROLE_TEST_ANOM, "test", spec.anomaly_kind, i)
               for i in range(spec.n_test_anom)])
    for role, split, defect, index in plan:
        grid, rgb, mask = build_sample(spec, role, index)
        base = out_root / class_name / split / defect
        stem = f"{index:03d}"
        (base / "xyz").mkdir(parents=True, exist_ok=True)
        (base / "rgb").mkdir(parents=True, exist_ok=True)
        write_tensor(grid, base / "xyz" / f"{stem}.adtn")
        write_image_u8(rgb, base / "rgb" / f"{stem}.png")
        if mask is not None:
            (base / "gt").mkdir(parents=True, exist_ok=True)
            write_image_u8(mask.astype(np.uint8) * 255, base / "gt" / f"{stem}.png")
    (out_root / "synth_spec.txt").write_text(_spec_lines(spec, class_name))
    return out_root
