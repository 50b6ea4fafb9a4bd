"""Walk a dataset tree and export one feature tensor per sample.

Datasets follow ``<root>/<class>/{train,test}/<defect>/{xyz,rgb}/<id>``;
the exporter mirrors that layout under the output root, adding a
``feat/`` directory with one ``<id>.feat.adtn`` per sample.  Inference
runs in batches, file writes stay sequential.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import adtn
from .backbone import (BackboneConfig, ExportError, extract_grid,
                       load_backbone, prepare_depth, prepare_rgb)

MODALITIES = ("rgb", "depth")
SPLITS = ("train", "test")


class DatasetError(ExportError):
    """Missing or inconsistent dataset files."""


@dataclass
class ExportJob:
    root: Path
    out: Path
    modality: str = "rgb"
    classes: list[str] = field(default_factory=list)  # empty = discover all
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self) -> None:
        self.root = Path(self.root)
        self.out = Path(self.out)
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")


def _discover_classes(root: Path) -> list[str]:
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    names = sorted(p.name for p in root.iterdir()
                   if (p / "train").is_dir() or (p / "test").is_dir())
    if not names:
        raise DatasetError(f"no class directories under {root}")
    return names


def _sample_stems(defect_dir: Path, modality: str) -> list[str]:
    sub = defect_dir / ("rgb" if modality == "rgb" else "xyz")
    if not sub.is_dir():
        return []
    exts = (".png", ".adtn") if modality == "rgb" else (".adtn",)
    return sorted({p.stem for p in sub.iterdir() if p.suffix in exts})


def _load_input(defect_dir: Path, stem: str, modality: str) -> torch.Tensor:
    if modality == "rgb":
        png = defect_dir / "rgb" / f"{stem}.png"
        if png.is_file():
            img = np.asarray(Image.open(png).convert("RGB"), dtype=np.uint8)
        else:
            img = adtn.read_tensor(defect_dir / "rgb" / f"{stem}.adtn")
        return prepare_rgb(img)
    return prepare_depth(adtn.read_tensor(defect_dir / "xyz" / f"{stem}.adtn"))


def export_features(job: ExportJob) -> list[Path]:
    """Run the backbone over every sample; returns the written paths."""
    classes = job.classes or _discover_classes(job.root)
    model = load_backbone(job.backbone)
    step = max(1, job.backbone.batch_size)
    written: list[Path] = []
    for cls in classes:
        for split in SPLITS:
            split_dir = job.root / cls / split
            if not split_dir.is_dir():
                continue
            for defect_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
                stems = _sample_stems(defect_dir, job.modality)
                if not stems:
                    continue
                out_dir = job.out / cls / split / defect_dir.name / "feat"
                out_dir.mkdir(parents=True, exist_ok=True)
                for start in range(0, len(stems), step):
                    chunk = stems[start:start + step]
                    batch = torch.stack(
                        [_load_input(defect_dir, s, job.modality) for s in chunk])
                    grids = extract_grid(model, batch)
                    for stem, grid in zip(chunk, grids):
                        path = out_dir / f"{stem}.feat.adtn"
                        adtn.write_tensor(grid, path)
                        written.append(path)
    if not written:
        raise DatasetError(f"no samples with {job.modality} inputs under {job.root}")
    return written
