"""Wide residual backbone slice producing 28 x 28 patch feature grids.

A feature grid is the channel concatenation of the second and third
residual stages (512 + 1024 = 1536 channels): each stage output is
locally averaged over a 3 x 3 neighborhood, the coarser stage is
bilinearly upsampled to the finer one, and the joint map is average
pooled onto a fixed 28 x 28 layout.  Inputs are normalized with the
ImageNet channel statistics regardless of modality.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torchvision.models import wide_resnet50_2

INPUT_SIZE = 224
GRID_SIZE = 28
FEATURE_DIM = 1536

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ExportError(Exception):
    """Base class for exporter failures."""


class MissingWeightsError(ExportError):
    """Backbone weights are neither cached locally nor reachable."""


class InputSizeError(ExportError):
    """Input did not come out at the expected resolution after resizing."""


@dataclass
class BackboneConfig:
    """How to obtain and run the feature backbone.

    ``weights`` is ``"pretrained"`` (torchvision cache or download), a
    filesystem path to a state dict, or ``"random"`` for a seeded fresh
    initialization.  Random weights are only useful for plumbing tests;
    the grids they produce carry no meaning.
    """

    weights: str = "pretrained"
    seed: int = 0
    batch_size: int = 8


def load_backbone(cfg: BackboneConfig) -> torch.nn.Module:
    torch.manual_seed(cfg.seed)  # fixes "random" init; overwritten otherwise
    model = wide_resnet50_2(weights=None)
    if cfg.weights == "pretrained":
        from torchvision.models import Wide_ResNet50_2_Weights
        try:
            state = Wide_ResNet50_2_Weights.IMAGENET1K_V1.get_state_dict(progress=False)
        except Exception as exc:
            raise MissingWeightsError(
                "pretrained backbone weights are not cached and could not be "
                "downloaded; pass --weights <state-dict path> or use random init"
            ) from exc
        model.load_state_dict(state)
    elif cfg.weights != "random":
        path = Path(cfg.weights)
        if not path.is_file():
            raise MissingWeightsError(f"weights file not found: {path}")
        model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    model.eval()
    return model


@torch.no_grad()
def extract_grid(model: torch.nn.Module, batch: torch.Tensor) -> np.ndarray:
    """Map a normalized (B, 3, 224, 224) batch to (B, 28, 28, 1536) f32 grids."""
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise InputSizeError(f"expected a (B, 3, H, W) batch, got {tuple(batch.shape)}")
    if batch.shape[-2:] != (INPUT_SIZE, INPUT_SIZE):
        raise InputSizeError(
            f"backbone input must be {INPUT_SIZE} x {INPUT_SIZE} after resizing, "
            f"got {tuple(batch.shape[-2:])}")
    x = model.conv1(batch)
    x = model.bn1(x)
    x = model.relu(x)
    x = model.maxpool(x)
    x = model.layer1(x)
    f2 = model.layer2(x)
    f3 = model.layer3(f2)
    f2 = F.avg_pool2d(f2, kernel_size=3, stride=1, padding=1)
    f3 = F.avg_pool2d(f3, kernel_size=3, stride=1, padding=1)
    f3 = F.interpolate(f3, size=f2.shape[-2:], mode="bilinear", align_corners=False)
    feat = torch.cat([f2, f3], dim=1)
    feat = F.adaptive_avg_pool2d(feat, (GRID_SIZE, GRID_SIZE))
    return feat.permute(0, 2, 3, 1).contiguous().numpy().astype(np.float32, copy=False)


def _normalize(stack: np.ndarray) -> torch.Tensor:
    # stack is (H, W, 3) float in [0, 1]
    mean = np.asarray(IMAGENET_MEAN, dtype=np.float32)
    std = np.asarray(IMAGENET_STD, dtype=np.float32)
    return torch.from_numpy(((stack - mean) / std).transpose(2, 0, 1).copy())


def prepare_rgb(img: np.ndarray) -> torch.Tensor:
    """Resize an (H, W, 3) u8 image to the backbone input and normalize."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise InputSizeError(f"expected an (H, W, 3) image, got {img.shape}")
    pil = Image.fromarray(np.ascontiguousarray(img), mode="RGB")
    if pil.size != (INPUT_SIZE, INPUT_SIZE):
        pil = pil.resize((INPUT_SIZE, INPUT_SIZE), Image.Resampling.BICUBIC)
    return _normalize(np.asarray(pil, dtype=np.float32) / 255.0)


def prepare_depth(xyz: np.ndarray) -> torch.Tensor:
    """Turn an (H, W, 3) point cloud into a 3-channel depth image tensor.

    The z channel is min-max normalized over the valid points (a pixel
    is invalid when its whole xyz triple is zero), invalid pixels go to
    0, and the result is replicated to three channels so the color
    backbone applies unchanged.
    """
    if xyz.ndim != 3 or xyz.shape[2] != 3:
        raise InputSizeError(f"expected an (H, W, 3) point cloud, got {xyz.shape}")
    z = xyz[:, :, 2].astype(np.float32)
    valid = np.any(xyz != 0.0, axis=2)
    depth = np.zeros_like(z)
    if valid.any():
        lo = float(z[valid].min())
        hi = float(z[valid].max())
        if hi > lo:
            depth[valid] = (z[valid] - lo) / (hi - lo)
        else:
            depth[valid] = 1.0  # constant depth still distinct from background
    pil = Image.fromarray(depth, mode="F")
    if pil.size != (INPUT_SIZE, INPUT_SIZE):
        pil = pil.resize((INPUT_SIZE, INPUT_SIZE), Image.Resampling.BICUBIC)
    one = np.asarray(pil, dtype=np.float32)
    return _normalize(np.stack([one, one, one], axis=2))


def spatial_flatness(grid: np.ndarray, boundary: int = 2) -> float:
    """Largest per-channel spatial std over the interior cells, relative
    to the mean feature magnitude.  Near 0 for spatially constant grids."""
    core = grid[boundary:-boundary, boundary:-boundary, :]
    std = core.reshape(-1, core.shape[-1]).std(axis=0)
    scale = float(np.abs(core).mean())
    if scale == 0.0:
        return 0.0
    return float(std.max() / scale)
