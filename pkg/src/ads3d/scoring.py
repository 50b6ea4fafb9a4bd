"""Nearest-neighbor scoring against a bank of normal patch features.

The bank is the flat set of all training patch vectors.  A test patch
scores as its mean Euclidean distance to the k nearest bank vectors
(k=1 by default), the image score is the largest patch score, and the
rendered map upsamples patch scores to pixel resolution.

Candidate neighbors are found with the blocked inner-product expansion
of squared distances; the distances actually reported are recomputed
exactly for the selected candidates, so identical vectors score 0.0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .io import read_tensor, write_tensor
from .descriptors import PatchFeatureGrid

_QUERY_BLOCK = 256


@dataclass
class MemoryBank:
    """M x D bank of normal patch vectors; frozen after construction."""

    vectors: np.ndarray
    method: str

    def __post_init__(self) -> None:
        # private copy so freezing never leaks back to the caller's array
        self.vectors = np.array(self.vectors, dtype=np.float32, order="C")
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ValueError(f"bank must be MxD with M >= 1, got {self.vectors.shape}")
        self.vectors.flags.writeable = False

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class PatchScores:
    scores: np.ndarray  # G x G f32, >= 0

    def __post_init__(self) -> None:
        self.scores = np.ascontiguousarray(self.scores, dtype=np.float32)
        if self.scores.ndim != 2:
            raise ValueError(f"scores must be GxG, got {self.scores.shape}")
        if not np.isfinite(self.scores).all() or (self.scores < 0).any():
            raise ValueError("patch scores must be finite and non-negative")


@dataclass
class AnomalyMap:
    map: np.ndarray  # H x W f32
    image_score: float


def fit_memory_bank(grids: list[PatchFeatureGrid]) -> MemoryBank:
    """Collect every patch vector of the training grids, in grid order."""
    if not grids:
        raise ValueError("need at least one feature grid")
    dim = grids[0].dim
    for g in grids:
        if g.dim != dim:
            raise ValueError(f"feature dim mismatch: {g.dim} != {dim}")
    return MemoryBank(vectors=np.concatenate([g.flat() for g in grids], axis=0),
                      method=grids[0].method)


def coreset_select(bank: MemoryBank, ratio: float, seed: int = 0) -> MemoryBank:
    """Greedy farthest-point subset of ceil(ratio * M) vectors.

    The first pick is uniform under the seed; each following pick is the
    vector farthest from the current selection, so the selection's
    covering radius equals the next pick's gain.  Rows come back in
    selection order.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    m = len(bank)
    target = math.ceil(ratio * m)
    if target >= m:
        return MemoryBank(vectors=bank.vectors.copy(), method=bank.method)
    vecs = bank.vectors.astype(np.float64)
    chosen = np.empty(target, dtype=np.int64)
    chosen[0] = np.random.default_rng(seed).integers(m)
    min_d2 = ((vecs - vecs[chosen[0]]) ** 2).sum(axis=1)
    for t in range(1, target):
        chosen[t] = np.argmax(min_d2)
        min_d2 = np.minimum(min_d2, ((vecs - vecs[chosen[t]]) ** 2).sum(axis=1))
    return MemoryBank(vectors=bank.vectors[chosen], method=bank.method)


def _exact_distances(queries: np.ndarray, vectors: np.ndarray,
                     idx: np.ndarray) -> np.ndarray:
    """Plain Euclidean distances between queries and chosen bank rows."""
    diff = queries[:, None, :] - vectors[idx]
    return np.sqrt((diff * diff).sum(axis=2))


def score_sample(bank: MemoryBank, grid: PatchFeatureGrid, k: int = 1) -> PatchScores:
    """Mean distance from each patch to its k nearest bank vectors."""
    if grid.dim != bank.dim:
        raise ValueError(f"feature dim mismatch: {grid.dim} != {bank.dim}")
    if not 1 <= k <= len(bank):
        raise ValueError(f"k must be in [1, {len(bank)}], got {k}")
    queries = grid.flat().astype(np.float64)
    vecs = bank.vectors.astype(np.float64)
    b_sq = (vecs * vecs).sum(axis=1)
    out = np.empty(queries.shape[0])
    for lo in range(0, queries.shape[0], _QUERY_BLOCK):
        q = queries[lo:lo + _QUERY_BLOCK]
        d2 = (q * q).sum(axis=1)[:, None] + b_sq[None, :] - 2.0 * (q @ vecs.T)
        cand = np.argpartition(d2, k - 1, axis=1)[:, :k]
        dist = _exact_distances(q, vecs, cand)
        out[lo:lo + _QUERY_BLOCK] = dist.mean(axis=1)
    g = grid.grid_size
    return PatchScores(scores=out.reshape(g, g).astype(np.float32))


def image_score(ps: PatchScores) -> float:
    return float(ps.scores.max())


def render_anomaly_map(ps: PatchScores, out_size: int = 224,
                       sigma: float = 4.0) -> AnomalyMap:
    """Bilinear upsample of the patch scores plus optional Gaussian blur.

    The image score is the maximum patch score, taken before smoothing.
    """
    g = ps.scores.shape[0]
    if out_size % g:
        raise ValueError(f"out_size {out_size} not divisible by grid {g}")
    score = image_score(ps)
    src = np.clip((np.arange(out_size) + 0.5) * g / out_size - 0.5, 0, g - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, g - 1)
    f = src - i0
    rows = ps.scores.astype(np.float64)
    rows = rows[i0, :] * (1 - f)[:, None] + rows[i1, :] * f[:, None]
    full = rows[:, i0] * (1 - f)[None, :] + rows[:, i1] * f[None, :]
    if sigma > 0:
        full = gaussian_filter(full, sigma=sigma)
    return AnomalyMap(map=full.astype(np.float32), image_score=score)


def save_bank(bank: MemoryBank, path: str | Path,
              meta: dict[str, object] | None = None) -> None:
    """ADTN vectors next to a key=value sidecar holding the method tag
    and any fit settings worth echoing (k, coreset ratio, seed)."""
    path = Path(path)
    write_tensor(bank.vectors, path)
    fields = {"method": bank.method}
    fields.update({k: str(v) for k, v in (meta or {}).items()})
    lines = [f"{k}={fields[k]}" for k in sorted(fields)]
    Path(str(path) + ".meta").write_text("\n".join(lines) + "\n")


def load_bank(path: str | Path) -> tuple[MemoryBank, dict[str, str]]:
    path = Path(path)
    vectors = read_tensor(path)
    meta: dict[str, str] = {}
    sidecar = Path(str(path) + ".meta")
    if sidecar.exists():
        for line in sidecar.read_text().splitlines():
            line = line.strip()
            if line and "=" in line:
                key, _, value = line.partition("=")
                meta[key] = value
    return MemoryBank(vectors=vectors, method=meta.get("method", "unknown")), meta
