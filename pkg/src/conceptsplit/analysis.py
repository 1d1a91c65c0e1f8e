"""Attention diagnostics: entropy trajectories, mask overlap, graymap export."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ContractError


@dataclass
class EntropySeries:
    label: str
    steps: list[int] = field(default_factory=list)
    values: list[float] = field(default_factory=list)

    def append(self, t: int, h: float) -> None:
        self.steps.append(t)
        self.values.append(h)

    def __len__(self):
        return len(self.values)


def attention_entropy(slice_) -> float:
    """Entropy (nats) of the softmax over all cells of an attention map.

    The softmax, not sum-normalization, is deliberate: it is the
    normalization used when comparing entropy trends across methods, and it
    keeps the value defined for any real-valued map.
    """
    x = np.asarray(slice_, dtype=np.float64).reshape(-1)
    s = x - x.max()
    logp = s - math.log(np.exp(s).sum())
    p = np.exp(logp)
    return float(max(0.0, -(p * logp).sum()))


def entropy_delta(series) -> float:
    """Mean of consecutive differences of an entropy trajectory."""
    vals = series.values if isinstance(series, EntropySeries) else list(series)
    if len(vals) < 2:
        raise ContractError(f"entropy_delta needs at least 2 values, got {len(vals)}")
    return float(np.mean(np.diff(np.asarray(vals, dtype=np.float64))))


def mask_iou(a, b) -> float:
    """Intersection over union of two binary masks; two empty masks give 0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ContractError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def both_attended(masks, max_iou: float = 0.5) -> bool:
    """Every target mask nonempty and every pairwise IoU below ``max_iou``."""
    masks = list(masks)
    if any(not np.any(m) for m in masks):
        return False
    return all(mask_iou(masks[i], masks[j]) < max_iou
               for i in range(len(masks)) for j in range(i + 1, len(masks)))


# ---------------------------------------------------------------- images

def quantize(slice_) -> np.ndarray:
    """Min-max scale to 0..255; a constant map becomes mid-gray."""
    a = np.asarray(slice_, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi - lo <= 0:
        return np.full(a.shape, 128, dtype=np.uint8)
    return np.round((a - lo) / (hi - lo) * 255.0).astype(np.uint8)


def grid(slices, pad: int = 1) -> np.ndarray:
    """Quantize each map separately and tile them left to right with white gutters."""
    tiles = [quantize(s) for s in slices]
    h = max(t.shape[0] for t in tiles)
    parts = []
    for i, t in enumerate(tiles):
        if i:
            parts.append(np.full((h, pad), 255, dtype=np.uint8))
        canvas = np.zeros((h, t.shape[1]), dtype=np.uint8)
        canvas[:t.shape[0]] = t
        parts.append(canvas)
    return np.concatenate(parts, axis=1)


def write_pgm(path, pixels: np.ndarray) -> Path:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5 {w} {h} 255\n".encode())
        fh.write(pixels.tobytes())
    return path


def export_map(slice_, path) -> Path:
    """Write one map (2-D) or a side-by-side grid (list of maps) as binary PGM."""
    if isinstance(slice_, (list, tuple)):
        return write_pgm(path, grid(slice_))
    return write_pgm(path, quantize(slice_))


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos].decode())
    pos += 1
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    return np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()


def write_ppm(path, image) -> Path:
    """RGB preview of a 4-channel image in [0, 1] (texture channel dropped)."""
    rgb = np.round(np.clip(np.asarray(image)[..., :3], 0, 1) * 255).astype(np.uint8)
    h, w, _ = rgb.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P6 {w} {h} 255\n".encode())
        fh.write(rgb.tobytes())
    return path


def entropy_series_from_records(records, labels) -> list[EntropySeries]:
    out = [EntropySeries(str(lab)) for lab in labels]
    for rec in records:
        for s, h in zip(out, rec["entropy"]):
            s.append(rec["step"], h)
    return out
