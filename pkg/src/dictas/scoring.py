"""Anomaly maps and image scores from query/retrieved feature stacks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage
from torch.nn import functional as F

from .losses import cosine_distance

DEFAULT_SMOOTH_SIGMA = 4.0


@dataclass
class AnomalyMap:
    map: np.ndarray
    image_score: float


def patch_distance_field(query: Sequence[torch.Tensor], retrieved: Sequence[torch.Tensor]) -> torch.Tensor:
    """Layer-averaged cosine distance scaled to [0, 1]: ``sum_l (1 - cos) / (2L)``.

    Inputs are ``(..., H, W, C)`` per layer; the result is ``(..., H, W)`` in float64.
    """
    if len(query) == 0 or len(query) != len(retrieved):
        raise ValueError("query and retrieved stacks must be non-empty with equal layer counts")
    total = 0
    for q, r in zip(query, retrieved):
        if q.shape != r.shape:
            raise ValueError(f"shape mismatch {tuple(q.shape)} vs {tuple(r.shape)}")
        total = total + cosine_distance(q.double(), r.double())
    return (total / (2 * len(query))).clamp(0.0, 1.0)


def upsample(field: torch.Tensor, out_hw: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of ``(..., H, W)`` to ``(..., h, w)``."""
    if tuple(field.shape[-2:]) == tuple(out_hw):
        return field
    lead = field.shape[:-2]
    x = field.reshape(-1, 1, *field.shape[-2:])
    x = F.interpolate(x, size=tuple(out_hw), mode="bilinear", align_corners=False)
    return x.reshape(*lead, *out_hw)


def smooth(m: np.ndarray, sigma: float) -> np.ndarray:
    if not sigma:
        return m
    return ndimage.gaussian_filter(m, sigma=sigma, mode="reflect", truncate=4.0)


def anomaly_map(
    query: Sequence[torch.Tensor],
    retrieved: Sequence[torch.Tensor],
    out_hw: tuple[int, int],
    smooth_sigma: float | None = DEFAULT_SMOOTH_SIGMA,
) -> np.ndarray:
    """Full-resolution anomaly map(s) in [0, 1].

    Accepts per-layer ``(H, W, C)`` or ``(n, H, W, C)`` tensors and returns an
    ``(h, w)`` or ``(n, h, w)`` float64 array.
    """
    with torch.no_grad():
        field = upsample(patch_distance_field(query, retrieved), out_hw).numpy()
    if smooth_sigma:
        flat = field.reshape(-1, *field.shape[-2:])
        field = np.stack([smooth(f, smooth_sigma) for f in flat]).reshape(field.shape)
    return np.clip(field, 0.0, 1.0)


def image_score(m: np.ndarray) -> float:
    """Image-level anomaly score: the map maximum."""
    m = np.asarray(m)
    if m.size == 0:
        raise ValueError("empty anomaly map")
    return float(m.max())


def to_uint16_png_values(m: np.ndarray) -> np.ndarray:
    return np.round(65535.0 * np.clip(m, 0.0, 1.0)).astype(np.uint16)


def save_map_png(path, m: np.ndarray):
    """Write ``m`` as a 16-bit grayscale PNG with value ``round(65535 * m)``."""
    from pathlib import Path

    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint16_png_values(m)).save(path, format="PNG")


def load_map_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im)
    scale = 255.0 if arr.dtype == np.uint8 else 65535.0
    return arr.astype(np.float64) / scale
