"""Online construction of self-supervised training pairs.

The query image gets a Perlin-noise-shaped anomaly blended in from an anomaly
source image. Reference images are geometric/occlusion transforms of the same
raw image. All randomness flows from explicit integer seeds so samples can be
produced in any order (or in parallel workers) and still be reproducible.

Images are float arrays of shape ``(h, w, 3)`` with values in ``[0, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

# stream ids for seed derivation
_STREAM_QUERY = 1
_STREAM_REFERENCE = 2
_STREAM_MODE = 3


def derive_seed(seed: int, *counters: int) -> int:
    """Counter-based sub-seed: ``SeedSequence([seed, len(counters), *counters])`` -> 63-bit int.

    The counter count is part of the entropy because SeedSequence ignores
    trailing zero words, which would make ``(s, 1)`` and ``(s, 1, 0)`` collide.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, len(counters), *(int(c) for c in counters)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6 - 15) + 10)


def perlin_noise(h: int, w: int, r_x: int, r_y: int, seed: int) -> np.ndarray:
    """Gradient-lattice Perlin noise of shape ``(h, w)``.

    ``r_y`` lattice cells span the height and ``r_x`` the width. Unit gradients
    are drawn at the ``(r_y + 1) x (r_x + 1)`` lattice corners; values vanish on
    lattice points and stay within ``[-sqrt(2)/2, sqrt(2)/2]``.
    """
    if h <= 0 or w <= 0:
        raise ValueError(f"noise size must be positive, got {h}x{w}")
    if r_x < 1 or r_y < 1:
        raise ValueError(f"noise resolution must be >= 1, got ({r_x}, {r_y})")
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * rng.random((r_y + 1, r_x + 1))
    grads = np.stack([np.cos(angles), np.sin(angles)], axis=-1)

    ys = np.arange(h) * (r_y / h)
    xs = np.arange(w) * (r_x / w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]

    def corner(dy, dx):
        g = grads[(y0 + dy)[:, None], (x0 + dx)[None, :]]
        return g[..., 0] * (fy - dy) + g[..., 1] * (fx - dx)

    u, v = _fade(fy), _fade(fx)
    top = corner(0, 0) * (1 - v) + corner(0, 1) * v
    bottom = corner(1, 0) * (1 - v) + corner(1, 1) * v
    return top * (1 - u) + bottom * u


@dataclass
class SynthesisConfig:
    """Anomaly synthesis parameters.

    ``noise_resolutions`` holds the candidate lattice sizes for each axis;
    ``blend_range`` bounds the per-sample blend factor. A fixed ``blend``
    overrides the range.
    """

    noise_resolutions: tuple[int, ...] = (1, 2, 4, 8)
    binarize_threshold: float = 0.5
    blend_range: tuple[float, float] = (0.2, 0.8)
    blend: float | None = None
    normal_probability: float = 0.5
    max_attempts: int = 100

    def __post_init__(self):
        if any(r < 1 for r in self.noise_resolutions):
            raise ValueError("noise resolutions must be >= 1")
        lo, hi = self.blend_range
        if not 0 <= lo <= hi <= 1:
            raise ValueError(f"invalid blend range {self.blend_range}")
        if self.blend is not None and not 0 <= self.blend <= 1:
            raise ValueError(f"blend must lie in [0, 1], got {self.blend}")
        if not 0 <= self.normal_probability <= 1:
            raise ValueError("normal_probability must lie in [0, 1]")


@dataclass
class ReferenceTransformConfig:
    """Reference-image augmentation probabilities and sizes."""

    rotate90_p: float = 1.0
    rotate_p: float = 1.0
    rotate_limit: tuple[float, float] = (30.0, 270.0)
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    grid_dropout_p: float = 0.5
    grid_dropout_ratio: float = 0.3
    coarse_dropout_p: float = 0.5
    coarse_max_holes: int = 8
    coarse_max_size: int = 32
    # cyclic shift by up to translate_max of each side; off by default
    translate_p: float = 0.0
    translate_max: float = 0.5


@dataclass
class SyntheticSample:
    query_image: np.ndarray
    mask: np.ndarray
    label: int
    reference_images: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.mask.dtype != np.uint8 or not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask must be a binary uint8 array")
        if self.label != int(self.mask.any()):
            raise ValueError("label must be 1 exactly when the mask is non-empty")


def blend_anomaly(x: np.ndarray, a: np.ndarray, mask: np.ndarray, gamma: float) -> np.ndarray:
    """``gamma*(G*A) + (1-gamma)*(G*X) + (1-G)*X`` with ``G`` the binary mask."""
    g = mask.astype(x.dtype)[..., None]
    return gamma * (g * a) + (1 - gamma) * (g * x) + (1 - g) * x


def binarize_noise(noise: np.ndarray, threshold: float) -> np.ndarray:
    """Min-max rescale ``noise`` to [0, 1] and threshold it into a uint8 mask."""
    lo, hi = noise.min(), noise.max()
    if hi <= lo:
        return np.zeros(noise.shape, np.uint8)
    return ((noise - lo) / (hi - lo) > threshold).astype(np.uint8)


def resize_image(img: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    if img.shape[:2] == tuple(hw):
        return img
    zoom = (hw[0] / img.shape[0], hw[1] / img.shape[1]) + (1,) * (img.ndim - 2)
    out = ndimage.zoom(img, zoom, order=1, mode="nearest", grid_mode=True)
    if out.shape[:2] != tuple(hw):
        raise ValueError(f"could not resize {img.shape[:2]} to {tuple(hw)}")
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def synthesize_query(
    x: np.ndarray,
    a: np.ndarray,
    cfg: SynthesisConfig,
    seed: int,
    anomalous: bool | None = None,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Blend a Perlin-shaped region of ``a`` into ``x``.

    With probability ``cfg.normal_probability`` (or when ``anomalous`` is False)
    the query is returned unchanged with an empty mask. Otherwise noise is
    resampled until the binarised mask is non-empty and not the whole image.

    Returns:
        ``(query_image, mask, label)``.
    """
    rng = np.random.default_rng(seed)
    if a.shape != x.shape:
        a = resize_image(a, x.shape[:2])
        if a.shape != x.shape:
            raise ValueError("anomaly source does not match the image size")
    h, w = x.shape[:2]
    if anomalous is None:
        anomalous = rng.random() >= cfg.normal_probability
    if not anomalous:
        return x.copy(), np.zeros((h, w), np.uint8), 0
    for _ in range(cfg.max_attempts):
        r_x = int(rng.choice(cfg.noise_resolutions))
        r_y = int(rng.choice(cfg.noise_resolutions))
        noise = perlin_noise(h, w, r_x, r_y, int(rng.integers(2**63)))
        mask = binarize_noise(noise, cfg.binarize_threshold)
        if 0 < mask.sum() < mask.size:
            break
    else:
        raise RuntimeError("could not draw a non-empty anomaly mask; lower synthesis.binarize_threshold")
    gamma = cfg.blend if cfg.blend is not None else float(rng.uniform(*cfg.blend_range))
    return blend_anomaly(x, a, mask, gamma).astype(x.dtype), mask, 1


# ---------------------------------------------------------------------------
# reference transforms


def rotate90(img: np.ndarray, k: int) -> np.ndarray:
    """Rotate by ``k`` quarter turns counter-clockwise (square images keep their size)."""
    out = np.rot90(img, k, axes=(0, 1))
    if out.shape != img.shape:
        # keep dimensions fixed for non-square inputs
        out = resize_image(np.ascontiguousarray(out), img.shape[:2])
    return np.ascontiguousarray(out)


def rotate(img: np.ndarray, angle: float) -> np.ndarray:
    """Rotate about the centre by ``angle`` degrees, reflecting at the border."""
    out = ndimage.rotate(img, angle, axes=(1, 0), reshape=False, order=1, mode="mirror")
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def translate(img: np.ndarray, max_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Cyclic shift by up to ``max_fraction`` of the height/width in each direction."""
    h, w = img.shape[:2]
    dy = int(rng.integers(-int(h * max_fraction), int(h * max_fraction) + 1))
    dx = int(rng.integers(-int(w * max_fraction), int(w * max_fraction) + 1))
    return np.roll(img, (dy, dx), axis=(0, 1))


def grid_dropout(img: np.ndarray, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Zero a regular grid of square holes covering ``ratio`` of each grid unit's side."""
    h, w = img.shape[:2]
    unit = int(rng.integers(2, max(3, min(h, w) // 2 + 1)))
    hole = max(1, int(round(unit * ratio)))
    sy, sx = rng.integers(0, unit, size=2)
    out = img.copy()
    rows = (np.arange(h) - sy) % unit < hole
    cols = (np.arange(w) - sx) % unit < hole
    out[np.ix_(rows, cols)] = 0
    return out


def coarse_dropout(img: np.ndarray, max_holes: int, max_size: int, rng: np.random.Generator) -> np.ndarray:
    """Zero up to ``max_holes`` random rectangles of side at most ``max_size``."""
    h, w = img.shape[:2]
    out = img.copy()
    for _ in range(int(rng.integers(1, max_holes + 1))):
        hh = int(rng.integers(1, min(max_size, h) + 1))
        ww = int(rng.integers(1, min(max_size, w) + 1))
        y = int(rng.integers(0, h - hh + 1))
        x = int(rng.integers(0, w - ww + 1))
        out[y : y + hh, x : x + ww] = 0
    return out


def transform_reference(x: np.ndarray, seed: int, cfg: ReferenceTransformConfig | None = None) -> np.ndarray:
    cfg = cfg or ReferenceTransformConfig()
    rng = np.random.default_rng(seed)
    out = x
    if rng.random() < cfg.rotate90_p:
        out = rotate90(out, int(rng.integers(0, 4)))
    if rng.random() < cfg.rotate_p:
        out = rotate(out, float(rng.uniform(*cfg.rotate_limit)))
    if rng.random() < cfg.hflip_p:
        out = out[:, ::-1]
    if rng.random() < cfg.vflip_p:
        out = out[::-1]
    if rng.random() < cfg.translate_p:
        out = translate(out, cfg.translate_max, rng)
    if rng.random() < cfg.grid_dropout_p:
        out = grid_dropout(out, cfg.grid_dropout_ratio, rng)
    if rng.random() < cfg.coarse_dropout_p:
        out = coarse_dropout(out, cfg.coarse_max_holes, cfg.coarse_max_size, rng)
    return np.ascontiguousarray(out, dtype=x.dtype)


def make_training_pair(
    x: np.ndarray,
    cfg: SynthesisConfig,
    k: int,
    seed: int,
    anomaly_source: np.ndarray | Callable[[int], np.ndarray],
    ref_cfg: ReferenceTransformConfig | None = None,
) -> SyntheticSample:
    """Build one query/reference training sample from the raw image ``x``.

    ``anomaly_source`` is either an image or a callable mapping a seed to one.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    a = anomaly_source(derive_seed(seed, _STREAM_MODE)) if callable(anomaly_source) else anomaly_source
    xq, mask, label = synthesize_query(x, a, cfg, derive_seed(seed, _STREAM_QUERY))
    refs = [transform_reference(x, derive_seed(seed, _STREAM_REFERENCE, i), ref_cfg) for i in range(k)]
    return SyntheticSample(xq, mask, label, refs)


def mask_to_patch_grid(mask: np.ndarray, grid: Sequence[int]) -> np.ndarray:
    """Downsample a pixel mask: a patch is anomalous if any pixel it covers is."""
    mask = np.asarray(mask)
    gh, gw = grid
    h, w = mask.shape
    ys = np.linspace(0, h, gh + 1)
    xs = np.linspace(0, w, gw + 1)
    out = np.zeros((gh, gw), np.uint8)
    for i in range(gh):
        y0, y1 = int(np.floor(ys[i])), max(int(np.ceil(ys[i + 1])), int(np.floor(ys[i])) + 1)
        for j in range(gw):
            x0, x1 = int(np.floor(xs[j])), max(int(np.ceil(xs[j + 1])), int(np.floor(xs[j])) + 1)
            out[i, j] = mask[y0:y1, x0:x1].any()
    return out
