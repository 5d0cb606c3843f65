"""Procedurally generated texture corpus in the MVTec directory layout.

Auxiliary (training) classes are stripe-like textures; ``checker`` is a held-out
class whose test split carries injected square and blob defects with masks.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

AUX_CLASSES = ("stripes", "waves", "dots")
HELDOUT_CLASS = "checker"


def _colors(rng, n=2, lo=0.1, hi=0.9):
    return rng.uniform(lo, hi, size=(n, 3))


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy, xx


def stripes(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grid(size)
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(8, 20)
    phase = rng.uniform(0, period)
    t = (np.cos(theta) * xx + np.sin(theta) * yy + phase) % period < period / 2
    c = _colors(rng)
    return np.where(t[..., None], c[0], c[1])


def waves(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grid(size)
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(10, 24)
    u = np.cos(theta) * xx + np.sin(theta) * yy
    v = -np.sin(theta) * xx + np.cos(theta) * yy
    t = 0.5 + 0.5 * np.sin(2 * np.pi * (u + 3 * np.sin(2 * np.pi * v / (2 * period))) / period)
    c = _colors(rng)
    return t[..., None] * c[0] + (1 - t[..., None]) * c[1]


def dots(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grid(size)
    period = rng.uniform(10, 20)
    radius = rng.uniform(0.2, 0.4) * period
    oy, ox = rng.uniform(0, period, size=2)
    dy = (yy + oy) % period - period / 2
    dx = (xx + ox) % period - period / 2
    t = dy**2 + dx**2 < radius**2
    c = _colors(rng)
    return np.where(t[..., None], c[0], c[1])


CHECKER_COLORS = np.array([[0.15, 0.2, 0.45], [0.85, 0.8, 0.45]])


def checker(size: int, rng: np.random.Generator, cell: int | None = None) -> np.ndarray:
    cell = cell or max(4, size // 8)
    yy, xx = _grid(size)
    step = max(1, cell // 2)
    oy, ox = step * rng.integers(0, 2 * cell // step, size=2)
    t = (((yy + oy) // cell) + ((xx + ox) // cell)) % 2 == 0
    img = np.where(t[..., None], CHECKER_COLORS[0], CHECKER_COLORS[1])
    return img + rng.normal(0, 0.02, size=img.shape)


TEXTURES = {"stripes": stripes, "waves": waves, "dots": dots, "checker": checker}


def texture(name: str, size: int, rng: np.random.Generator) -> np.ndarray:
    return np.clip(TEXTURES[name](size, rng), 0, 1).astype(np.float32)


def square_defect(size: int, rng: np.random.Generator) -> np.ndarray:
    side = int(rng.integers(size // 8, size // 4 + 1))
    y, x = rng.integers(0, size - side, size=2)
    mask = np.zeros((size, size), np.uint8)
    mask[y : y + side, x : x + side] = 1
    return mask


def blob_defect(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grid(size)
    cy, cx = rng.uniform(size * 0.2, size * 0.8, size=2)
    ry, rx = rng.uniform(size / 16, size / 7, size=2)
    angle = rng.uniform(0, np.pi)
    u = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
    v = -(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle)
    wobble = 1 + 0.25 * np.sin(3 * np.arctan2(v, u) + rng.uniform(0, 2 * np.pi))
    return ((u / rx) ** 2 + (v / ry) ** 2 < wobble**2).astype(np.uint8)


def inject_defect(img: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Fill the masked region with a flat colour (random, or the image mean) or coloured noise."""
    mode = rng.integers(3)
    if mode == 0:
        fill = np.broadcast_to(rng.uniform(0, 1, size=3), img.shape)
    elif mode == 1:
        mean = img.reshape(-1, 3).mean(axis=0)
        fill = np.broadcast_to(np.clip(mean + rng.normal(0, 0.05, size=3), 0, 1), img.shape)
    else:
        fill = rng.uniform(0, 1, size=img.shape)
    m = mask[..., None].astype(img.dtype)
    return (m * fill + (1 - m) * img).astype(np.float32)


def _save(path: Path, img: np.ndarray):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(path)


def _save_mask(path: Path, mask: np.ndarray):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((mask > 0).astype(np.uint8) * 255).save(path)


def make_toy_corpus(
    root: str | Path,
    size: int = 64,
    n_train: int = 24,
    n_test_good: int = 8,
    n_test_defect: int = 8,
    seed: int = 0,
    aux_classes=AUX_CLASSES,
    heldout_classes=(HELDOUT_CLASS,),
) -> Path:
    """Write the corpus under ``root`` and return it.

    Auxiliary classes get ``train/good`` only. Held-out classes get
    ``train/good``, ``test/good``, ``test/square``, ``test/blob`` and matching
    ``ground_truth/<defect>/<name>_mask.png`` files.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    for cls in aux_classes:
        for i in range(n_train):
            _save(root / cls / "train" / "good" / f"{i:03d}.png", texture(cls, size, rng))
    for cls in heldout_classes:
        for i in range(n_train):
            _save(root / cls / "train" / "good" / f"{i:03d}.png", texture(cls, size, rng))
        for i in range(n_test_good):
            _save(root / cls / "test" / "good" / f"{i:03d}.png", texture(cls, size, rng))
        for defect, make_mask in (("square", square_defect), ("blob", blob_defect)):
            for i in range(n_test_defect):
                mask = make_mask(size, rng)
                img = inject_defect(texture(cls, size, rng), mask, rng)
                _save(root / cls / "test" / defect / f"{i:03d}.png", img)
                _save_mask(root / cls / "ground_truth" / defect / f"{i:03d}_mask.png", mask)
    return root
