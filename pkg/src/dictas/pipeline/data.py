"""MVTec-style dataset discovery and image loading.

Layout::

    root/<category>/train/good/*.png
    root/<category>/test/good/*.png
    root/<category>/test/<defect>/*.png
    root/<category>/ground_truth/<defect>/<stem>_mask.png

Other layouts (e.g. flat medical datasets) are mapped onto this one by the
``data.*`` config keys: ``train_dir``, ``normal_dir``, ``test_dir``,
``mask_dir`` and ``mask_suffix``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def load_image(path: str | Path, size: int | None = None) -> np.ndarray:
    """Read an image as float32 RGB in [0, 1], optionally bicubic-resized to ``size``."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.BICUBIC)
            return np.asarray(im, dtype=np.float32) / 255.0
    except OSError as exc:
        raise ValueError(f"could not decode image {path}: {exc}") from exc


def load_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 0).astype(np.uint8)


def list_images(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


@dataclass
class TestItem:
    image: Path
    defect: str
    mask: Path | None

    @property
    def label(self) -> int:
        return int(self.defect != "good")

    @property
    def key(self) -> str:
        return f"{self.defect}/{self.image.stem}"


@dataclass
class DatasetLayout:
    root: Path
    train_dir: str = "train"
    normal_dir: str = "good"
    test_dir: str = "test"
    mask_dir: str = "ground_truth"
    mask_suffix: str = "_mask"
    categories: list[str] | None = field(default=None)

    def __post_init__(self):
        self.root = Path(self.root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"dataset root {self.root} does not exist")

    @classmethod
    def from_config(cls, root, cfg: dict | None = None) -> "DatasetLayout":
        cfg = dict(cfg or {})
        return cls(root=Path(root), **{k: v for k, v in cfg.items() if k in cls.__dataclass_fields__ and k != "root"})

    def category_names(self) -> list[str]:
        found = sorted(
            p.name
            for p in self.root.iterdir()
            if p.is_dir() and ((p / self.train_dir).is_dir() or (p / self.test_dir).is_dir())
        )
        if self.categories:
            unknown = set(self.categories) - set(found)
            if unknown:
                raise FileNotFoundError(f"categories not found under {self.root}: {sorted(unknown)}")
            return list(self.categories)
        return found

    def train_images(self, category: str) -> list[Path]:
        return list_images(self.root / category / self.train_dir / self.normal_dir)

    def test_items(self, category: str) -> list[TestItem]:
        test_root = self.root / category / self.test_dir
        items = []
        if not test_root.is_dir():
            return items
        for defect_dir in sorted(p for p in test_root.iterdir() if p.is_dir()):
            defect = defect_dir.name
            for img in list_images(defect_dir):
                mask = None
                if defect != self.normal_dir:
                    mask = self._find_mask(category, defect, img)
                items.append(TestItem(img, "good" if defect == self.normal_dir else defect, mask))
        return items

    def _find_mask(self, category: str, defect: str, img: Path) -> Path:
        base = self.root / category / self.mask_dir / defect
        for suffix in IMAGE_SUFFIXES:
            for stem in (img.stem + self.mask_suffix, img.stem):
                cand = base / (stem + suffix)
                if cand.is_file():
                    return cand
        raise FileNotFoundError(f"no ground-truth mask for {img}")


def aux_training_images(layout: DatasetLayout, categories: list[str] | None = None) -> list[tuple[Path, str]]:
    """All normal training images of the auxiliary categories as (path, category)."""
    out = []
    for cat in categories or layout.category_names():
        out.extend((p, cat) for p in layout.train_images(cat))
    if not out:
        raise ValueError(f"no auxiliary training images found under {layout.root}")
    return out


def sample_references(layout: DatasetLayout, category: str, k: int, seed: int) -> list[Path]:
    """Uniformly draw ``k`` distinct normal training images (deterministic per seed)."""
    pool = layout.train_images(category)
    return sample_paths(pool, k, seed)


def sample_paths(pool: list[Path], k: int, seed: int) -> list[Path]:
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(pool) < k:
        raise ValueError(f"need {k} reference images but only {len(pool)} are available")
    idx = np.random.default_rng(seed).choice(len(pool), size=k, replace=False)
    return [pool[i] for i in sorted(idx)]


def check_disjoint(train_categories, test_categories, allow_overlap: bool = False):
    overlap = sorted(set(train_categories) & set(test_categories))
    if overlap and not allow_overlap:
        raise ValueError(
            f"training and test categories overlap: {overlap} (pass --allow-overlap to override)"
        )
    return overlap
