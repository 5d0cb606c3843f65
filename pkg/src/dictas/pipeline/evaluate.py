"""Prediction files, per-category metrics and the seed-aggregated report.

Prediction directory layout::

    <pred>/seed_<s>/<category>/<defect>/<stem>.png   16-bit anomaly maps
    <pred>/seed_<s>/scores.txt                       "<category>/<defect>/<stem> = <score>"

A directory without ``seed_*`` children is read as a single seed.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..metrics import image_metrics, pixel_metrics
from ..scoring import AnomalyMap, load_map_png, save_map_png
from .data import DatasetLayout, TestItem, load_mask

PIXEL_KEYS = ("auroc", "pro", "ap")
IMAGE_KEYS = ("auroc", "f1_max", "ap")
METRIC_KEYS = tuple(f"pixel.{k}" for k in PIXEL_KEYS) + tuple(f"image.{k}" for k in IMAGE_KEYS)
SCORES_FILE = "scores.txt"


# prediction files


def seed_dir(pred_dir: str | Path, seed: int) -> Path:
    return Path(pred_dir) / f"seed_{seed}"


def write_predictions(out_dir: str | Path, category: str, items: Sequence[TestItem], maps: Sequence[AnomalyMap]):
    """Write one PNG per test item and append its score line to ``scores.txt``."""
    if len(items) != len(maps):
        raise ValueError("one map per test item is required")
    out_dir = Path(out_dir)
    lines = []
    for item, m in zip(items, maps):
        save_map_png(out_dir / category / item.defect / f"{item.image.stem}.png", m.map)
        lines.append(f"{category}/{item.key} = {m.image_score!r}\n")
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / SCORES_FILE, "a", encoding="utf-8") as fh:
        fh.writelines(lines)


def read_scores(path: str | Path) -> dict[str, float]:
    scores = {}
    path = Path(path)
    if not path.is_file():
        return scores
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, _, value = line.partition("=")
        scores[key.strip()] = float(value)
    return scores


def read_predictions(seed_root: str | Path, category: str, items: Sequence[TestItem]):
    """Maps and image scores for ``items``; missing maps raise ``FileNotFoundError``."""
    seed_root = Path(seed_root)
    scores = read_scores(seed_root / SCORES_FILE)
    maps, image_scores = [], []
    for item in items:
        path = seed_root / category / item.defect / f"{item.image.stem}.png"
        if not path.is_file():
            raise FileNotFoundError(f"missing prediction for {category}/{item.key}: {path}")
        m = load_map_png(path)
        maps.append(m)
        image_scores.append(scores.get(f"{category}/{item.key}", float(m.max())))
    return maps, np.asarray(image_scores)


def seed_roots(pred_dir: str | Path, n_seeds: int | None = None) -> list[Path]:
    pred_dir = Path(pred_dir)
    found = sorted(
        (p for p in pred_dir.glob("seed_*") if p.is_dir() and re.fullmatch(r"seed_\d+", p.name)),
        key=lambda p: int(p.name.split("_")[1]),
    )
    if not found:
        found = [pred_dir]
    if n_seeds is not None:
        if len(found) < n_seeds:
            raise FileNotFoundError(f"asked for {n_seeds} seeds but {pred_dir} holds {len(found)}")
        found = found[:n_seeds]
    return found


# metrics


def ground_truth(items: Sequence[TestItem], shapes: Sequence[tuple[int, int]]) -> list[np.ndarray]:
    masks = []
    for item, hw in zip(items, shapes):
        if item.label == 0:
            masks.append(np.zeros(hw, np.uint8))
            continue
        if item.mask is None:
            raise FileNotFoundError(f"missing mask for {item.image}")
        m = load_mask(item.mask)
        if m.shape != tuple(hw):
            raise ValueError(f"mask {item.mask} is {m.shape}, prediction is {tuple(hw)}")
        masks.append(m)
    return masks


def _safe(fn, *args, **kwargs) -> dict[str, float]:
    try:
        return fn(*args, **kwargs)
    except ValueError:
        return {}


def category_metrics(
    maps: Sequence[np.ndarray],
    image_scores: Sequence[float],
    items: Sequence[TestItem],
    fpr_limit: float = 0.3,
    pooled: bool = True,
) -> dict[str, float]:
    """Six metrics keyed ``pixel.*`` and ``image.*``; undefined ones are NaN."""
    if len(maps) != len(items):
        raise ValueError("every test image needs a map")
    masks = ground_truth(items, [np.shape(m) for m in maps])
    pix = _safe(pixel_metrics, maps, masks, fpr_limit=fpr_limit, pooled=pooled)
    img = _safe(image_metrics, np.asarray(image_scores, dtype=np.float64), np.array([i.label for i in items]))
    out = {f"pixel.{k}": pix.get(k, math.nan) for k in PIXEL_KEYS}
    out.update({f"image.{k}": img.get(k, math.nan) for k in IMAGE_KEYS})
    return out


def evaluate_seed(seed_root, layout: DatasetLayout, categories: Sequence[str], fpr_limit=0.3, pooled=True):
    per_cat = {}
    for cat in categories:
        items = layout.test_items(cat)
        if not items:
            raise FileNotFoundError(f"category {cat} has no test images")
        maps, scores = read_predictions(seed_root, cat, items)
        per_cat[cat] = category_metrics(maps, scores, items, fpr_limit, pooled)
    return per_cat


# aggregation and report


@dataclass
class Report:
    """Per-category and mean metrics, as mean and std over seeds."""

    categories: list[str]
    mean: dict[str, dict[str, float]] = field(default_factory=dict)
    std: dict[str, dict[str, float]] = field(default_factory=dict)
    seeds: int = 1
    meta: dict = field(default_factory=dict)

    MEAN_ROW = "mean"

    def rows(self) -> list[str]:
        return [*self.categories, self.MEAN_ROW]


def aggregate(per_seed: Sequence[dict[str, dict[str, float]]], meta: dict | None = None) -> Report:
    """Mean and (population) std across seeds.

    The ``mean`` row averages categories within each seed first, then
    aggregates those per-seed means across seeds.
    """
    if not per_seed:
        raise ValueError("no seeds to aggregate")
    cats = list(per_seed[0])
    rows = {c: [s[c] for s in per_seed] for c in cats}
    rows[Report.MEAN_ROW] = [
        {k: float(np.nanmean([s[c][k] for c in cats])) if any(np.isfinite(s[c][k]) for c in cats) else math.nan
         for k in METRIC_KEYS}
        for s in per_seed
    ]
    rep = Report(cats, seeds=len(per_seed), meta=dict(meta or {}))
    for row, vals in rows.items():
        arr = np.array([[v[k] for k in METRIC_KEYS] for v in vals], dtype=np.float64)
        rep.mean[row] = dict(zip(METRIC_KEYS, arr.mean(axis=0).tolist()))
        rep.std[row] = dict(zip(METRIC_KEYS, arr.std(axis=0).tolist()))
    return rep


def evaluate(
    pred_dir: str | Path,
    layout: DatasetLayout,
    categories: Sequence[str] | None = None,
    n_seeds: int | None = None,
    fpr_limit: float = 0.3,
    pooled: bool = True,
) -> Report:
    categories = list(categories or layout.category_names())
    roots = seed_roots(pred_dir, n_seeds)
    per_seed = [evaluate_seed(r, layout, categories, fpr_limit, pooled) for r in roots]
    meta = {"fpr_limit": fpr_limit, "pixel_curve": "pooled" if pooled else "per-image"}
    return aggregate(per_seed, meta)


def _pct(v: float) -> str:
    return "n/a" if not np.isfinite(v) else f"{100 * v:.1f}"


def _cell(rep: Report, row: str, keys: Sequence[str]) -> str:
    parts = []
    for k in keys:
        m, s = rep.mean[row][k], rep.std[row][k]
        parts.append(_pct(m) if rep.seeds == 1 or not np.isfinite(m) else f"{_pct(m)}±{100 * s:.1f}")
    return "(" + ", ".join(parts) + ")"


def format_table(rep: Report) -> str:
    """Plain-text table with one row per category and a final mean row.

    Each cell is a triple in percent: pixel (AUROC, PRO, AP) and image
    (AUROC, F1-max, AP), with ``±std`` over seeds when there are several.
    """
    head = ("category", "pixel (AUROC, PRO, AP)", "image (AUROC, F1-max, AP)")
    body = [
        (row, _cell(rep, row, [f"pixel.{k}" for k in PIXEL_KEYS]), _cell(rep, row, [f"image.{k}" for k in IMAGE_KEYS]))
        for row in rep.rows()
    ]
    widths = [max(len(r[i]) for r in [head, *body]) for i in range(3)]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    lines = [fmt(head), "  ".join("-" * w for w in widths)]
    lines += [fmt(r) for r in body[:-1]]
    lines += ["  ".join("-" * w for w in widths), fmt(body[-1])]
    notes = [f"seeds: {rep.seeds}"] + [f"{k}: {v}" for k, v in rep.meta.items()]
    return "\n".join(lines + [""] + notes) + "\n"


def format_manifest(rep: Report) -> str:
    """``key = value`` text with one ``[section]`` per category and a ``[mean]`` section."""
    lines = [f"seeds = {rep.seeds}"] + [f"{k} = {v}" for k, v in rep.meta.items()]
    for row in rep.rows():
        lines += ["", f"[{row}]"]
        for k in METRIC_KEYS:
            lines.append(f"metric.{k} = {rep.mean[row][k]!r}")
            lines.append(f"metric.{k}.std = {rep.std[row][k]!r}")
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> dict[str, dict[str, str]]:
    """Sections of a manifest; top-level keys land under ``""``."""
    out: dict[str, dict[str, str]] = {"": {}}
    section = ""
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
            out.setdefault(section, {})
            continue
        key, _, value = line.partition("=")
        out[section][key.strip()] = value.strip()
    return out


def write_report(rep: Report, path: str | Path) -> tuple[Path, Path]:
    """Write the table to ``path`` and the manifest next to it as ``<path>.kv``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_table(rep), encoding="utf-8")
    kv = path.with_name(path.name + ".kv")
    kv.write_text(format_manifest(rep), encoding="utf-8")
    return path, kv
