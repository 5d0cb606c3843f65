"""Figures from an evaluation manifest and, optionally, a prediction directory."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .evaluate import METRIC_KEYS, parse_manifest


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def manifest_matrix(text: str) -> tuple[list[str], list[str], np.ndarray]:
    """Rows (categories then ``mean``), metric columns and the value matrix in percent."""
    sections = parse_manifest(text)
    rows = [s for s in sections if s]
    if not rows:
        raise ValueError("manifest has no category sections")
    vals = np.array(
        [[100 * float(sections[r].get(f"metric.{k}", "nan")) for k in METRIC_KEYS] for r in rows], dtype=np.float64
    )
    return rows, list(METRIC_KEYS), vals


def plot_report(report_path: str | Path, out_path: str | Path, pred_dir: str | Path | None = None, data=None) -> Path:
    """Heatmap of every metric per category; with ``pred_dir`` and ``data``
    (a DatasetLayout) a second panel strip shows sample maps next to their masks."""
    plt = _pyplot()
    report_path = Path(report_path)
    kv = report_path if report_path.suffix == ".kv" else report_path.with_name(report_path.name + ".kv")
    rows, cols, vals = manifest_matrix(kv.read_text(encoding="utf-8"))

    samples = _samples(pred_dir, data) if pred_dir is not None and data is not None else []
    n_extra = 1 if samples else 0
    fig = plt.figure(figsize=(max(6, 1.1 * len(cols) + 2), 0.45 * len(rows) + 2 + 2.6 * n_extra))
    grid = fig.add_gridspec(1 + n_extra, 1, height_ratios=[0.45 * len(rows) + 1.5] + [2.4] * n_extra)

    ax = fig.add_subplot(grid[0])
    im = ax.imshow(np.nan_to_num(vals, nan=0.0), cmap="viridis", vmin=0, vmax=100, aspect="auto")
    ax.set_xticks(range(len(cols)), cols, rotation=30, ha="right")
    ax.set_yticks(range(len(rows)), rows)
    for i in range(len(rows)):
        for j in range(len(cols)):
            txt = "n/a" if np.isnan(vals[i, j]) else f"{vals[i, j]:.1f}"
            ax.text(j, i, txt, ha="center", va="center", color="w" if vals[i, j] < 60 else "k", fontsize=8)
    fig.colorbar(im, ax=ax, fraction=0.03)
    ax.set_title(kv.stem)

    if samples:
        sub = grid[1].subgridspec(2, len(samples))
        for j, (name, m, g) in enumerate(samples):
            a = fig.add_subplot(sub[0, j])
            a.imshow(m, cmap="jet", vmin=0, vmax=1)
            a.set_title(name, fontsize=7)
            a.axis("off")
            b = fig.add_subplot(sub[1, j])
            b.imshow(g, cmap="gray", vmin=0, vmax=1)
            b.axis("off")

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def _samples(pred_dir, layout, limit: int = 6):
    from ..scoring import load_map_png
    from .data import load_mask
    from .evaluate import seed_roots

    root = seed_roots(pred_dir)[0]
    out = []
    cats = layout.category_names()
    per_category = max(1, limit // max(len(cats), 1))
    for cat in cats:
        bad = [i for i in layout.test_items(cat) if i.label == 1][::3][:per_category]
        for item in bad:
            path = root / cat / item.defect / f"{item.image.stem}.png"
            if path.is_file():
                out.append((f"{cat}/{item.key}", load_map_png(path), load_mask(item.mask)))
        if len(out) >= limit:
            break
    return out[:limit]
