"""k-shot evaluation protocol: reference draws per seed, prediction files, reports.

``run_benchmark`` is the full opt-in run (train once on the auxiliary data,
then every shot count and seed on the target data). It is never executed by
the test suite.
"""

from __future__ import annotations

import json
import logging
import shutil
import time
from pathlib import Path
from typing import Sequence

from ..backbone import Backbone, build_backbone
from ..model import DictionaryModel
from ..synthesis import derive_seed
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import Config
from .data import DatasetLayout, aux_training_images, check_disjoint, load_image, sample_references
from .evaluate import SCORES_FILE, Report, evaluate, seed_dir, write_predictions, write_report
from .infer import infer
from .train import train

log = logging.getLogger(__name__)

_STREAM_REFS = 21


def reference_seed(seed: int, k: int) -> int:
    return derive_seed(seed, _STREAM_REFS, k)


def load_model(ckpt_path: str | Path, backbone: Backbone) -> tuple[DictionaryModel, Checkpoint]:
    ckpt = load_checkpoint(ckpt_path)
    return ckpt.to_model(backbone.spec), ckpt


def predict_category(
    model: DictionaryModel,
    backbone: Backbone,
    layout: DatasetLayout,
    category: str,
    k: int,
    seed: int,
    strategy: str | None = None,
    smooth_sigma: float | None = 4.0,
    timings: dict | None = None,
):
    """Draw ``k`` references for ``seed`` and return the test items with their maps."""
    refs = [load_image(p) for p in sample_references(layout, category, k, reference_seed(seed, k))]
    items = layout.test_items(category)
    queries = [load_image(i.image) for i in items]
    return items, infer(model, backbone, refs, queries, strategy, smooth_sigma, timings=timings)


def run_predictions(
    model: DictionaryModel,
    backbone: Backbone,
    layout: DatasetLayout,
    categories: Sequence[str],
    k: int,
    seeds: Sequence[int],
    out_dir: str | Path,
    strategy: str | None = None,
    smooth_sigma: float | None = 4.0,
    timings: dict | None = None,
) -> list[Path]:
    """Write ``seed_<s>/`` prediction trees under ``out_dir`` and return them."""
    roots = []
    for seed in seeds:
        root = seed_dir(out_dir, seed)
        (root / SCORES_FILE).unlink(missing_ok=True)
        for cat in categories:
            t = {}
            items, maps = predict_category(model, backbone, layout, cat, k, seed, strategy, smooth_sigma, t)
            write_predictions(root, cat, items, maps)
            if timings is not None:
                timings.setdefault(cat, []).append(t)
            log.info("k=%d seed=%d %s: %d maps", k, seed, cat, len(items))
        roots.append(root)
    return roots


def run_benchmark(
    cfg: Config,
    aux_root: str | Path,
    test_root: str | Path,
    out_dir: str | Path,
    ckpt_path: str | Path | None = None,
    strategy: str | None = None,
    smooth: bool = True,
) -> dict[int, Report]:
    """Train (unless a checkpoint is given), then evaluate every shot count over every seed.

    Writes ``checkpoint.zip``, ``k<K>/seed_<s>/`` predictions and
    ``report_k<K>.txt`` (+ ``.kv``) under ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pc = cfg.protocol
    backbone = build_backbone(cfg.backbone)
    aux_layout = DatasetLayout.from_config(aux_root, cfg.data)
    test_layout = DatasetLayout.from_config(test_root, cfg.data)
    train_cats = pc.train_categories or aux_layout.category_names()
    test_cats = pc.test_categories or test_layout.category_names()
    check_disjoint(train_cats, test_cats, pc.allow_overlap)

    if ckpt_path is None:
        result = train(cfg, aux_training_images(aux_layout, train_cats), backbone)
        ckpt_path = save_checkpoint(
            Checkpoint.from_model(result.model, cfg.to_dict(), result.epochs_completed), out_dir / "checkpoint.zip"
        )
    model, _ = load_model(ckpt_path, backbone)

    sigma = cfg.infer.smooth_sigma if smooth else None
    reports = {}
    for k in pc.shots:
        pred = out_dir / f"k{k}"
        if pred.exists():
            shutil.rmtree(pred)
        t0 = time.perf_counter()
        run_predictions(model, backbone, test_layout, test_cats, k, pc.seeds, pred, strategy, sigma)
        rep = evaluate(pred, test_layout, test_cats, len(pc.seeds), cfg.eval.fpr_limit, cfg.eval.pooled)
        rep.meta.update(shots=k, lookup=strategy or cfg.model.lookup, seconds=round(time.perf_counter() - t0, 1))
        write_report(rep, out_dir / f"report_k{k}.txt")
        reports[k] = rep
    summary = {k: rep.mean[Report.MEAN_ROW] for k, rep in reports.items()}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    return reports
