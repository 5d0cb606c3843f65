"""Command-line entry point: ``dictas <verb> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

log = logging.getLogger("dictas")


def resolve_config(name: str | None) -> Path | None:
    """A path, or the name of a packaged config (``toy``, ``full``)."""
    if name is None:
        return None
    p = Path(name)
    if p.is_file():
        return p
    packaged = resources.files("dictas") / "configs" / f"{name}.yaml"
    if packaged.is_file():
        return Path(str(packaged))
    raise FileNotFoundError(f"config {name!r} is neither a file nor a packaged config")


def load_config(args):
    from .pipeline.config import Config

    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "lookup", None):
        overrides.append(f"model.lookup={args.lookup}")
    if getattr(args, "allow_overlap", False):
        overrides.append("protocol.allow_overlap=true")
    return Config.load(resolve_config(getattr(args, "config", None)), overrides)


def _ckpt_config(ckpt, args):
    from .pipeline.config import Config

    overrides = list(args.set or [])
    return Config.from_dict(ckpt.config).with_overrides(overrides)


def _print_timings(t: dict):
    print(json.dumps(t, indent=2, default=float))


# verbs


def cmd_make_toy(args):
    from .toy import make_toy_corpus

    root = make_toy_corpus(args.out, size=args.size, seed=args.seed)
    print(root)


def cmd_train(args):
    from .backbone import build_backbone
    from .pipeline.checkpoint import Checkpoint, save_checkpoint
    from .pipeline.data import DatasetLayout, aux_training_images
    from .pipeline.train import train

    cfg = load_config(args)
    backbone = build_backbone(cfg.backbone)
    layout = DatasetLayout.from_config(args.data, cfg.data)
    cats = args.categories or cfg.protocol.train_categories
    result = train(cfg, aux_training_images(layout, cats), backbone)
    path = save_checkpoint(Checkpoint.from_model(result.model, cfg.to_dict(), result.epochs_completed), args.out)
    trace = Path(str(path) + ".losses.json")
    trace.write_text(json.dumps({"epochs": result.epoch_losses, "steps": result.step_losses}), encoding="utf-8")
    last = result.step_losses[-1] if result.step_losses else {}
    print(f"saved {path} after {result.steps} steps ({result.epochs_completed} epochs); last loss {last.get('total', float('nan')):.4f}")


def cmd_infer(args):
    from .backbone import build_backbone
    from .pipeline.checkpoint import load_checkpoint
    from .pipeline.data import list_images, load_image, sample_paths
    from .pipeline.infer import infer
    from .scoring import save_map_png

    ckpt = load_checkpoint(args.ckpt)
    cfg = _ckpt_config(ckpt, args)
    backbone = build_backbone(cfg.backbone)
    model = ckpt.to_model(backbone.spec, cfg.model)
    ref_pool = list_images(args.ref_dir)
    refs = [load_image(p) for p in sample_paths(ref_pool, args.shots, args.seed)]
    qdir = Path(args.query_dir)
    qpaths = list_images(qdir)
    if not qpaths:
        raise SystemExit(f"no query images under {qdir}")
    timings = {} if args.timing else None
    sigma = None if args.no_smooth else cfg.infer.smooth_sigma
    maps = infer(model, backbone, refs, [load_image(p) for p in qpaths], args.lookup, sigma, timings=timings)
    out = Path(args.out)
    lines = []
    for p, m in zip(qpaths, maps):
        rel = p.relative_to(qdir).with_suffix(".png")
        save_map_png(out / rel, m.map)
        lines.append(f"{rel.with_suffix('').as_posix()} = {m.image_score!r}\n")
    out.mkdir(parents=True, exist_ok=True)
    (out / "scores.txt").write_text("".join(lines), encoding="utf-8")
    print(f"wrote {len(maps)} maps to {out}")
    if timings is not None:
        _print_timings(timings)


def cmd_predict(args):
    from .backbone import build_backbone
    from .pipeline.checkpoint import load_checkpoint
    from .pipeline.data import DatasetLayout
    from .pipeline.protocol import run_predictions

    ckpt = load_checkpoint(args.ckpt)
    cfg = _ckpt_config(ckpt, args)
    backbone = build_backbone(cfg.backbone)
    model = ckpt.to_model(backbone.spec, cfg.model)
    layout = DatasetLayout.from_config(args.data, cfg.data)
    cats = args.categories or cfg.protocol.test_categories or layout.category_names()
    timings = {} if args.timing else None
    sigma = None if args.no_smooth else cfg.infer.smooth_sigma
    seeds = list(range(args.seeds))
    run_predictions(model, backbone, layout, cats, args.shots, seeds, args.out, args.lookup, sigma, timings)
    print(f"wrote predictions for {len(cats)} categories x {len(seeds)} seeds to {args.out}")
    if timings is not None:
        _print_timings(timings)


def cmd_eval(args):
    from .pipeline.data import DatasetLayout
    from .pipeline.evaluate import evaluate, format_table, seed_roots, write_report

    layout = DatasetLayout(args.data)
    first = seed_roots(args.pred_dir)[0]
    cats = args.categories or sorted(p.name for p in first.iterdir() if p.is_dir())
    rep = evaluate(args.pred_dir, layout, cats, args.seeds, args.fpr_limit, not args.per_image)
    table, kv = write_report(rep, args.report)
    print(format_table(rep), end="")
    print(f"report: {table}\nmanifest: {kv}")


def cmd_report_plot(args):
    from .pipeline.data import DatasetLayout
    from .pipeline.plot import plot_report

    layout = DatasetLayout(args.data) if args.data else None
    print(plot_report(args.report, args.out, args.pred_dir, layout))


def cmd_benchmark(args):
    from .pipeline.evaluate import format_table
    from .pipeline.protocol import run_benchmark

    cfg = load_config(args)
    reports = run_benchmark(cfg, args.aux_data, args.data, args.out, args.ckpt, args.lookup, not args.no_smooth)
    for k, rep in reports.items():
        print(f"== k={k}")
        print(format_table(rep), end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dictas", description="Few-shot anomaly segmentation by dictionary lookup.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def with_set(sp):
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")

    def with_lookup(sp):
        sp.add_argument("--lookup", choices=("maximum", "dense", "sparse"), default=None)

    s = sub.add_parser("make-toy", help="write the procedural texture corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_make_toy)

    s = sub.add_parser("train", help="train generators and text head on auxiliary data")
    s.add_argument("--config", help="YAML file or packaged config name (toy, full)")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint archive to write")
    s.add_argument("--categories", nargs="*")
    with_set(s)
    with_lookup(s)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("infer", help="anomaly maps for a directory of queries")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--ref-dir", required=True)
    s.add_argument("--query-dir", required=True)
    s.add_argument("--shots", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--no-smooth", action="store_true")
    s.add_argument("--timing", action="store_true", help="print wall-clock timings")
    with_set(s)
    with_lookup(s)
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("predict", help="k-shot predictions for dataset categories over several seeds")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--categories", nargs="*")
    s.add_argument("--shots", type=int, default=4)
    s.add_argument("--seeds", type=int, default=1)
    s.add_argument("--out", required=True)
    s.add_argument("--no-smooth", action="store_true")
    s.add_argument("--timing", action="store_true")
    with_set(s)
    with_lookup(s)
    s.set_defaults(fn=cmd_predict)

    s = sub.add_parser("eval", help="metrics report from a prediction directory")
    s.add_argument("--pred-dir", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--seeds", type=int, default=None)
    s.add_argument("--categories", nargs="*")
    s.add_argument("--fpr-limit", type=float, default=0.3)
    s.add_argument("--per-image", action="store_true", help="average pixel AUROC/AP per image instead of pooling")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("report-plot", help="figure from a report")
    s.add_argument("--report", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--pred-dir")
    s.add_argument("--data")
    s.set_defaults(fn=cmd_report_plot)

    s = sub.add_parser("benchmark", help="train once, then every shot count and seed (opt-in, long)")
    s.add_argument("--config", default="full")
    s.add_argument("--aux-data", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ckpt")
    s.add_argument("--no-smooth", action="store_true")
    s.add_argument("--allow-overlap", action="store_true")
    with_set(s)
    with_lookup(s)
    s.set_defaults(fn=cmd_benchmark)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
