import json
import zipfile

import numpy as np
import pytest
import torch

from dictas.backbone import build_backbone
from dictas.cli import main as cli_main
from dictas.cli import resolve_config
from dictas.model import DictionaryModel, ModelConfig
from dictas.pipeline.checkpoint import Checkpoint, FingerprintMismatch, load_checkpoint, save_checkpoint
from dictas.pipeline.config import Config, apply_override
from dictas.pipeline.data import (
    DatasetLayout,
    aux_training_images,
    check_disjoint,
    load_image,
    sample_paths,
    sample_references,
)
from dictas.pipeline.evaluate import (
    Report,
    aggregate,
    evaluate,
    format_table,
    parse_manifest,
    read_predictions,
    seed_dir,
    write_predictions,
    write_report,
)
from dictas.pipeline.infer import infer
from dictas.pipeline.protocol import predict_category, reference_seed, run_predictions
from dictas.pipeline.train import NonFiniteLossError, init_model, train
from dictas.scoring import AnomalyMap
from dictas.toy import AUX_CLASSES, HELDOUT_CLASS

SMALL = [
    "backbone.image_size=64",
    "backbone.channels=16",
    "backbone.embed_dim=16",
    "model.pool_kernel=1",
    "model.num_heads=4",
    "train.batch_size=4",
    "train.epochs=1",
]


def small_config(*extra):
    return Config.load(resolve_config("toy"), SMALL + ["train.max_steps=null", *extra])


# config


def test_defaults_follow_training_recipe():
    c = Config()
    assert (c.train.epochs, c.train.lr, c.train.batch_size, c.train.k_train) == (30, 1e-4, 24, 1)
    assert (c.loss.lambda_cqc, c.loss.lambda_tac, c.tac.logit_scale) == (0.1, 0.1, 100.0)
    assert c.model.lookup == "sparse" and c.model.pool_kernel == 3
    assert c.protocol.shots == (1, 2, 4, 8, 16)


def test_overrides_and_round_trip(tmp_path):
    c = Config.load(None, ["train.lr=0.5", "model.lookup=dense", "protocol.shots=[1, 2]", "backbone.seed=3"])
    assert c.train.lr == 0.5 and c.model.lookup == "dense" and c.protocol.shots == (1, 2)
    assert c.backbone == {"name": "random-projection", "seed": 3}
    c.dump(tmp_path / "c.yaml")
    assert Config.load(tmp_path / "c.yaml").to_dict() == c.to_dict()


def test_bad_overrides():
    with pytest.raises(KeyError):
        Config.load(None, ["train.learning_rate=1"])
    with pytest.raises(ValueError):
        apply_override({}, "no-equals-sign")
    with pytest.raises(ValueError):
        Config.load(None, ["model.lookup=median"])
    with pytest.raises(ValueError):
        Config.load(None, ["train.lr=-1"])


# data


def test_layout_discovery(small_toy_root):
    layout = DatasetLayout(small_toy_root)
    assert layout.category_names() == sorted([*AUX_CLASSES, HELDOUT_CLASS])
    items = layout.test_items(HELDOUT_CLASS)
    assert {i.defect for i in items} == {"good", "square", "blob"}
    for i in items:
        assert (i.mask is None) == (i.label == 0)
    assert len(aux_training_images(layout, list(AUX_CLASSES))) == 3 * 4


def test_layout_errors(tmp_path, small_toy_root):
    with pytest.raises(FileNotFoundError):
        DatasetLayout(tmp_path / "missing")
    with pytest.raises(FileNotFoundError):
        DatasetLayout(small_toy_root, categories=["nope"]).category_names()
    with pytest.raises(ValueError):
        aux_training_images(DatasetLayout(tmp_path), [])
    (tmp_path / "broken.png").write_bytes(b"not an image")
    with pytest.raises(ValueError):
        load_image(tmp_path / "broken.png")


def test_missing_mask_reported(tmp_path):
    from PIL import Image

    d = tmp_path / "cat" / "test" / "crack"
    d.mkdir(parents=True)
    Image.new("RGB", (8, 8)).save(d / "000.png")
    with pytest.raises(FileNotFoundError):
        DatasetLayout(tmp_path).test_items("cat")


def test_flat_layout_mapping(tmp_path):
    from PIL import Image

    for sub in ("normal", "Test/good", "Test/lesion", "masks/lesion"):
        (tmp_path / "brain" / sub).mkdir(parents=True)
    Image.new("RGB", (8, 8)).save(tmp_path / "brain" / "normal" / "a.png")
    Image.new("RGB", (8, 8)).save(tmp_path / "brain" / "Test" / "lesion" / "b.png")
    Image.new("L", (8, 8)).save(tmp_path / "brain" / "masks" / "lesion" / "b.png")
    cfg = {"train_dir": ".", "normal_dir": "normal", "test_dir": "Test", "mask_dir": "masks", "mask_suffix": ""}
    layout = DatasetLayout.from_config(tmp_path, cfg)
    assert [p.name for p in layout.train_images("brain")] == ["a.png"]
    assert layout.test_items("brain")[0].mask.name == "b.png"


def test_sample_references(small_toy_root):
    layout = DatasetLayout(small_toy_root)
    assert sample_paths([small_toy_root], 1, 0) == [small_toy_root]
    a = sample_references(layout, HELDOUT_CLASS, 2, 5)
    assert a == sample_references(layout, HELDOUT_CLASS, 2, 5) and len(set(a)) == 2
    with pytest.raises(ValueError):
        sample_references(layout, HELDOUT_CLASS, 5, 0)
    with pytest.raises(ValueError):
        sample_paths([small_toy_root], 0, 0)


def test_reference_draws_differ_by_seed_and_shots():
    assert len({reference_seed(s, k) for s in range(5) for k in (1, 2, 4)}) == 15


def test_disjoint_categories():
    assert check_disjoint(["a", "b"], ["c"]) == []
    with pytest.raises(ValueError, match="overlap"):
        check_disjoint(["a", "b"], ["b"])
    assert check_disjoint(["a", "b"], ["b"], allow_overlap=True) == ["b"]


# checkpoint


def _model(cfg):
    backbone = build_backbone(cfg.backbone)
    return init_model(backbone, cfg), backbone


def test_checkpoint_manifest_and_keys(tmp_path):
    cfg = small_config()
    model, backbone = _model(cfg)
    path = save_checkpoint(Checkpoint.from_model(model, cfg.to_dict(), 3), tmp_path / "m.zip")
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        names = set(zf.namelist())
    assert manifest["format"] == "dictas-checkpoint" and manifest["epoch"] == 3
    assert manifest["fingerprint"] == backbone.spec.fingerprint()
    keys = set(manifest["tensors"])
    assert "gen.0.q.proj_q.weight" in keys and "gen.1.v.fc2.bias" in keys and "tac.linear.weight" in keys
    for name, meta in manifest["tensors"].items():
        assert meta["dtype"] == "float32-le" and meta["file"] in names
    blob = np.frombuffer(zipfile.ZipFile(path).read("tensors/tac.linear.bias.f32"), dtype="<f4")
    assert np.array_equal(blob, model.tac_head.linear.bias.detach().numpy())


def test_checkpoint_round_trip_parameters(tmp_path):
    cfg = small_config()
    model, backbone = _model(cfg)
    with torch.no_grad():
        for p in model.parameters():
            p.normal_()
    ckpt = load_checkpoint(save_checkpoint(Checkpoint.from_model(model, cfg.to_dict()), tmp_path / "m.zip"))
    back = ckpt.to_model(backbone.spec)
    assert back.cfg == model.cfg
    for (n, a), (m, b) in zip(model.named_arrays().items(), back.named_arrays().items()):
        assert n == m and torch.equal(a, b)


def test_checkpoint_fingerprint_mismatch(tmp_path):
    cfg = small_config()
    model, _ = _model(cfg)
    ckpt = load_checkpoint(save_checkpoint(Checkpoint.from_model(model), tmp_path / "m.zip"))
    other = build_backbone({**cfg.backbone, "seed": 99})
    with pytest.raises(FingerprintMismatch):
        ckpt.to_model(other.spec)


def test_checkpoint_refuses_non_finite_and_foreign_files(tmp_path):
    cfg = small_config()
    model, _ = _model(cfg)
    with torch.no_grad():
        model.tac_head.linear.bias[0] = float("nan")
    with pytest.raises(ValueError):
        save_checkpoint(Checkpoint.from_model(model), tmp_path / "m.zip")
    with zipfile.ZipFile(tmp_path / "x.zip", "w") as zf:
        zf.writestr("manifest.json", json.dumps({"format": "other"}))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.zip")


def test_load_arrays_strict():
    model, _ = _model(small_config())
    arrays = dict(model.named_arrays())
    arrays.pop("tac.linear.bias")
    with pytest.raises(KeyError):
        model.load_arrays(arrays)


# training


def test_one_epoch_round_trip_bit_identical(small_toy_root, tmp_path):
    cfg = small_config()
    backbone = build_backbone(cfg.backbone)
    layout = DatasetLayout(small_toy_root)
    aux = aux_training_images(layout, [HELDOUT_CLASS])  # the 4 training images of one class
    result = train(cfg, aux, backbone)
    assert result.epochs_completed == 1 and result.steps == 1 and len(result.epoch_losses) == 1
    refs = [load_image(p) for p in layout.train_images(HELDOUT_CLASS)[:2]]
    queries = [load_image(i.image) for i in layout.test_items(HELDOUT_CLASS)]
    before = infer(result.model, backbone, refs, queries)
    path = save_checkpoint(Checkpoint.from_model(result.model, cfg.to_dict(), 1), tmp_path / "m.zip")
    loaded = load_checkpoint(path).to_model(backbone.spec)
    after = infer(loaded, backbone, refs, queries)
    for a, b in zip(before, after):
        assert np.array_equal(a.map, b.map) and a.image_score == b.image_score


def test_training_is_deterministic(small_toy_root):
    cfg = small_config("train.epochs=2")
    backbone = build_backbone(cfg.backbone)
    aux = aux_training_images(DatasetLayout(small_toy_root), list(AUX_CLASSES))
    a = train(cfg, aux, backbone)
    b = train(cfg, aux, backbone)
    assert a.step_losses == b.step_losses
    for x, y in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(x, y)


def test_zero_lambdas_trace_equals_query_trace(small_toy_root):
    cfg = small_config("loss.lambda_cqc=0", "loss.lambda_tac=0", "train.epochs=2")
    backbone = build_backbone(cfg.backbone)
    aux = aux_training_images(DatasetLayout(small_toy_root), list(AUX_CLASSES))
    result = train(cfg, aux, backbone)
    assert [r["total"] for r in result.step_losses] == [r["query"] for r in result.step_losses]
    assert [r["total"] for r in result.epoch_losses] == [r["query"] for r in result.epoch_losses]


def test_train_rejects_empty_dataset():
    cfg = small_config()
    with pytest.raises(ValueError):
        train(cfg, [], build_backbone(cfg.backbone))


def test_train_aborts_on_non_finite_loss(small_toy_root):
    cfg = small_config()
    backbone = build_backbone(cfg.backbone)
    model = init_model(backbone, cfg)
    with torch.no_grad():
        model.tac_head.linear.weight.fill_(float("inf"))
    aux = aux_training_images(DatasetLayout(small_toy_root), list(AUX_CLASSES))
    with pytest.raises(NonFiniteLossError):
        train(cfg, aux, backbone, model=model)


def test_query_loss_halves_within_200_steps(toy_run):
    assert toy_run["result"].steps == 200
    assert toy_run["probe_after"] < 0.5 * toy_run["probe_before"]


# inference


def test_self_retrieval_map_near_zero():
    # the dictionary attends over all references jointly, so the query must be the whole reference set
    cfg = small_config("model.init_std=0.5", "model.normalize_lookup=true", "model.lookup=maximum")
    model, backbone = _model(cfg)
    for g in model.generators.layers:
        g.tie_query_to_key()
    rng = np.random.default_rng(0)
    for _ in range(3):
        img = rng.random((64, 64, 3)).astype(np.float32)
        maps = infer(model, backbone, [img], [img])
        assert maps[0].map.max() <= 1e-6


def test_duplicated_reference_gives_identical_maps(small_toy_root):
    model, backbone = _model(small_config())
    layout = DatasetLayout(small_toy_root)
    ref = load_image(layout.train_images(HELDOUT_CLASS)[0])
    queries = [load_image(i.image) for i in layout.test_items(HELDOUT_CLASS)]
    a = infer(model, backbone, [ref], queries, "maximum")
    b = infer(model, backbone, [ref] * 4, queries, "maximum")
    for x, y in zip(a, b):
        assert np.array_equal(x.map, y.map)


def test_infer_contract(small_toy_root):
    model, backbone = _model(small_config())
    layout = DatasetLayout(small_toy_root)
    ref = load_image(layout.train_images(HELDOUT_CLASS)[0])
    with pytest.raises(ValueError):
        infer(model, backbone, [], [ref])
    before = {k: v.clone() for k, v in model.state_dict().items()}
    timings = {}
    odd = np.zeros((48, 80, 3), np.float32)
    maps = infer(model, backbone, [ref], [ref, odd], timings=timings)
    assert maps[0].map.shape == (64, 64) and maps[1].map.shape == (48, 80)
    assert all(0 <= m.map.min() and m.map.max() <= 1 and m.image_score == m.map.max() for m in maps)
    assert set(timings) == {"dictionary_s", "per_query_s"}
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])


def test_model_batched_forward_matches_per_item():
    spec = build_backbone({"name": "random-projection", "image_size": 32, "channels": 8}).spec
    model = DictionaryModel(spec, ModelConfig(num_heads=2))
    q = [torch.randn(3, 4, 4, 8) for _ in range(spec.num_layers)]
    r = [torch.randn(3, 2, 4, 4, 8) for _ in range(spec.num_layers)]
    out = model(q, r)
    from dictas.backbone import PatchFeatureStack

    for i in range(3):
        d = model.build_dictionary(PatchFeatureStack([x[i] for x in r]))
        one = model.retrieve(PatchFeatureStack([x[i : i + 1] for x in q]), d).layers
        for a, b in zip(out, one):
            assert torch.allclose(a[i : i + 1], b, atol=1e-6)


# evaluation


def _write_seed(root, layout, cat, make_map):
    items = layout.test_items(cat)
    maps = []
    for item in items:
        m = make_map(item)
        maps.append(AnomalyMap(m, float(m.max())))
    write_predictions(root, cat, items, maps)


def _gt(item, shape=(64, 64)):
    from dictas.pipeline.data import load_mask

    return load_mask(item.mask).astype(float) if item.mask else np.zeros(shape)


def test_perfect_and_constant_maps(small_toy_root, tmp_path):
    layout = DatasetLayout(small_toy_root)
    _write_seed(tmp_path / "perfect", layout, HELDOUT_CLASS, _gt)
    rep = evaluate(tmp_path / "perfect", layout, [HELDOUT_CLASS])
    m = rep.mean[HELDOUT_CLASS]
    assert m["pixel.auroc"] == 1.0 and m["pixel.ap"] == 1.0
    assert m["pixel.pro"] == pytest.approx(1.0, abs=1e-12)
    assert m["image.auroc"] == 1.0
    _write_seed(tmp_path / "const", layout, HELDOUT_CLASS, lambda i: np.full((64, 64), 0.5))
    rep = evaluate(tmp_path / "const", layout, [HELDOUT_CLASS])
    assert rep.mean[HELDOUT_CLASS]["pixel.auroc"] == 0.5


def test_predictions_round_trip(small_toy_root, tmp_path):
    layout = DatasetLayout(small_toy_root)
    rng = np.random.default_rng(0)
    _write_seed(tmp_path, layout, HELDOUT_CLASS, lambda i: rng.random((64, 64)))
    maps, scores = read_predictions(tmp_path, HELDOUT_CLASS, layout.test_items(HELDOUT_CLASS))
    assert len(maps) == len(scores) == 4
    assert all(s == pytest.approx(m.max(), abs=1e-4) for m, s in zip(maps, scores))


def test_missing_map_is_an_error(small_toy_root, tmp_path):
    layout = DatasetLayout(small_toy_root)
    _write_seed(tmp_path, layout, HELDOUT_CLASS, _gt)
    next((tmp_path / HELDOUT_CLASS / "blob").glob("*.png")).unlink()
    with pytest.raises(FileNotFoundError):
        evaluate(tmp_path, layout, [HELDOUT_CLASS])


def test_five_seed_report(small_toy_root, tmp_path):
    layout = DatasetLayout(small_toy_root)
    rng = np.random.default_rng(0)
    for s in range(5):
        _write_seed(seed_dir(tmp_path, s), layout, HELDOUT_CLASS, lambda i: np.clip(_gt(i) * 0.5 + rng.random((64, 64)) * 0.6, 0, 1))
    rep = evaluate(tmp_path, layout, [HELDOUT_CLASS], n_seeds=5)
    assert rep.seeds == 5 and rep.rows() == [HELDOUT_CLASS, "mean"]
    table = format_table(rep)
    assert "pixel (AUROC, PRO, AP)" in table and "image (AUROC, F1-max, AP)" in table
    assert table.count("±") == 2 * 6
    table_path, kv = write_report(rep, tmp_path / "report.txt")
    sections = parse_manifest(kv.read_text())
    assert sections[""]["seeds"] == "5"
    assert float(sections["mean"]["metric.pixel.auroc"]) == pytest.approx(rep.mean["mean"]["pixel.auroc"])
    assert "metric.image.f1_max.std" in sections[HELDOUT_CLASS]
    with pytest.raises(FileNotFoundError):
        evaluate(tmp_path, layout, [HELDOUT_CLASS], n_seeds=6)


def test_aggregate_mean_and_std():
    keys = ("pixel.auroc", "pixel.pro", "pixel.ap", "image.auroc", "image.f1_max", "image.ap")
    seed = lambda a, b: {"x": dict.fromkeys(keys, a), "y": dict.fromkeys(keys, b)}
    rep = aggregate([seed(0.8, 0.6), seed(1.0, 0.6)])
    assert rep.mean["x"]["pixel.auroc"] == pytest.approx(0.9)
    assert rep.std["x"]["pixel.auroc"] == pytest.approx(0.1)
    assert rep.mean[Report.MEAN_ROW]["image.ap"] == pytest.approx(0.75)
    assert rep.std[Report.MEAN_ROW]["image.ap"] == pytest.approx(0.05)


def test_run_predictions_layout(small_toy_root, tmp_path):
    model, backbone = _model(small_config())
    layout = DatasetLayout(small_toy_root)
    roots = run_predictions(model, backbone, layout, [HELDOUT_CLASS], 2, [0, 1], tmp_path)
    assert [r.name for r in roots] == ["seed_0", "seed_1"]
    assert len(list((roots[0] / HELDOUT_CLASS).rglob("*.png"))) == 4
    items, maps = predict_category(model, backbone, layout, HELDOUT_CLASS, 2, 0)
    stored, _ = read_predictions(roots[0], HELDOUT_CLASS, items)
    assert all(np.abs(a - m.map).max() <= 0.5 / 65535 + 1e-12 for a, m in zip(stored, maps))


# command line


def test_cli_end_to_end(small_toy_root, tmp_path, capsys):
    sets = sum((["--set", s] for s in SMALL + ["train.max_steps=2"]), [])
    ckpt = tmp_path / "m.zip"
    assert cli_main(["train", "--config", "toy", "--data", str(small_toy_root), "--out", str(ckpt), *sets]) == 0
    assert ckpt.is_file() and json.loads((tmp_path / "m.zip.losses.json").read_text())["steps"]
    cat = small_toy_root / HELDOUT_CLASS
    out = tmp_path / "maps"
    args = ["infer", "--ckpt", str(ckpt), "--ref-dir", str(cat / "train" / "good"), "--query-dir", str(cat / "test"),
            "--shots", "2", "--lookup", "dense", "--out", str(out), "--timing"]
    assert cli_main(args) == 0
    assert len(list(out.rglob("*.png"))) == 4 and len((out / "scores.txt").read_text().splitlines()) == 4
    pred = tmp_path / "pred"
    assert cli_main(["predict", "--ckpt", str(ckpt), "--data", str(small_toy_root), "--shots", "2",
                     "--seeds", "2", "--out", str(pred)]) == 0
    report = tmp_path / "report.txt"
    assert cli_main(["eval", "--pred-dir", str(pred), "--data", str(small_toy_root), "--report", str(report),
                     "--seeds", "2"]) == 0
    assert "±" in report.read_text()
    png = tmp_path / "fig.png"
    assert cli_main(["report-plot", "--report", str(report), "--out", str(png), "--pred-dir", str(pred),
                     "--data", str(small_toy_root)]) == 0
    assert png.stat().st_size > 0
    capsys.readouterr()


def test_cli_make_toy_and_errors(tmp_path, capsys):
    assert cli_main(["make-toy", "--out", str(tmp_path / "toy"), "--size", "32"]) == 0
    assert (tmp_path / "toy" / HELDOUT_CLASS / "ground_truth").is_dir()
    assert cli_main(["eval", "--pred-dir", str(tmp_path / "none"), "--data", str(tmp_path / "toy"),
                     "--report", str(tmp_path / "r.txt")]) == 2
    assert cli_main(["train", "--config", "no-such-config", "--data", str(tmp_path), "--out", "x"]) == 2
    assert "error:" in capsys.readouterr().err


def test_benchmark_refuses_overlap(small_toy_root, tmp_path, capsys):
    args = ["benchmark", "--config", "toy", "--aux-data", str(small_toy_root), "--data", str(small_toy_root),
            "--out", str(tmp_path), "--set", "protocol.test_categories=[stripes]"]
    assert cli_main(args) == 2
    assert "overlap" in capsys.readouterr().err


def test_packaged_configs_resolve():
    assert resolve_config("toy").name == "toy.yaml"
    assert resolve_config("full").name == "full.yaml"
    Config.load(resolve_config("full"))


def test_plot_without_predictions(tmp_path):
    from dictas.pipeline.plot import manifest_matrix, plot_report

    keys = ("pixel.auroc", "pixel.pro", "pixel.ap", "image.auroc", "image.f1_max", "image.ap")
    rep = aggregate([{"a": dict.fromkeys(keys, 0.9), "b": {**dict.fromkeys(keys, 0.5), "pixel.pro": float("nan")}}])
    path, kv = write_report(rep, tmp_path / "r.txt")
    rows, cols, vals = manifest_matrix(kv.read_text())
    assert rows == ["a", "b", "mean"] and vals.shape == (3, 6) and np.isnan(vals[1, 1])
    assert plot_report(path, tmp_path / "fig.png").is_file()
