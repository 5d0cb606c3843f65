import time

import numpy as np
import pytest
import torch

from dictas.backbone import build_backbone
from dictas.cli import resolve_config
from dictas.losses import query_loss
from dictas.pipeline.config import Config
from dictas.pipeline.data import DatasetLayout, aux_training_images
from dictas.pipeline.evaluate import category_metrics
from dictas.pipeline.protocol import predict_category
from dictas.pipeline.train import ImagePool, features, init_model, make_batch, train
from dictas.toy import AUX_CLASSES, HELDOUT_CLASS, make_toy_corpus

GATE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if GATE_LINES:
        terminalreporter.section("acceptance gate")
        for line in GATE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    return make_toy_corpus(tmp_path_factory.mktemp("toy"), size=128)


@pytest.fixture(scope="session")
def small_toy_root(tmp_path_factory):
    return make_toy_corpus(tmp_path_factory.mktemp("toy64"), size=64, n_train=4, n_test_good=2, n_test_defect=1)


def probe_query_loss(model, backbone, pool, cfg, batch):
    """Query loss of ``model`` on a fixed synthetic batch (k=1 references)."""
    q_layers, r_layers, labels = batch
    with torch.no_grad():
        return float(query_loss(q_layers, model(q_layers, r_layers), labels))


def make_probe_batch(backbone, pool, cfg, seed=999):
    probe_cfg = cfg.with_overrides([f"train.seed={seed}", "train.k_train=1"])
    n = len(pool)
    q, r, patch_labels, _, _ = make_batch(pool, range(n), range(10**6, 10**6 + n), probe_cfg, backbone.spec.patch_grid)
    fq = features(backbone, q, cfg.model.pool_kernel)
    fr = features(backbone, r, cfg.model.pool_kernel)
    refs = [t.reshape(n, 1, *t.shape[1:]) for t in fr.layers]
    return fq.layers, refs, torch.from_numpy(patch_labels)


def heldout_pixel_metrics(model, backbone, layout, shots=4, seed=0):
    items, maps = predict_category(model, backbone, layout, HELDOUT_CLASS, shots, seed)
    return category_metrics([m.map for m in maps], [m.image_score for m in maps], items)


@pytest.fixture(scope="session")
def toy_run(toy_root):
    """One training run of the packaged toy config, plus before/after measurements."""
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    cfg = Config.load(resolve_config("toy"))
    backbone = build_backbone(cfg.backbone)
    layout = DatasetLayout(toy_root)
    aux = aux_training_images(layout, list(AUX_CLASSES))
    pool = ImagePool(aux, backbone.spec.image_size)
    probe = make_probe_batch(backbone, pool, cfg)

    untrained = init_model(backbone, cfg)
    before_probe = probe_query_loss(untrained, backbone, pool, cfg, probe)
    before = heldout_pixel_metrics(untrained, backbone, layout)

    result = train(cfg, aux, backbone)
    after_probe = probe_query_loss(result.model, backbone, pool, cfg, probe)
    after = heldout_pixel_metrics(result.model, backbone, layout)
    return {
        "cfg": cfg,
        "backbone": backbone,
        "layout": layout,
        "result": result,
        "untrained": untrained,
        "probe_before": before_probe,
        "probe_after": after_probe,
        "metrics_before": before,
        "metrics_after": after,
        "seconds": time.perf_counter() - t0,
    }


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def central_differences(fn, tensors, eps=1e-5):
    """Numerical gradient of scalar ``fn()`` w.r.t. each tensor, element by element."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                hi = float(fn())
                flat[i] = old - eps
                lo = float(fn())
                flat[i] = old
                gflat[i] = (hi - lo) / (2 * eps)
            grads.append(g)
    return grads


def gradient_rel_error(fn, tensors, eps=1e-5, floor=1e-6):
    """Largest element-wise relative error between autograd and central differences."""
    for t in tensors:
        t.grad = None
    fn().backward()
    # parameters cut off by an argmax get no grad at all, which means zero
    analytic = [torch.zeros_like(t) if t.grad is None else t.grad.detach().clone() for t in tensors]
    numeric = central_differences(fn, tensors, eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        worst = max(worst, float(rel_err(a.numpy(), n.numpy(), floor).max()))
    return worst
