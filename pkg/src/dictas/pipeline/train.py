"""Self-supervised training on auxiliary images with synthesised anomalies."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from ..backbone import (
    Backbone,
    DEFAULT_ABNORMAL_STATES,
    DEFAULT_NORMAL_STATES,
    DEFAULT_TEMPLATES,
    PatchFeatureStack,
    build_text_embeddings,
    load_prompt_file,
    pool_patch_features,
)
from ..losses import LossParts, cqc_loss, query_loss, tac_loss, total_loss
from ..model import DictionaryModel
from ..synthesis import derive_seed, make_training_pair, mask_to_patch_grid
from .config import Config
from .data import load_image

log = logging.getLogger(__name__)

# seed streams
_STREAM_INIT = 11
_STREAM_ORDER = 12
_STREAM_SAMPLE = 13


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: DictionaryModel
    step_losses: list[dict] = field(default_factory=list)
    epoch_losses: list[dict] = field(default_factory=list)
    epochs_completed: int = 0
    steps: int = 0


class ImagePool:
    """Auxiliary images, loaded lazily at the backbone resolution and cached."""

    def __init__(self, items: Sequence[tuple[Path | np.ndarray, str]], size: int, cache: bool = True):
        if not items:
            raise ValueError("auxiliary dataset is empty")
        self.items = list(items)
        self.size = size
        self.cache = cache
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.items)

    def category(self, i: int) -> str:
        return self.items[i][1]

    def __getitem__(self, i: int) -> np.ndarray:
        if i in self._cache:
            return self._cache[i]
        src = self.items[i][0]
        if isinstance(src, np.ndarray):
            img = src.astype(np.float32)
            if img.shape[:2] != (self.size, self.size):
                from ..synthesis import resize_image

                img = resize_image(img, (self.size, self.size))
        else:
            img = load_image(src, self.size)
        if self.cache:
            self._cache[i] = img
        return img


def text_embedding_provider(backbone: Backbone, prompt_file: str | None = None) -> Callable[[str], torch.Tensor]:
    if prompt_file:
        templates, normal, abnormal = load_prompt_file(prompt_file)
    else:
        templates, normal, abnormal = DEFAULT_TEMPLATES, DEFAULT_NORMAL_STATES, DEFAULT_ABNORMAL_STATES
    cache: dict[str, torch.Tensor] = {}

    def get(category: str) -> torch.Tensor:
        if category not in cache:
            name = category.replace("_", " ")
            pair = build_text_embeddings(name, templates, normal, abnormal, backbone.encode_text)
            cache[category] = pair.as_matrix()
        return cache[category]

    return get


def init_model(backbone: Backbone, cfg: Config) -> DictionaryModel:
    torch.manual_seed(derive_seed(cfg.train.seed, _STREAM_INIT))
    return DictionaryModel(backbone.spec, cfg.model)


def features(backbone: Backbone, images: Sequence[np.ndarray], pool_kernel: int) -> PatchFeatureStack:
    with torch.no_grad():
        return pool_patch_features(backbone.extract(images), pool_kernel)


def make_batch(pool: ImagePool, indices: Sequence[int], sample_ids: Sequence[int], cfg: Config, grid):
    """Synthesise one batch; returns queries, references, patch labels, image labels, categories."""
    queries, refs, patch_labels, labels, cats = [], [], [], [], []
    n = len(pool)
    for idx, sid in zip(indices, sample_ids):
        x = pool[idx]
        for attempt in range(100):
            seed = derive_seed(cfg.train.seed, _STREAM_SAMPLE, sid, attempt)

            def source(s, idx=idx):
                j = int(np.random.default_rng(s).integers(n - 1)) if n > 1 else 0
                return pool[j + 1 if n > 1 and j >= idx else j]

            sample = make_training_pair(x, cfg.synthesis, cfg.train.k_train, seed, source, cfg.reference)
            grid_mask = mask_to_patch_grid(sample.mask, grid)
            if not grid_mask.all():
                break
        else:
            raise RuntimeError("could not synthesise a sample with normal patches")
        queries.append(sample.query_image)
        refs.extend(sample.reference_images)
        patch_labels.append(grid_mask)
        labels.append(sample.label)
        cats.append(pool.category(idx))
    return queries, refs, np.stack(patch_labels), np.array(labels), cats


def compute_losses(model: DictionaryModel, q_layers, r_layers, patch_labels, labels, text, cfg: Config) -> LossParts:
    lq = query_loss(q_layers, r_layers, patch_labels)
    lc = cqc_loss(q_layers, r_layers, patch_labels)
    lt = tac_loss(q_layers, r_layers, text, labels, model.tac_head, cfg.tac.logit_scale)
    tot = total_loss(lq, lc, lt, cfg.loss.lambda_cqc, cfg.loss.lambda_tac)
    return LossParts(lq, lc, lt, tot)


def train(
    cfg: Config,
    aux_items: Sequence[tuple[Path | np.ndarray, str]],
    backbone: Backbone,
    model: DictionaryModel | None = None,
    on_step: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """Train the generators and text head.

    Each step synthesises a batch of (query, k references) pairs, extracts and
    pools frozen features, retrieves every query from its own dictionary and
    takes one Adam step on the weighted loss. Runs ``train.epochs`` epochs, or
    stops after ``train.max_steps`` optimisation steps when set.
    """
    tc = cfg.train
    pool = ImagePool(aux_items, backbone.spec.image_size)
    model = model or init_model(backbone, cfg)
    model.train()
    text_for = text_embedding_provider(backbone, cfg.tac.prompt_file)
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr, betas=tuple(tc.betas), weight_decay=0.0)
    grid = backbone.spec.patch_grid
    k = tc.k_train
    steps_per_epoch = math.ceil(len(pool) / tc.batch_size)
    epochs = tc.epochs
    if tc.max_steps is not None:
        epochs = math.ceil(tc.max_steps / steps_per_epoch)
    result = TrainResult(model)
    step = 0
    sample_id = 0
    t0 = time.perf_counter()
    for epoch in range(epochs):
        order = np.random.default_rng(derive_seed(tc.seed, _STREAM_ORDER, epoch)).permutation(len(pool))
        epoch_parts = []
        for b in range(steps_per_epoch):
            if tc.max_steps is not None and step >= tc.max_steps:
                break
            idx = order[b * tc.batch_size : (b + 1) * tc.batch_size]
            ids = list(range(sample_id, sample_id + len(idx)))
            sample_id += len(idx)
            queries, refs, patch_labels, labels, cats = make_batch(pool, idx, ids, cfg, grid)
            fq = features(backbone, queries, cfg.model.pool_kernel)
            fn = features(backbone, refs, cfg.model.pool_kernel)
            bsz = len(queries)
            ref_layers = [t.reshape(bsz, k, *t.shape[1:]) for t in fn.layers]
            text = torch.stack([text_for(c) for c in cats])

            r_layers = model(fq.layers, ref_layers)
            parts = compute_losses(
                model, fq.layers, r_layers, torch.from_numpy(patch_labels), torch.from_numpy(labels), text, cfg
            )
            if not torch.isfinite(parts.total):
                raise NonFiniteLossError(f"non-finite loss at step {step}: {parts.as_floats()}")
            opt.zero_grad(set_to_none=True)
            parts.total.backward()
            opt.step()

            record = {"epoch": epoch, "step": step, **parts.as_floats()}
            result.step_losses.append(record)
            epoch_parts.append(record)
            if on_step:
                on_step(step, record)
            if tc.log_every and step % tc.log_every == 0:
                log.info(
                    "epoch %d step %d  loss %.4f  (query %.4f  cqc %.4f  tac %.4f)  %.1fs",
                    epoch, step, record["total"], record["query"], record["cqc"], record["tac"],
                    time.perf_counter() - t0,
                )
            step += 1
        if epoch_parts:
            result.epoch_losses.append(
                {"epoch": epoch, **{k_: float(np.mean([r[k_] for r in epoch_parts])) for k_ in ("query", "cqc", "tac", "total")}}
            )
            result.epochs_completed = epoch + 1
    result.steps = step
    model.eval()
    return result
