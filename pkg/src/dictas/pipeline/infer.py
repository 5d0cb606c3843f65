"""k-shot inference: one dictionary from the references, reused for every query."""

from __future__ import annotations

import time
from typing import Sequence

import numpy as np
import torch

from ..backbone import Backbone, pool_patch_features
from ..model import DictionaryModel
from ..scoring import AnomalyMap, anomaly_map, image_score


@torch.no_grad()
def infer(
    model: DictionaryModel,
    backbone: Backbone,
    reference_images: Sequence[np.ndarray],
    query_images: Sequence[np.ndarray],
    strategy: str | None = None,
    smooth_sigma: float | None = 4.0,
    batch_size: int = 8,
    timings: dict | None = None,
) -> list[AnomalyMap]:
    """Anomaly maps for ``query_images`` given ``k >= 1`` normal references.

    Maps come back at each query's own resolution. When ``timings`` is a dict
    it receives wall-clock seconds for the dictionary build and per query.
    """
    if len(reference_images) < 1:
        raise ValueError("inference needs at least one reference image")
    was_training = model.training
    model.eval()
    kernel = model.cfg.pool_kernel
    t0 = time.perf_counter()
    refs = pool_patch_features(backbone.extract(reference_images), kernel)
    dictionary = model.build_dictionary(refs)
    t1 = time.perf_counter()
    out: list[AnomalyMap] = []
    for start in range(0, len(query_images), batch_size):
        chunk = list(query_images[start : start + batch_size])
        by_shape: dict[tuple, list[int]] = {}
        for i, im in enumerate(chunk):
            by_shape.setdefault(np.asarray(im).shape[:2], []).append(i)
        maps: dict[int, AnomalyMap] = {}
        for hw, idx in by_shape.items():
            q = pool_patch_features(backbone.extract([chunk[i] for i in idx]), kernel)
            r = model.retrieve(q, dictionary, strategy)
            m = anomaly_map(q.layers, r.layers, hw, smooth_sigma)
            for j, i in enumerate(idx):
                maps[i] = AnomalyMap(m[j], image_score(m[j]))
        out.extend(maps[i] for i in range(len(chunk)))
    if timings is not None:
        n = max(len(query_images), 1)
        timings.update(dictionary_s=t1 - t0, per_query_s=(time.perf_counter() - t1) / n)
    model.train(was_training)
    return out
