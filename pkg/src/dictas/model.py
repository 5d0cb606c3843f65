"""Trainable part of the detector: per-layer generators plus the text-alignment head."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .backbone import BackboneSpec, PatchFeatureStack
from .dictionary import Dictionary, GeneratorSet, build_dictionary, build_dictionary_batched
from .lookup import STRATEGIES, RetrievalResult, lookup, retrieve
from .dictionary import generate_query
from .losses import TacHead


@dataclass
class ModelConfig:
    num_heads: int = 8
    mlp_ratio: float = 4.0
    init_std: float = 0.02
    pool_kernel: int = 3
    lookup: str = "sparse"
    normalize_lookup: bool = False

    def __post_init__(self):
        if self.lookup not in STRATEGIES:
            raise ValueError(f"unknown lookup strategy {self.lookup!r}")


class DictionaryModel(nn.Module):
    def __init__(self, spec: BackboneSpec, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.spec = spec
        self.generators = GeneratorSet(
            spec.num_layers, spec.channels, self.cfg.num_heads, self.cfg.mlp_ratio, self.cfg.init_std
        )
        self.tac_head = TacHead(spec.num_layers * spec.channels, spec.embed_dim)

    def build_dictionary(self, ref_stack: PatchFeatureStack) -> Dictionary:
        return build_dictionary(ref_stack, self.generators)

    def retrieve(self, query_stack: PatchFeatureStack, dictionary: Dictionary, strategy: str | None = None) -> RetrievalResult:
        return retrieve(
            query_stack,
            self.generators,
            dictionary,
            strategy or self.cfg.lookup,
            normalize=self.cfg.normalize_lookup,
        )

    def forward(self, query_layers: list[torch.Tensor], ref_layers: list[torch.Tensor], strategy: str | None = None):
        """Batched retrieval with one dictionary per batch item.

        ``query_layers[l]`` is ``(B, H, W, C)``; ``ref_layers[l]`` is ``(B, k, H, W, C)``.
        Returns the retrieved layers shaped like ``query_layers``.
        """
        strategy = strategy or self.cfg.lookup
        dictionary = build_dictionary_batched(ref_layers, self.generators)
        out = []
        for feats, gen, keys, values in zip(query_layers, self.generators.layers, dictionary.keys, dictionary.values):
            b, h, w, c = feats.shape
            q = generate_query(feats.reshape(b, h * w, c), gen)
            r = lookup(q, keys, values, strategy, normalize=self.cfg.normalize_lookup)
            out.append(r.reshape(b, h, w, c))
        return out

    # parameter naming used by the checkpoint archive
    def named_arrays(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, p in self.named_parameters():
            if name.startswith("generators.layers."):
                name = "gen." + name[len("generators.layers.") :]
            elif name.startswith("tac_head."):
                name = "tac." + name[len("tac_head.") :]
            out[name] = p
        return out

    def load_arrays(self, arrays: dict[str, torch.Tensor]):
        own = self.named_arrays()
        missing = set(own) - set(arrays)
        extra = set(arrays) - set(own)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        with torch.no_grad():
            for name, p in own.items():
                src = torch.as_tensor(arrays[name])
                if src.shape != p.shape:
                    raise ValueError(f"{name}: shape {tuple(src.shape)} != {tuple(p.shape)}")
                p.copy_(src)
