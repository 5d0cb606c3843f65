"""Dictionary construction: query/key/value generators built from attention blocks."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .backbone import PatchFeatureStack


class AttnBlock(nn.Module):
    """Multi-head self-attention followed by a two-layer MLP.

    ``out = MLP(softmax(Q K^T / sqrt(C)) V)`` with the heads concatenated before
    the MLP. The logit scale uses the full channel width ``C``. There is no
    residual, no normalisation and no positional encoding.

    Args:
        dim: channel width ``C``.
        num_heads: number of attention heads; must divide ``dim``.
        mlp_ratio: hidden width of the MLP as a multiple of ``dim``.
        zero_init_out: zero the last MLP layer so the block starts as the zero map.
        init_std: standard deviation of the (truncated) normal init of every weight.
    """

    def __init__(
        self,
        dim: int,
        num_heads: int = 8,
        mlp_ratio: float = 4.0,
        zero_init_out: bool = False,
        init_std: float = 0.02,
    ):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"channel dim {dim} is not divisible by num_heads={num_heads}")
        self.dim = dim
        self.num_heads = num_heads
        hidden = int(dim * mlp_ratio)
        self.proj_q = nn.Linear(dim, dim)
        self.proj_k = nn.Linear(dim, dim)
        self.proj_v = nn.Linear(dim, dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.reset_parameters(init_std, zero_init_out)

    def reset_parameters(self, init_std: float = 0.02, zero_init_out: bool = False):
        for lin in (self.proj_q, self.proj_k, self.proj_v, self.fc1, self.fc2):
            nn.init.trunc_normal_(lin.weight, std=init_std, a=-2 * init_std, b=2 * init_std)
            nn.init.zeros_(lin.bias)
        if zero_init_out:
            nn.init.zeros_(self.fc2.weight)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        *lead, n, c = x.shape
        h = self.num_heads

        def heads(t):
            return t.reshape(*lead, n, h, c // h).transpose(-3, -2)

        q, k, v = heads(self.proj_q(x)), heads(self.proj_k(x)), heads(self.proj_v(x))
        attn = torch.softmax(q @ k.transpose(-1, -2) / self.dim**0.5, dim=-1)
        out = attn @ v
        return out.transpose(-3, -2).reshape(*lead, n, c)

    def mlp(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected channel dim {self.dim}, got {x.shape[-1]}")
        if x.shape[-2] < 1:
            raise ValueError("attention block needs at least one token")
        return self.mlp(self.attention(x))


def attn_block_forward(features: torch.Tensor, block: AttnBlock) -> torch.Tensor:
    return block(features)


class LayerGenerators(nn.Module):
    """The query, key and value generators of one feature layer."""

    def __init__(self, dim: int, num_heads: int = 8, mlp_ratio: float = 4.0, init_std: float = 0.02):
        super().__init__()
        self.q = AttnBlock(dim, num_heads, mlp_ratio, init_std=init_std)
        self.k = AttnBlock(dim, num_heads, mlp_ratio, init_std=init_std)
        # zero-init keeps F_V == F_n at step 0
        self.v = AttnBlock(dim, num_heads, mlp_ratio, zero_init_out=True, init_std=init_std)

    def tie_query_to_key(self):
        self.q.load_state_dict(self.k.state_dict())


class GeneratorSet(nn.Module):
    """Independent per-layer generator triples."""

    def __init__(
        self,
        num_layers: int,
        dim: int,
        num_heads: int = 8,
        mlp_ratio: float = 4.0,
        init_std: float = 0.02,
    ):
        super().__init__()
        self.layers = nn.ModuleList(
            LayerGenerators(dim, num_heads, mlp_ratio, init_std) for _ in range(num_layers)
        )
        self.dim = dim

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, idx: int) -> LayerGenerators:
        return self.layers[idx]


def _check_dim(features: torch.Tensor, block: AttnBlock):
    if features.shape[-1] != block.dim:
        raise ValueError(f"feature dim {features.shape[-1]} does not match generator dim {block.dim}")


def generate_query(features: torch.Tensor, gen: LayerGenerators) -> torch.Tensor:
    _check_dim(features, gen.q)
    return gen.q(features)


def generate_key(features: torch.Tensor, gen: LayerGenerators) -> torch.Tensor:
    _check_dim(features, gen.k)
    return gen.k(features)


def generate_value(features: torch.Tensor, gen: LayerGenerators) -> torch.Tensor:
    _check_dim(features, gen.v)
    return features + gen.v(features)


@dataclass
class Dictionary:
    """Per-layer key/value matrices of shape ``(..., k*H*W, C)``."""

    keys: list[torch.Tensor]
    values: list[torch.Tensor]

    def __post_init__(self):
        if len(self.keys) != len(self.values):
            raise ValueError("key and value layer counts differ")
        for k, v in zip(self.keys, self.values):
            if k.shape != v.shape:
                raise ValueError("key and value rows must match")

    @property
    def num_layers(self) -> int:
        return len(self.keys)

    @property
    def size(self) -> int:
        return self.keys[0].shape[-2]


def build_dictionary(ref_stack: PatchFeatureStack, gens: GeneratorSet) -> Dictionary:
    """Concatenate the k reference images per layer and generate keys and values."""
    if ref_stack.num_layers != len(gens):
        raise ValueError(f"stack has {ref_stack.num_layers} layers but generators cover {len(gens)}")
    keys, values = [], []
    for feats, gen in zip(ref_stack.flattened(), gens.layers):
        keys.append(generate_key(feats, gen))
        values.append(generate_value(feats, gen))
    return Dictionary(keys, values)


def build_dictionary_batched(ref_layers: list[torch.Tensor], gens: GeneratorSet) -> Dictionary:
    """Batched variant: ``ref_layers[l]`` is ``(B, k, H, W, C)``, one dictionary per item."""
    if len(ref_layers) != len(gens):
        raise ValueError(f"got {len(ref_layers)} layers but generators cover {len(gens)}")
    keys, values = [], []
    for feats, gen in zip(ref_layers, gens.layers):
        flat = feats.reshape(feats.shape[0], -1, feats.shape[-1])
        keys.append(generate_key(flat, gen))
        values.append(generate_value(flat, gen))
    return Dictionary(keys, values)
