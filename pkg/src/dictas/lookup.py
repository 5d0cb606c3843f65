"""Dictionary lookup: query-key matching and weighted fusion of dictionary values.

Three fusion strategies are supported: ``maximum`` (one-hot argmax),
``dense`` (softmax) and ``sparse`` (Euclidean projection onto the probability
simplex, i.e. sparsemax). All of them operate on the last axis and accept
arbitrary leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .backbone import PatchFeatureStack
from .dictionary import Dictionary, GeneratorSet, generate_query

STRATEGIES = ("maximum", "dense", "sparse")


def _shifted_threshold(z: torch.Tensor):
    """``(z - s, tau - s, s)`` with the integer shift ``s = floor(max z)``.

    Working relative to ``s`` keeps the arithmetic near zero; since ``s`` moves
    with integer shifts of ``z``, ``z + c`` for integer ``c`` reproduces the same
    bits whenever ``z + c`` is itself exact.
    """
    if z.shape[-1] == 0:
        raise ValueError("cannot threshold an empty similarity vector")
    shift = torch.floor(z.detach().max(dim=-1, keepdim=True).values)
    zs = z - shift
    z_sorted, _ = torch.sort(zs, dim=-1, descending=True, stable=True)
    cumsum = z_sorted.cumsum(dim=-1)
    t = torch.arange(1, z.shape[-1] + 1, dtype=z.dtype, device=z.device)
    candidates = (cumsum - 1) / t
    support = z_sorted > candidates
    # support is a prefix of the sorted order; t* = number of True entries
    t_star = support.sum(dim=-1, keepdim=True)
    return zs, candidates.gather(-1, t_star - 1), shift


def adaptive_threshold(z: torch.Tensor) -> torch.Tensor:
    """Threshold ``tau`` such that ``max(z - tau, 0)`` sums to one.

    Sorts descending (stable), forms ``tau_t = (cumsum_t - 1) / t`` and keeps the
    candidate at the largest ``t`` with ``z_(t) > tau_t``. Works row-wise on the
    last axis; returns a tensor with that axis reduced.
    """
    _, tau, shift = _shifted_threshold(z)
    return (tau + shift).squeeze(-1)


class _SparseProject(torch.autograd.Function):
    @staticmethod
    def forward(ctx, z):
        zs, tau, _ = _shifted_threshold(z)
        w = torch.clamp(zs - tau, min=0)
        ctx.save_for_backward(w)
        return w

    @staticmethod
    def backward(ctx, grad_out):
        (w,) = ctx.saved_tensors
        support = (w > 0).to(grad_out.dtype)
        size = support.sum(dim=-1, keepdim=True)
        mean = (grad_out * support).sum(dim=-1, keepdim=True) / size
        return support * (grad_out - mean)


def sparse_project(z: torch.Tensor) -> torch.Tensor:
    """Project ``z`` onto the probability simplex along the last axis."""
    if z.shape[-1] == 0:
        raise ValueError("cannot project an empty similarity vector")
    return _SparseProject.apply(z)


def match_query_key(x_q: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
    """Raw dot-product similarities ``x_q @ keys^T``."""
    if x_q.shape[-1] != keys.shape[-1]:
        raise ValueError(f"query dim {x_q.shape[-1]} does not match key dim {keys.shape[-1]}")
    return x_q @ keys.transpose(-1, -2)


def fusion_weights(z: torch.Tensor, strategy: str = "sparse") -> torch.Tensor:
    if strategy == "maximum":
        idx = torch.argmax(z, dim=-1, keepdim=True)  # first maximal index on ties
        return torch.zeros_like(z).scatter_(-1, idx, 1.0)
    if strategy == "dense":
        return torch.softmax(z, dim=-1)
    if strategy == "sparse":
        return sparse_project(z)
    raise ValueError(f"unknown lookup strategy {strategy!r}; choose from {STRATEGIES}")


def fuse(z: torch.Tensor, values: torch.Tensor, strategy: str = "sparse") -> torch.Tensor:
    if z.shape[-1] != values.shape[-2]:
        raise ValueError(f"{z.shape[-1]} similarity scores for {values.shape[-2]} dictionary values")
    return fusion_weights(z, strategy) @ values


# rows per similarity block; BLAS results depend on the matrix shape, so every
# call sees exactly this many rows and the output of a row never depends on how
# many other rows are looked up with it
LOOKUP_BLOCK = 64


def lookup(
    queries: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    strategy: str = "sparse",
    normalize: bool = False,
) -> torch.Tensor:
    """Retrieve every query row from one dictionary layer.

    ``queries`` is ``(..., N, C)``, ``keys``/``values`` are ``(..., M, C)``. The
    ``(N, M)`` similarity matrix is built ``LOOKUP_BLOCK`` query rows at a time,
    zero-padding the last block, which bounds memory by ``LOOKUP_BLOCK * M`` and
    makes any block-aligned split of the rows bit-identical to the whole.
    """
    if normalize:
        queries = torch.nn.functional.normalize(queries, dim=-1)
        keys = torch.nn.functional.normalize(keys, dim=-1)
    n = queries.shape[-2]
    pad = -n % LOOKUP_BLOCK
    if pad:
        queries = torch.nn.functional.pad(queries, (0, 0, 0, pad))
    parts = [
        fuse(match_query_key(queries[..., s : s + LOOKUP_BLOCK, :], keys), values, strategy)
        for s in range(0, n + pad, LOOKUP_BLOCK)
    ]
    return torch.cat(parts, dim=-2)[..., :n, :]


@dataclass
class RetrievalResult:
    """Retrieved features per layer, shaped like the query stack ``(n, H, W, C)``."""

    layers: list[torch.Tensor]

    def as_stack(self) -> PatchFeatureStack:
        return PatchFeatureStack(self.layers)


def retrieve(
    query_stack: PatchFeatureStack,
    gens: GeneratorSet,
    dictionary: Dictionary,
    strategy: str = "sparse",
    normalize: bool = False,
) -> RetrievalResult:
    """Retrieve each query image's patches from a shared dictionary.

    Every image in ``query_stack`` is looked up independently against the same
    dictionary (built once from the references).
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown lookup strategy {strategy!r}; choose from {STRATEGIES}")
    if query_stack.num_layers != dictionary.num_layers or query_stack.num_layers != len(gens):
        raise ValueError("query stack, generators and dictionary disagree on the layer count")
    n, h, w = query_stack.image_count, *query_stack.grid
    out = []
    for feats, gen, keys, values in zip(query_stack.layers, gens.layers, dictionary.keys, dictionary.values):
        if feats.shape[-1] != keys.shape[-1]:
            raise ValueError("query and dictionary channel widths differ")
        flat = feats.reshape(n, h * w, feats.shape[-1])
        q = generate_query(flat, gen)
        r = lookup(q, keys, values, strategy, normalize=normalize)
        out.append(r.reshape(n, h, w, -1))
    return RetrievalResult(out)
