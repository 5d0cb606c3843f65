"""Frozen feature extractors and text-prompt embeddings.

Two extractors ship with the package:

* :class:`RandomProjectionBackbone` - a seeded, weight-free extractor (block
  means followed by fixed random projections). Every test runs on it.
* :class:`ClipBackbone` - an adapter around a pretrained CLIP checkpoint
  loaded through ``transformers``. Intermediate transformer layers are read out
  as patch-token grids; the class token is dropped.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DEFAULT_CLIP_LAYERS = (6, 12, 18, 24)

# CLIP preprocessing statistics (RGB).
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    patch_grid: tuple[int, int]
    channels: int
    selected_layers: tuple[int, ...]
    embed_dim: int
    image_size: int = 336
    extra: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if len(self.selected_layers) < 1:
            raise ValueError("at least one layer must be selected")
        if any(b <= a for a, b in zip(self.selected_layers, self.selected_layers[1:])):
            raise ValueError(f"selected_layers must be strictly increasing: {self.selected_layers}")
        h, w = self.patch_grid
        if min(h, w, self.channels, self.embed_dim, self.image_size) <= 0:
            raise ValueError("grid, channels, embed_dim and image_size must be positive")

    @property
    def num_layers(self) -> int:
        return len(self.selected_layers)

    def fingerprint(self) -> str:
        payload = {
            "name": self.name,
            "patch_grid": list(self.patch_grid),
            "channels": self.channels,
            "selected_layers": list(self.selected_layers),
            "embed_dim": self.embed_dim,
            "image_size": self.image_size,
            "extra": self.extra,
        }
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class PatchFeatureStack:
    """Per-layer patch features for a set of images.

    ``layers[l]`` has shape ``(num_images, H, W, C)``.
    """

    layers: list[torch.Tensor]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("feature stack needs at least one layer")
        shape = self.layers[0].shape
        if len(shape) != 4:
            raise ValueError(f"expected (n, H, W, C) layers, got {tuple(shape)}")
        for t in self.layers[1:]:
            if t.shape != shape:
                raise ValueError("all layers must share (n, H, W, C)")
        if shape[0] < 1:
            raise ValueError("feature stack holds no images")

    @property
    def image_count(self) -> int:
        return self.layers[0].shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return tuple(self.layers[0].shape[1:3])

    @property
    def channels(self) -> int:
        return self.layers[0].shape[3]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def select(self, index) -> "PatchFeatureStack":
        """Slice the image axis of every layer."""
        if isinstance(index, int):
            index = slice(index, index + 1)
        return PatchFeatureStack([t[index] for t in self.layers])

    def flattened(self) -> list[torch.Tensor]:
        """Layers as ``(n*H*W, C)`` matrices (images concatenated)."""
        return [t.reshape(-1, t.shape[-1]) for t in self.layers]

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(t).all()) for t in self.layers)


@dataclass
class TextEmbeddingPair:
    normal: torch.Tensor
    abnormal: torch.Tensor

    def __post_init__(self):
        for name in ("normal", "abnormal"):
            v = getattr(self, name)
            if abs(float(v.norm()) - 1.0) > 1e-6:
                raise ValueError(f"{name} text embedding is not unit-norm")

    def as_matrix(self) -> torch.Tensor:
        return torch.stack([self.normal, self.abnormal])


def patch_grid_for(image_size: int, patch_size: int) -> tuple[int, int]:
    if image_size % patch_size:
        raise ValueError(f"image size {image_size} is not a multiple of patch size {patch_size}")
    n = image_size // patch_size
    return n, n


def images_to_tensor(images: Sequence[np.ndarray], size: int) -> torch.Tensor:
    """Stack HxWx3 float images in [0, 1] into an (n, 3, size, size) tensor.

    Resizing is bicubic; the result is clamped back to [0, 1].
    """
    if len(images) == 0:
        raise ValueError("empty batch")
    shapes = {np.asarray(im).shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"images must share one shape, got {sorted(shapes)}")
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected RGB images of shape (h, w, 3), got {arr.shape[1:]}")
    x = torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()
    if x.shape[-2:] != (size, size):
        x = F.interpolate(x, size=(size, size), mode="bicubic", align_corners=False).clamp_(0.0, 1.0)
    return x


class Backbone:
    """Interface shared by feature extractors."""

    spec: BackboneSpec

    def extract(self, images: Sequence[np.ndarray]) -> PatchFeatureStack:
        raise NotImplementedError

    def encode_text(self, prompts: Sequence[str]) -> torch.Tensor:
        raise NotImplementedError


def extract_patch_features(images: Sequence[np.ndarray], backbone: Backbone) -> PatchFeatureStack:
    return backbone.extract(images)


def pool_patch_features(stack: PatchFeatureStack, kernel: int = 3) -> PatchFeatureStack:
    """Average each patch over its ``kernel x kernel`` neighbourhood.

    Borders are replicated so the grid keeps its size.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"pooling kernel must be odd and >= 1, got {kernel}")
    if kernel == 1:
        return PatchFeatureStack(list(stack.layers))
    pad = kernel // 2
    out = []
    for t in stack.layers:
        x = t.permute(0, 3, 1, 2)
        x = F.pad(x, (pad, pad, pad, pad), mode="replicate")
        x = F.avg_pool2d(x, kernel, stride=1)
        out.append(x.permute(0, 2, 3, 1).contiguous())
    return PatchFeatureStack(out)


class RandomProjectionBackbone(Backbone):
    """Weight-free deterministic extractor for tests and desk-scale runs.

    The image is cut into ``patch_size`` blocks. Layer ``i`` averages each block
    down by ``2**i`` (block means), then applies a fixed Gaussian projection to
    ``channels`` dimensions followed by ``scale * tanh(gain * .)``. Projections
    come from ``seed``.
    """

    def __init__(
        self,
        image_size: int = 64,
        patch_size: int = 8,
        channels: int = 32,
        num_layers: int = 2,
        embed_dim: int = 32,
        seed: int = 0,
        gain: float = 2.0,
        scale: float = 4.0,
        equal_norm: bool = False,
    ):
        if num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        self.patch_size = patch_size
        self.gain = gain
        self.scale = scale
        self.equal_norm = equal_norm
        self.seed = seed
        self.spec = BackboneSpec(
            name="random-projection",
            patch_grid=patch_grid_for(image_size, patch_size),
            channels=channels,
            selected_layers=tuple(range(1, num_layers + 1)),
            embed_dim=embed_dim,
            image_size=image_size,
            extra={"patch_size": patch_size, "seed": seed, "gain": gain, "scale": scale, "equal_norm": equal_norm},
        )
        gen = torch.Generator().manual_seed(seed)
        self._factors = []
        self._projections = []
        for i in range(num_layers):
            factor = min(2**i, patch_size)
            while patch_size % factor:
                factor //= 2
            side = patch_size // factor
            d_in = side * side * 3
            proj = torch.randn(d_in, channels, generator=gen, dtype=torch.float64) / np.sqrt(d_in)
            self._factors.append(factor)
            self._projections.append(proj.float())

    def extract(self, images: Sequence[np.ndarray]) -> PatchFeatureStack:
        x = images_to_tensor(images, self.spec.image_size) - 0.5
        n = x.shape[0]
        gh, gw = self.spec.patch_grid
        p = self.patch_size
        layers = []
        for factor, proj in zip(self._factors, self._projections):
            y = F.avg_pool2d(x, factor) if factor > 1 else x
            side = p // factor
            # (n, 3, gh, side, gw, side) -> (n, gh, gw, side, side, 3)
            blocks = y.reshape(n, 3, gh, side, gw, side).permute(0, 2, 4, 3, 5, 1)
            blocks = blocks.reshape(n, gh, gw, side * side * 3)
            f = torch.tanh(self.gain * blocks @ proj)
            if self.equal_norm:
                f = F.normalize(f, dim=-1) * np.sqrt(f.shape[-1])
            layers.append(self.scale * f)
        return PatchFeatureStack(layers)

    def encode_text(self, prompts: Sequence[str]) -> torch.Tensor:
        return torch.stack([hash_text_embedding(p, self.spec.embed_dim) for p in prompts])


def hash_text_embedding(prompt: str, dim: int) -> torch.Tensor:
    """Deterministic pseudo-embedding seeded by the SHA-256 of ``prompt``."""
    digest = hashlib.sha256(prompt.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return torch.from_numpy(rng.standard_normal(dim)).float()


class ClipBackbone(Backbone):
    """Adapter for a CLIP checkpoint loaded with ``transformers``.

    Patch tokens of the selected vision layers (1-indexed transformer blocks)
    are returned as (n, H, W, C) grids. Text prompts are encoded with the
    joint-embedding text tower.
    """

    def __init__(self, model, tokenizer=None, layers: Sequence[int] = DEFAULT_CLIP_LAYERS, name: str = "clip"):
        vcfg = model.config.vision_config
        if max(layers) > vcfg.num_hidden_layers or min(layers) < 1:
            raise ValueError(
                f"layer indices {tuple(layers)} out of range for a {vcfg.num_hidden_layers}-layer encoder"
            )
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.tokenizer = tokenizer
        self.spec = BackboneSpec(
            name=name,
            patch_grid=patch_grid_for(vcfg.image_size, vcfg.patch_size),
            channels=vcfg.hidden_size,
            selected_layers=tuple(layers),
            embed_dim=model.config.projection_dim,
            image_size=vcfg.image_size,
        )

    @classmethod
    def from_pretrained(cls, weights_path: str | Path, layers: Sequence[int] = DEFAULT_CLIP_LAYERS) -> "ClipBackbone":
        try:
            from transformers import CLIPModel, CLIPTokenizer
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise ImportError("the CLIP backbone needs `pip install transformers`") from exc
        model = CLIPModel.from_pretrained(str(weights_path))
        tokenizer = CLIPTokenizer.from_pretrained(str(weights_path))
        return cls(model, tokenizer, layers=layers, name=f"clip:{Path(weights_path).name}")

    @torch.no_grad()
    def extract(self, images: Sequence[np.ndarray]) -> PatchFeatureStack:
        x = images_to_tensor(images, self.spec.image_size)
        mean = torch.tensor(CLIP_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(CLIP_STD).view(1, 3, 1, 1)
        x = (x - mean) / std
        dtype = next(self.model.parameters()).dtype
        out = self.model.vision_model(pixel_values=x.to(dtype), output_hidden_states=True)
        gh, gw = self.spec.patch_grid
        layers = []
        for l in self.spec.selected_layers:
            tokens = out.hidden_states[l][:, 1:, :]
            layers.append(tokens.reshape(tokens.shape[0], gh, gw, -1).float())
        return PatchFeatureStack(layers)

    @torch.no_grad()
    def encode_text(self, prompts: Sequence[str]) -> torch.Tensor:
        if self.tokenizer is None:
            raise RuntimeError("this CLIP backbone was built without a tokenizer")
        tok = self.tokenizer(list(prompts), padding=True, return_tensors="pt")
        feats = self.model.get_text_features(input_ids=tok["input_ids"], attention_mask=tok.get("attention_mask"))
        if not isinstance(feats, torch.Tensor):
            feats = feats.pooler_output
        return feats.float()


def build_backbone(cfg: dict) -> Backbone:
    """Construct a backbone from the ``backbone`` config block."""
    name = cfg.get("name", "random-projection")
    if name == "random-projection":
        keys = ("image_size", "patch_size", "channels", "num_layers", "embed_dim", "seed", "gain", "scale", "equal_norm")
        unknown = set(cfg) - set(keys) - {"name"}
        if unknown:
            raise KeyError(f"unknown random-projection backbone keys: {sorted(unknown)}")
        return RandomProjectionBackbone(**{k: cfg[k] for k in keys if k in cfg})
    if name == "clip":
        if not cfg.get("weights_path"):
            raise ValueError("backbone.weights_path is required for the clip backbone")
        unknown = set(cfg) - {"name", "weights_path", "layers", "image_size"}
        if unknown:
            raise KeyError(f"unknown clip backbone keys: {sorted(unknown)}")
        bb = ClipBackbone.from_pretrained(cfg["weights_path"], layers=cfg.get("layers", DEFAULT_CLIP_LAYERS))
        want = cfg.get("image_size")
        if want is not None and bb.spec.image_size != want:
            raise ValueError(f"weights expect {bb.spec.image_size} px input, config asks for {want}")
        return bb
    raise ValueError(f"unknown backbone {name!r}")


# ---------------------------------------------------------------------------
# Prompt ensembles

DEFAULT_TEMPLATES = (
    "a photo of a [state] [class].",
    "a photo of the [state] [class].",
    "a cropped photo of the [state] [class].",
    "a close-up photo of a [state] [class].",
    "a bright photo of a [state] [class].",
    "a dark photo of the [state] [class].",
    "a blurry photo of the [state] [class].",
    "a photo of a small [state] [class].",
    "a photo of a large [state] [class].",
    "a photo of the [state] [class] for visual inspection.",
    "a photo of a [state] [class] for anomaly detection.",
)
DEFAULT_NORMAL_STATES = ("", "flawless", "perfect", "unblemished", "good", "normal")
DEFAULT_ABNORMAL_STATES = ("damaged", "broken", "defective", "flawed", "abnormal", "anomalous")


def instantiate_prompts(class_name: str, templates: Sequence[str], states: Sequence[str]) -> list[str]:
    prompts = []
    for template in templates:
        for state in states:
            text = template.replace("[state]", state).replace("[class]", class_name)
            prompts.append(" ".join(text.split()))
    return prompts


def build_text_embeddings(
    class_name: str,
    templates: Sequence[str],
    normal_states: Sequence[str],
    abnormal_states: Sequence[str],
    text_encoder: Callable[[Sequence[str]], torch.Tensor],
) -> TextEmbeddingPair:
    """Average normalised prompt encodings per polarity, then renormalise."""
    if not templates:
        raise ValueError("empty template list")
    if not normal_states or not abnormal_states:
        raise ValueError("empty state list")
    rows = []
    for states in (normal_states, abnormal_states):
        enc = text_encoder(instantiate_prompts(class_name, templates, states)).double()
        enc = enc / enc.norm(dim=-1, keepdim=True)
        mean = enc.mean(dim=0)
        rows.append((mean / mean.norm()).float())
    return TextEmbeddingPair(normal=rows[0], abnormal=rows[1])


def load_prompt_file(path: str | Path) -> tuple[list[str], list[str], list[str]]:
    """Read templates and state words from a UTF-8 prompt file.

    Lines holding ``[state]``/``[class]`` placeholders are templates.
    ``normal: a, b`` and ``abnormal: c, d`` lines list state words; ``#`` starts a
    comment. Missing sections fall back to the built-in lists.
    """
    templates, normal, abnormal = [], [], []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, rest = line.partition(":")
        if sep and key.strip().lower() in ("normal", "abnormal") and "[" not in key:
            words = [w.strip() for w in rest.split(",")]
            (normal if key.strip().lower() == "normal" else abnormal).extend(words)
        else:
            templates.append(line)
    return (
        templates or list(DEFAULT_TEMPLATES),
        normal or list(DEFAULT_NORMAL_STATES),
        abnormal or list(DEFAULT_ABNORMAL_STATES),
    )
