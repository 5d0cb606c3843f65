"""Checkpoint archive: a zip with ``manifest.json`` and one raw tensor blob per parameter.

Blobs are little-endian float32 in C order, stored under ``tensors/<name>.f32``.
The manifest records shapes, the backbone fingerprint, a config snapshot and
the epoch counter.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..backbone import BackboneSpec
from ..model import DictionaryModel, ModelConfig

FORMAT = "dictas-checkpoint"
VERSION = 1
_LE_F32 = np.dtype("<f4")


class FingerprintMismatch(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    fingerprint: str
    config: dict = field(default_factory=dict)
    epoch: int = 0
    spec: dict | None = None

    @classmethod
    def from_model(cls, model: DictionaryModel, config: dict | None = None, epoch: int = 0) -> "Checkpoint":
        params = {
            name: p.detach().cpu().numpy().astype(_LE_F32, copy=True) for name, p in model.named_arrays().items()
        }
        return cls(params, model.spec.fingerprint(), dict(config or {}), epoch, _spec_dict(model.spec))

    def check(self, spec: BackboneSpec):
        got = spec.fingerprint()
        if got != self.fingerprint:
            raise FingerprintMismatch(
                f"checkpoint was trained for backbone {self.fingerprint[:12]}, current backbone is {got[:12]}"
            )

    def to_model(self, spec: BackboneSpec, model_cfg: ModelConfig | None = None) -> DictionaryModel:
        self.check(spec)
        if model_cfg is None:
            model_cfg = ModelConfig(**self.config.get("model", {}))
        model = DictionaryModel(spec, model_cfg)
        model.load_arrays({k: torch.from_numpy(v.astype(np.float32)) for k, v in self.params.items()})
        model.eval()
        return model


def _spec_dict(spec: BackboneSpec) -> dict:
    return {
        "name": spec.name,
        "patch_grid": list(spec.patch_grid),
        "channels": spec.channels,
        "selected_layers": list(spec.selected_layers),
        "embed_dim": spec.embed_dim,
        "image_size": spec.image_size,
    }


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype=_LE_F32)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"refusing to save non-finite tensor {name}")
        tensors[name] = {"shape": list(arr.shape), "dtype": "float32-le", "file": f"tensors/{name}.f32"}
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "fingerprint": ckpt.fingerprint,
        "epoch": ckpt.epoch,
        "backbone": ckpt.spec,
        "config": ckpt.config,
        "tensors": tensors,
    }
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for name, meta in tensors.items():
            zf.writestr(meta["file"], np.ascontiguousarray(ckpt.params[name], dtype=_LE_F32).tobytes())
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json").decode("utf-8"))
        if manifest.get("format") != FORMAT:
            raise ValueError(f"{path} is not a checkpoint archive")
        if manifest.get("version") != VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
        params = {}
        for name, meta in manifest["tensors"].items():
            raw = zf.read(meta["file"])
            arr = np.frombuffer(raw, dtype=_LE_F32)
            shape = tuple(meta["shape"])
            if arr.size != int(np.prod(shape, dtype=np.int64)):
                raise ValueError(f"blob {name} has {arr.size} values, manifest says {shape}")
            params[name] = arr.reshape(shape).copy()
    return Checkpoint(params, manifest["fingerprint"], manifest.get("config", {}), manifest.get("epoch", 0), manifest.get("backbone"))
