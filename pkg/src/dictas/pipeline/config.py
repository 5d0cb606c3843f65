"""Configuration tree loaded from YAML with dotted ``key=value`` overrides."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml

from ..model import ModelConfig
from ..synthesis import ReferenceTransformConfig, SynthesisConfig


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-4
    batch_size: int = 24
    k_train: int = 1
    seed: int = 0
    max_steps: int | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    log_every: int = 10

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.k_train) < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size, k_train and lr must be positive")


@dataclass
class LossConfig:
    lambda_cqc: float = 0.1
    lambda_tac: float = 0.1


@dataclass
class TacConfig:
    logit_scale: float = 100.0
    prompt_file: str | None = None


@dataclass
class InferConfig:
    shots: int = 4
    smooth_sigma: float = 4.0
    seed: int = 0


@dataclass
class EvalConfig:
    fpr_limit: float = 0.3
    pooled: bool = True


@dataclass
class ProtocolConfig:
    shots: tuple[int, ...] = (1, 2, 4, 8, 16)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    train_categories: list[str] | None = None
    test_categories: list[str] | None = None
    allow_overlap: bool = False


@dataclass
class Config:
    backbone: dict = field(default_factory=lambda: {"name": "random-projection"})
    data: dict = field(default_factory=dict)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    reference: ReferenceTransformConfig = field(default_factory=ReferenceTransformConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    tac: TacConfig = field(default_factory=TacConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, tree: dict | None) -> "Config":
        return _build(cls, tree or {})

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: list[str] | None = None) -> "Config":
        tree = {}
        if path:
            tree = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        for item in overrides or []:
            apply_override(tree, item)
        return cls.from_dict(tree)

    def dump(self, path: str | Path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")

    def with_overrides(self, overrides: list[str]) -> "Config":
        tree = self.to_dict()
        for item in overrides:
            apply_override(tree, item)
        return Config.from_dict(tree)


def apply_override(tree: dict, item: str):
    """Set ``a.b.c=value`` in a nested dict; the value is parsed as YAML."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ValueError(f"override {item!r} is not of the form key=value")
    node = tree
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ValueError(f"cannot descend into non-mapping at {part!r} in {item!r}")
    node[parts[-1]] = _parse_scalar(raw)


def _parse_scalar(raw: str):
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            pass
    return value


def _build(cls, tree: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(tree) - set(known)
    if unknown:
        raise KeyError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, f in known.items():
        if name not in tree:
            continue
        value = tree[name]
        current = getattr(defaults, name)
        if is_dataclass(current) and isinstance(value, dict):
            kwargs[name] = _build(type(current), value)
        elif isinstance(current, dict) and isinstance(value, dict):
            merged = copy.deepcopy(current)
            merged.update(value)
            kwargs[name] = merged
        elif isinstance(current, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        elif isinstance(current, float) and isinstance(value, (str, int)) and not isinstance(value, bool):
            kwargs[name] = float(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _plain(obj: Any):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj
