"""Run configuration: one hierarchical document covering every stage.

Loaded from YAML or JSON. Unknown keys anywhere in the document are
rejected, and the resolved config is echoed into each output directory.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .dsp import InvalidInputError


@dataclass
class DataSection:
    episodes: dict = field(default_factory=lambda: {"flip": 40, "scoop": 60, "zip": 50})
    seed: int = 0
    noise_sigma: float = 0.002
    extra_pool: int = 30  # extra scoop demos for the 1.5x scaling point


@dataclass
class PretrainSection:
    avid_pairs: int = 2000
    avid_epochs: int = 30
    avid_batch_size: int = 64
    avid_lr: float = 1e-4
    byol_epochs: int = 100
    byol_batch_size: int = 128
    byol_lr: float = 3e-4
    seed: int = 0


@dataclass
class TrainSection:
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 15
    lr: float = 0.001
    aug_prob: float = 0.5
    horizon: int = 8
    val_fraction: float = 0.1


@dataclass
class EvalSection:
    n_episodes: int = 20
    seed: int = 0
    h: int = 2
    configs: list = field(default_factory=lambda: ["train", "test_a", "test_b"])


@dataclass
class TSNESection:
    perplexity: float = 30.0
    max_iter: int = 1000
    learning_rate: float = 200.0
    seed: int = 0
    n_episodes: int = 2


@dataclass
class RunConfig:
    scale: str = "desk"
    tasks: list = field(default_factory=lambda: ["flip", "scoop", "zip"])
    methods: list = field(default_factory=lambda: ["ours", "byol", "scratch", "vision_only"])
    seeds: list = field(default_factory=lambda: [0])
    out_root: str = "out"
    data: DataSection = field(default_factory=DataSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    tsne: TSNESection = field(default_factory=TSNESection)

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise InvalidInputError(f"{where or 'config'}: expected a mapping, got {type(doc).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise InvalidInputError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for name, value in doc.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else known[name].default
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(doc: dict | None) -> RunConfig:
    cfg = _build(RunConfig, doc or {}, "")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    from . import simworld as sw
    from .bctrain import METHODS
    from .encoders import SCALES

    if cfg.scale not in SCALES:
        raise InvalidInputError(f"scale must be one of {tuple(SCALES)}, got {cfg.scale!r}")
    for t in cfg.tasks:
        if t not in sw.TASKS:
            raise InvalidInputError(f"unknown task {t!r}")
    for m in cfg.methods:
        if m not in METHODS:
            raise InvalidInputError(f"unknown method {m!r}")
    for c in cfg.eval.configs:
        if c not in sw.CONFIG_IDS:
            raise InvalidInputError(f"unknown config id {c!r}")
    unknown = set(cfg.data.episodes) - set(sw.TASKS)
    if unknown:
        raise InvalidInputError(f"unknown task(s) in data.episodes: {sorted(unknown)}")


def read_document(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    text = p.read_text()
    try:
        doc = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise InvalidInputError(f"{p}: cannot parse config: {exc}") from exc
    return doc or {}


def merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; ``override`` wins on leaves."""
    out = dict(base)
    for k, v in (override or {}).items():
        out[k] = merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path) -> RunConfig:
    return from_dict(read_document(path))


def render_size(scale: str) -> tuple[int, int]:
    from .encoders import SCALES

    return tuple(SCALES[scale].render_size)


def dump_config(cfg: RunConfig, path) -> Path:
    p = Path(path)
    p.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return p
