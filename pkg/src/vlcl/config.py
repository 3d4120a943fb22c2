"""Run configuration: nested dataclasses read from / written to YAML.

Unknown keys anywhere are rejected, and ``RunConfig.from_dict(cfg.to_dict()) == cfg``
for every config that passes validation.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Tuple

import yaml

from .autoview import AugmentConfig, ViewConfig
from .contrast import ContrastConfig
from .datasets import SyntheticSpec
from .encoder import EncoderConfig
from .errors import ConfigError
from .trainer import TrainConfig


@dataclass(frozen=True)
class MergeSpec:
    ids: Tuple[int, ...]
    name: str

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))


@dataclass(frozen=True)
class DataConfig:
    """``source`` is ``synthetic`` (generated from ``synthetic``) or ``folder`` (``root``).

    Classes are split into disjoint train / held-out sets: ``train_classes`` is either a
    count (random split with ``split_seed``) or an explicit list of class ids.
    ``merge`` groups are applied to the training split after splitting.
    """

    source: str = "synthetic"
    root: Optional[str] = None
    image_size: int = 32
    synthetic: SyntheticSpec = field(default_factory=lambda: SyntheticSpec(num_coarse_classes=24, samples_per_subcat=30))
    train_classes: Any = 16
    split_seed: int = 0
    merge: Tuple[MergeSpec, ...] = ()

    def __post_init__(self):
        if self.source not in ("synthetic", "folder"):
            raise ConfigError("data.source must be 'synthetic' or 'folder'")
        if self.source == "folder" and not self.root:
            raise ConfigError("data.root is required for folder datasets")
        if self.source == "synthetic" and self.synthetic.image_size != self.image_size:
            raise ConfigError("data.synthetic.image_size must equal data.image_size")
        if isinstance(self.train_classes, (list, tuple)):
            object.__setattr__(self, "train_classes", tuple(int(c) for c in self.train_classes))
        elif not isinstance(self.train_classes, int) or isinstance(self.train_classes, bool):
            raise ConfigError("data.train_classes must be a count or a list of class ids")
        object.__setattr__(self, "merge", tuple(self.merge))


@dataclass(frozen=True)
class EvalConfig:
    n_way: int = 5
    k_shot: int = 1
    m_query: int = 16
    n_episodes: int = 600
    seed: int = 1
    fine_grained: bool = True

    def __post_init__(self):
        if min(self.n_way, self.k_shot, self.m_query, self.n_episodes) < 1:
            raise ConfigError("eval counts must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    views: ViewConfig = field(default_factory=ViewConfig)
    contrast: ContrastConfig = field(default_factory=ContrastConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"

    def __post_init__(self):
        size = self.data.image_size
        if self.encoder.image_size != size or self.views.image_size != size:
            raise ConfigError("encoder.image_size and views.image_size must equal data.image_size")

    # --- (de)serialisation ---------------------------------------------------------

    def to_dict(self) -> dict:
        return _to_plain(self)

    @classmethod
    def from_dict(cls, raw: Optional[dict]) -> "RunConfig":
        return _build(cls, raw or {}, "")

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(raw)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=int(seed)))


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    return obj


_NESTED = {
    (RunConfig, "data"): DataConfig,
    (RunConfig, "encoder"): EncoderConfig,
    (RunConfig, "views"): ViewConfig,
    (RunConfig, "contrast"): ContrastConfig,
    (RunConfig, "augment"): AugmentConfig,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "eval"): EvalConfig,
    (DataConfig, "synthetic"): SyntheticSpec,
}


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        path = f"{where}.{key}" if where else key
        sub = _NESTED.get((cls, key))
        if sub is not None:
            kwargs[key] = _build(sub, value or {}, path)
        elif cls is DataConfig and key == "merge":
            kwargs[key] = tuple(_build(MergeSpec, m, f"{path}[{i}]") for i, m in enumerate(value or []))
        else:
            kwargs[key] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def desk_preset(**train_overrides) -> RunConfig:
    """Laptop-CPU preset: 5 epochs x 200 iterations on the synthetic generator.

    A small beta with a per-sample (mean) contrastive loss; keyword arguments override
    :class:`TrainConfig` fields.
    """
    train = dict(beta=0.3, epochs=5, iterations_per_epoch=200, lr=0.1, lr_milestones=(3, 4),
                 lr_values=(0.01, 0.001))
    train.update(train_overrides)
    return RunConfig(
        encoder=EncoderConfig(conv_channels=(16, 32, 32)),
        contrast=ContrastConfig(reduction="mean"),
        train=TrainConfig(**train),
        output_dir="runs/desk",
    )


PROBE_MERGE = MergeSpec(ids=tuple(range(9)), name="merged")


def probe_preset(beta: float = 1.0, seed: int = 0, **train_overrides) -> RunConfig:
    """Merged-class probe: nine training classes collapse into one label.

    Their sub-categories are scored by silhouette on the training set and held-out
    sub-categories by fine-grained episode accuracy.  Otherwise the desk preset.
    """
    base = desk_preset(beta=beta, seed=seed, **train_overrides)
    return dataclasses.replace(base, data=dataclasses.replace(base.data, merge=(PROBE_MERGE,)),
                               output_dir=f"runs/probe_beta{beta:g}_seed{seed}")
