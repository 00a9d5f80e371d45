"""Run configuration, loadable from a YAML file.

Example ``config.yaml``::

    model:      {d_model: 64, n_layers: 2, n_heads: 4, d_ff: 128, t_max: 64, vocab_size: 8000}
    featurizer: {top_senders: 120, top_affiliations: 120, rush_bins: 50}
    optimizer:  {kind: adam, lr: 0.001}
    training:   {epochs: 10, batch_size: 32}
    forest:     {n_trees: 250}
    split:      {train: 0.6, val: 0.2, test: 0.2}
    methods:    [1, 2, 3, 4, 5, 6, 7, 8, 9, 10]

Missing sections or keys fall back to the defaults below.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .featurizer import FeaturizerConfig


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    t_max: int = 64
    vocab_size: int = 8000
    combine_hidden: int | None = None
    # average combine: mean of raw block outputs (False) or of per-block softmaxes (True)
    average_probs: bool = False


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 5.0


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 10
    batch_size: int = 32


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 250
    max_depth: int | None = None
    min_samples_leaf: int = 1
    bootstrap: bool = True
    max_features: str | int = "sqrt"


@dataclass(frozen=True)
class SplitConfig:
    train: float = 0.6
    val: float = 0.2
    test: float = 0.2


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    featurizer: FeaturizerConfig = field(default_factory=FeaturizerConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    methods: tuple[int, ...] = tuple(range(1, 11))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = dict(d or {})
        sections = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(sections)
        if unknown:
            raise ValueError(f"unknown config section(s): {sorted(unknown)}")
        kwargs = {}
        for name, section_cls in (("model", ModelConfig), ("featurizer", FeaturizerConfig),
                                  ("optimizer", OptimizerConfig), ("training", TrainingConfig),
                                  ("forest", ForestConfig), ("split", SplitConfig)):
            if d.get(name) is not None:
                allowed = {f.name for f in fields(section_cls)}
                bad = set(d[name]) - allowed
                if bad:
                    raise ValueError(f"unknown key(s) in [{name}]: {sorted(bad)}")
                kwargs[name] = section_cls(**d[name])
        if d.get("methods") is not None:
            kwargs["methods"] = tuple(int(m) for m in d["methods"])
        return cls(**kwargs)

    def replace(self, **sections) -> "RunConfig":
        """Copy with whole sections or ``section={key: value}`` overrides merged in."""
        d = self.to_dict()
        for name, value in sections.items():
            if isinstance(value, dict):
                d[name].update(value)
            else:
                d[name] = asdict(value) if hasattr(value, "__dataclass_fields__") else value
        return RunConfig.from_dict(d)


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.from_dict(yaml.safe_load(Path(path).read_text(encoding="utf-8")))
