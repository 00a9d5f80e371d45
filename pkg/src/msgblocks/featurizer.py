"""Metadata feature extraction: sender, affiliation, timestamp, enum and numeric fields.

Vector layout (fixed once fitted)::

    senders K_s | affiliations K_a | sender_freq 1 | day 7 | working_hours 1 |
    rush B | enum one-hots (sum of option counts) | numerics M
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .corpus import Dataset, Message

SECONDS_PER_DAY = 86400


@dataclass(frozen=True)
class FeaturizerConfig:
    top_senders: int = 120
    top_affiliations: int = 120
    rush_bins: int = 50
    work_start_hour: int = 9
    work_end_hour: int = 18
    weekday_only: bool = True


@dataclass
class FeaturizerModel:
    config: FeaturizerConfig
    top_senders: list[str]
    top_affiliations: list[str]
    sender_freq: dict[str, float]
    rush_bins: list[float]
    enum_vocabs: dict[str, list[str]]
    numeric_stats: dict[str, tuple[float, float]]
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self._index = {
            "sender": {s: i for i, s in enumerate(self.top_senders)},
            "aff": {a: i for i, a in enumerate(self.top_affiliations)},
            "enum": {f: {o: i for i, o in enumerate(opts)} for f, opts in self.enum_vocabs.items()},
        }
        self._edges = np.asarray(self.rush_bins, dtype=np.float64)

    def layout(self) -> list[tuple[str, int]]:
        cfg = self.config
        parts = [("senders", cfg.top_senders), ("affiliations", cfg.top_affiliations),
                 ("sender_freq", 1), ("day", 7), ("working_hours", 1), ("rush", cfg.rush_bins)]
        parts += [(f"enum:{f}", len(opts)) for f, opts in self.enum_vocabs.items()]
        parts += [(f"numeric:{f}", 1) for f in self.numeric_stats]
        return parts

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, size in self.layout():
            out[name] = slice(start, start + size)
            start += size
        return out

    @property
    def dim(self) -> int:
        return sum(size for _, size in self.layout())

    # -- serialisation ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "msgblocks-featurizer",
            "version": 1,
            "config": asdict(self.config),
            "top_senders": self.top_senders,
            "top_affiliations": self.top_affiliations,
            "sender_freq": self.sender_freq,
            "rush_bins": self.rush_bins,
            "enum_vocabs": self.enum_vocabs,
            "numeric_stats": {k: list(v) for k, v in self.numeric_stats.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeaturizerModel":
        if d.get("format") != "msgblocks-featurizer":
            raise ValueError("not a featurizer file")
        return cls(
            config=FeaturizerConfig(**d["config"]),
            top_senders=list(d["top_senders"]),
            top_affiliations=list(d["top_affiliations"]),
            sender_freq={k: float(v) for k, v in d["sender_freq"].items()},
            rush_bins=[float(x) for x in d["rush_bins"]],
            enum_vocabs={k: list(v) for k, v in d["enum_vocabs"].items()},
            numeric_stats={k: (float(v[0]), float(v[1])) for k, v in d["numeric_stats"].items()},
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "FeaturizerModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def affiliation_of(m: Message) -> str | None:
    if m.affiliation:
        return m.affiliation
    if m.sender and "@" in m.sender:
        return m.sender.rsplit("@", 1)[1] or None
    return None


def _top(counts: Counter, k: int) -> list[str]:
    return [key for key, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:k]]


def rush_edges(n_bins: int) -> list[float]:
    width = SECONDS_PER_DAY / n_bins
    return [i * width for i in range(n_bins)]


def fit(train: Dataset | Iterable[Message], config: FeaturizerConfig | None = None) -> FeaturizerModel:
    cfg = config or FeaturizerConfig()
    messages = list(train)
    if not messages:
        raise ValueError("cannot fit a featurizer on no messages")
    senders = Counter(m.sender for m in messages if m.sender is not None)
    affs = Counter(a for a in map(affiliation_of, messages) if a is not None)
    enum_opts: dict[str, set[str]] = {}
    numeric_vals: dict[str, list[float]] = {}
    for m in messages:
        for f, v in m.enums.items():
            enum_opts.setdefault(f, set()).add(v)
        for f, v in m.numerics.items():
            numeric_vals.setdefault(f, []).append(v)
    stats = {}
    for f in sorted(numeric_vals):
        vals = numeric_vals[f]
        # fsum keeps the statistics independent of message order
        mean = math.fsum(vals) / len(vals)
        std = math.sqrt(math.fsum((x - mean) ** 2 for x in vals) / len(vals))
        stats[f] = (mean, std if std > 0 else 1.0)
    n = len(messages)
    return FeaturizerModel(
        config=cfg,
        top_senders=_top(senders, cfg.top_senders),
        top_affiliations=_top(affs, cfg.top_affiliations),
        sender_freq={s: c / n for s, c in sorted(senders.items())},
        rush_bins=rush_edges(cfg.rush_bins),
        enum_vocabs={f: sorted(enum_opts[f]) for f in sorted(enum_opts)},
        numeric_stats=stats,
    )


def rush_bin(model: FeaturizerModel, seconds_of_day: float) -> int:
    return int(np.searchsorted(model._edges, seconds_of_day, side="right") - 1)


def transform(model: FeaturizerModel, m: Message) -> np.ndarray:
    cfg = model.config
    sl = model.slices()
    v = np.zeros(model.dim)
    idx = model._index
    if m.sender is not None:
        if m.sender in idx["sender"]:
            v[sl["senders"].start + idx["sender"][m.sender]] = 1.0
        v[sl["sender_freq"].start] = model.sender_freq.get(m.sender, 0.0)
    aff = affiliation_of(m)
    if aff is not None and aff in idx["aff"]:
        v[sl["affiliations"].start + idx["aff"][aff]] = 1.0
    ts = m.timestamp
    if ts is not None:
        wd = ts.weekday()
        v[sl["day"].start + wd] = 1.0
        in_hours = cfg.work_start_hour <= ts.hour < cfg.work_end_hour
        if in_hours and (wd < 5 or not cfg.weekday_only):
            v[sl["working_hours"].start] = 1.0
        secs = ts.hour * 3600 + ts.minute * 60 + ts.second + ts.microsecond / 1e6
        v[sl["rush"].start + rush_bin(model, secs)] = 1.0
    for f, opts in idx["enum"].items():
        val = m.enums.get(f)
        if val is not None and val in opts:
            v[sl[f"enum:{f}"].start + opts[val]] = 1.0
    for f, (mean, std) in model.numeric_stats.items():
        if f in m.numerics:
            v[sl[f"numeric:{f}"].start] = (m.numerics[f] - mean) / std
    return v


def transform_many(model: FeaturizerModel, messages: Iterable[Message]) -> np.ndarray:
    rows = [transform(model, m) for m in messages]
    return np.vstack(rows) if rows else np.zeros((0, model.dim))


def feature_dim(model: FeaturizerModel) -> int:
    return model.dim
