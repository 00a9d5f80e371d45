"""Message records, JSONL ingestion, subset preparation and seeded splits.

JSONL schema, one object per line::

    {"id": "r1", "text": "great phone", "label": "electronics",
     "sender": "a@x.com", "affiliation": "x.com",
     "timestamp": "2010-03-01T13:45:00Z",
     "enums": {"stars": "4"}, "numerics": {"helpful": 3}}

Only ``text`` and ``label`` are required.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Any, Mapping

import numpy as np

log = logging.getLogger(__name__)


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Message:
    id: str
    text: str
    label: str
    sender: str | None = None
    affiliation: str | None = None
    timestamp: datetime | None = None
    enums: Mapping[str, str] = field(default_factory=dict)
    numerics: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.label:
            raise CorpusError(f"message {self.id!r} has an empty label")

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {"id": self.id, "text": self.text, "label": self.label}
        if self.sender is not None:
            rec["sender"] = self.sender
        if self.affiliation is not None:
            rec["affiliation"] = self.affiliation
        if self.timestamp is not None:
            rec["timestamp"] = self.timestamp.isoformat()
        if self.enums:
            rec["enums"] = dict(self.enums)
        if self.numerics:
            rec["numerics"] = dict(self.numerics)
        return rec


@dataclass(frozen=True)
class Dataset:
    messages: tuple[Message, ...]
    label_set: tuple[str, ...]
    provenance: Mapping[str, Any] = field(default_factory=dict)

    @classmethod
    def from_messages(cls, messages, provenance=None, label_set=None) -> "Dataset":
        messages = tuple(messages)
        labels = tuple(sorted({m.label for m in messages})) if label_set is None else tuple(label_set)
        missing = {m.label for m in messages} - set(labels)
        if missing:
            raise CorpusError(f"labels {sorted(missing)} not in label set")
        return cls(messages, labels, dict(provenance or {}))

    def __len__(self) -> int:
        return len(self.messages)

    def __iter__(self):
        return iter(self.messages)

    def class_counts(self) -> dict[str, int]:
        counts = Counter(m.label for m in self.messages)
        return {lab: counts.get(lab, 0) for lab in self.label_set}


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_fraction, self.val_fraction, self.test_fraction)
        if min(fr) <= 0:
            raise CorpusError(f"split fractions must be positive, got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise CorpusError(f"split fractions sum to {sum(fr)!r}, expected 1")


def parse_timestamp(value: str) -> datetime:
    """Parse ISO-8601 to an aware UTC datetime. Naive values are taken as UTC."""
    s = value.strip()
    if s.endswith(("Z", "z")):
        s = s[:-1] + "+00:00"
    ts = datetime.fromisoformat(s)
    if ts.tzinfo is None:
        return ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def parse_message(record: Mapping[str, Any], line_no: int | None = None,
                  warnings: list[str] | None = None) -> Message:
    """Build a Message from one decoded JSONL object.

    A malformed timestamp is dropped and a note appended to ``warnings``.
    """
    where = f"line {line_no}" if line_no is not None else "record"
    if not isinstance(record, Mapping):
        raise CorpusError(f"{where}: expected a JSON object")
    label = record.get("label")
    if label is None or str(label) == "":
        raise CorpusError(f"{where}: missing label")
    if "text" not in record:
        raise CorpusError(f"{where}: missing text")

    ts = None
    raw_ts = record.get("timestamp")
    if raw_ts not in (None, ""):
        try:
            ts = parse_timestamp(str(raw_ts))
        except ValueError:
            if warnings is not None:
                warnings.append(f"{where}: bad timestamp {raw_ts!r}")

    enums = record.get("enums") or {}
    numerics = record.get("numerics") or {}
    if not isinstance(enums, Mapping) or not isinstance(numerics, Mapping):
        raise CorpusError(f"{where}: enums/numerics must be objects")

    def opt(key):
        v = record.get(key)
        return None if v is None or v == "" else str(v)

    msg_id = record.get("id")
    if msg_id is None:
        msg_id = f"line{line_no}" if line_no is not None else f"msg{id(record)}"
    return Message(
        id=str(msg_id),
        text=str(record["text"] or ""),
        label=str(label),
        sender=opt("sender"),
        affiliation=opt("affiliation"),
        timestamp=ts,
        enums={str(k): str(v) for k, v in enums.items()},
        numerics={str(k): float(v) for k, v in numerics.items()},
    )


def load_corpus(path) -> Dataset:
    """Read a JSONL corpus. Bad lines are skipped and listed in provenance."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc
    messages, rejected, warnings = [], [], []
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            messages.append(parse_message(json.loads(line), i, warnings))
        except (json.JSONDecodeError, CorpusError, TypeError, ValueError) as exc:
            rejected.append(f"line {i}: {exc}")
    if rejected:
        log.warning("%s: rejected %d record(s)", path, len(rejected))
    if not messages:
        raise CorpusError(f"{path}: no valid records")
    return Dataset.from_messages(
        messages,
        provenance={"source": str(path), "rejected": rejected, "warnings": warnings},
    )


def save_corpus(ds: Dataset | list[Message], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for m in ds:
            fh.write(json.dumps(m.to_record(), ensure_ascii=False) + "\n")


def prepare_subset(ds: Dataset, per_class_cap: int, keep_n_longest: int) -> Dataset:
    """Per class: first ``per_class_cap`` messages, drop text-less, keep the longest.

    Length is counted in characters; equal lengths keep the earlier message.
    Output keeps the original corpus order.
    """
    by_class: dict[str, list[int]] = defaultdict(list)
    for i, m in enumerate(ds.messages):
        if len(by_class[m.label]) < per_class_cap:
            by_class[m.label].append(i)
    keep: set[int] = set()
    dropped = []
    for label in ds.label_set:
        idx = [i for i in by_class.get(label, []) if ds.messages[i].text.strip()]
        if not idx:
            log.warning("class %r has no message with text; dropped", label)
            dropped.append(label)
            continue
        idx.sort(key=lambda i: -len(ds.messages[i].text))  # stable: ties stay in corpus order
        keep.update(idx[:keep_n_longest])
    kept = [m for i, m in enumerate(ds.messages) if i in keep]
    prov = dict(ds.provenance)
    prov["prepare"] = {"per_class_cap": per_class_cap, "keep_n_longest": keep_n_longest,
                       "dropped_classes": dropped}
    return Dataset.from_messages(kept, provenance=prov)


def split_sizes(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    # small epsilon so exact ratios like 4687/7272 do not floor one short
    n_train = math.floor(spec.train_fraction * n + 1e-9)
    n_val = math.floor(spec.val_fraction * n + 1e-9)
    return n_train, n_val, n - n_train - n_val


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded shuffle, then contiguous train/val/test slices (remainder to test)."""
    n = len(ds)
    if n == 0:
        raise CorpusError("cannot split an empty dataset")
    n_train, n_val, n_test = split_sizes(n, spec)
    if min(n_train, n_val, n_test) <= 0:
        raise CorpusError(f"split of {n} messages leaves an empty part: {(n_train, n_val, n_test)}")
    order = np.random.default_rng(spec.seed).permutation(n)
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    names = ("train", "val", "test")
    return tuple(
        Dataset(tuple(ds.messages[i] for i in part), ds.label_set,
                {**ds.provenance, "split": name, "split_seed": spec.seed})
        for name, part in zip(names, parts)
    )


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

FILLER = [f"w{i}" for i in range(120)]
KEYWORDS_PER_CLASS = 4
SENDERS_PER_CLASS = 6
NEUTRAL_SENDERS = 30
_EPOCH = datetime(2021, 1, 4, tzinfo=timezone.utc)  # a Monday


def class_keywords(c: int) -> list[str]:
    return [f"topic{c}k{j}" for j in range(KEYWORDS_PER_CLASS)]


def _text(rng: np.random.Generator, keywords: list[str]) -> str:
    n_fill = int(rng.integers(5, 11))
    words = list(rng.choice(FILLER, size=n_fill))
    for _ in range(2):
        words.insert(int(rng.integers(0, len(words) + 1)), str(rng.choice(keywords)))
    return " ".join(words)


def _class_meta(rng, c: int, n_classes: int):
    sender = f"user{c}x{int(rng.integers(SENDERS_PER_CLASS))}@dept{c}.example.com"
    # each class posts around its own hour of day
    center = 24.0 * (c + 0.5) / n_classes
    hour = (center + rng.normal(0.0, 24.0 / n_classes / 6.0)) % 24.0
    return sender, hour


def _neutral_meta(rng):
    sender = f"person{int(rng.integers(NEUTRAL_SENDERS))}@mail.example.com"
    return sender, float(rng.uniform(0.0, 24.0))


def generate_synthetic(seed: int, n_per_class: int, n_classes: int,
                       conflict_mode: str = "metadata_only", conflict_fraction: float = 0.3,
                       imbalance: float = 0.0) -> Dataset:
    """Deterministic toy corpus with controlled text/metadata information.

    ``metadata_only``: the first ``n_classes // 2`` classes ("meta classes") have
    class-specific senders and posting hours, but their texts are drawn from the
    keyword pools of the remaining "text classes", so text alone cannot tell
    them apart from those. Text classes carry their own keywords and neutral
    metadata. Text-only Bayes accuracy is therefore ``n_text / n_classes``.

    ``conflict``: every class has its own keywords and metadata; a
    ``conflict_fraction`` of messages take the keywords of another class while
    keeping metadata (and label) of their own.

    ``imbalance`` shrinks class ``k`` to ``n_per_class * (1 - imbalance) ** k``.
    """
    if n_classes < 2:
        raise CorpusError("need at least two classes")
    if conflict_mode not in ("metadata_only", "conflict"):
        raise CorpusError(f"unknown synthetic mode {conflict_mode!r}")
    rng = np.random.default_rng(seed)
    n_meta = n_classes // 2 if conflict_mode == "metadata_only" else 0
    text_classes = list(range(n_meta, n_classes))
    pooled = [kw for c in text_classes for kw in class_keywords(c)]
    width = len(str(n_classes - 1))

    plan = []
    for c in range(n_classes):
        count = max(1, round(n_per_class * (1.0 - imbalance) ** c))
        plan.extend([c] * count)
    plan = [plan[i] for i in rng.permutation(len(plan))]

    messages = []
    for i, c in enumerate(plan):
        if conflict_mode == "metadata_only":
            if c < n_meta:
                text = _text(rng, class_keywords(int(rng.choice(text_classes))))
                sender, hour = _class_meta(rng, c, n_classes)
            else:
                text = _text(rng, class_keywords(c))
                sender, hour = _neutral_meta(rng)
        else:
            kw_class = c
            if rng.random() < conflict_fraction:
                kw_class = int(rng.choice([k for k in range(n_classes) if k != c]))
            text = _text(rng, class_keywords(kw_class))
            sender, hour = _class_meta(rng, c, n_classes)
        day = int(rng.integers(0, 28))
        ts = _EPOCH + timedelta(days=day, seconds=int(hour * 3600))
        messages.append(Message(
            id=f"s{seed}-{i:06d}",
            text=text,
            label=f"class{c:0{width}d}",
            sender=sender,
            timestamp=ts,
            enums={"channel": str(rng.choice(["mail", "web", "app"]))},
            numerics={"attachments": float(rng.integers(0, 4))},
        ))
    pooled_note = pooled if n_meta else []
    return Dataset.from_messages(messages, provenance={
        "source": "synthetic", "seed": seed, "mode": conflict_mode, "n_classes": n_classes,
        "n_per_class": n_per_class, "conflict_fraction": conflict_fraction if n_meta == 0 else 0.0,
        "imbalance": imbalance, "meta_classes": n_meta, "shared_text_pool": pooled_note,
    })
