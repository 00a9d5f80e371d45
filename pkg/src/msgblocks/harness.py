"""Comparison grid of the ten classification pipelines, evaluation and reporting.

Methods 1-4 use a text encoder that is randomly initialised (seeded) and never
trained; methods 5-8 use the same encoder after text-only fine-tuning. Either
embedding, optionally concatenated with the metadata vector, feeds a single
dense layer or a random forest. Methods 9 and 10 train the text block and the
metadata block jointly and merge their outputs by averaging or by a trained
dense head over the concatenation.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import featurizer as fz
from .blocks import (Batch, ConcatClassifier, MessageClassifier, Preprocessor, TextBlock, Vocab,
                     predict_batch, train)
from .config import RunConfig
from .corpus import Dataset, SplitSpec, split
from .forest import Forest, ForestParams, fit_forest

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MethodSpec:
    id: int
    encoder_mode: str     # frozen | finetuned
    metadata_mode: str    # none | concat | block
    head: str             # dense | forest | average_combine | weighted_combine
    description: str


METHODS: tuple[MethodSpec, ...] = (
    MethodSpec(1, "frozen", "none", "dense", "frozen encoder + dense layer"),
    MethodSpec(2, "frozen", "none", "forest", "frozen encoder + random forest"),
    MethodSpec(3, "frozen", "concat", "dense", "frozen encoder + metadata concat + dense layer"),
    MethodSpec(4, "frozen", "concat", "forest", "frozen encoder + metadata concat + random forest"),
    MethodSpec(5, "finetuned", "none", "dense", "fine-tuned encoder + dense layer"),
    MethodSpec(6, "finetuned", "none", "forest", "fine-tuned encoder + random forest"),
    MethodSpec(7, "finetuned", "concat", "dense", "fine-tuned encoder + metadata concat + dense layer"),
    MethodSpec(8, "finetuned", "concat", "forest", "fine-tuned encoder + metadata concat + random forest"),
    MethodSpec(9, "finetuned", "block", "average_combine", "text + metadata blocks, output averaging"),
    MethodSpec(10, "finetuned", "block", "weighted_combine", "text + metadata blocks, output weighting"),
)
METHOD_BY_ID = {m.id: m for m in METHODS}

# Published accuracies (pretrained BERT, full corpora). Reference only.
PUBLISHED_COLUMNS = ("Amazon reviews", "Yelp Open Data-set", "Reddit", "Enron Emails")
PUBLISHED_TABLE = {
    1: (0.66, 0.29, 0.56, 0.49), 2: (0.61, 0.22, 0.52, 0.49), 3: (0.65, 0.24, 0.46, 0.48),
    4: (0.61, 0.22, 0.50, 0.50), 5: (0.74, 0.39, 0.61, 0.47), 6: (0.73, 0.38, 0.60, 0.47),
    7: (0.71, 0.38, 0.62, 0.47), 8: (0.73, 0.39, 0.60, 0.47), 9: (0.70, 0.30, 0.62, 0.47),
    10: (0.77, 0.40, 0.62, 0.53),
}


def get_method(method_id: int) -> MethodSpec:
    try:
        return METHOD_BY_ID[int(method_id)]
    except (KeyError, ValueError):
        raise ValueError(f"invalid method id {method_id!r}; expected 1..10") from None


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(predictions, gold, n_classes: int | None = None) -> tuple[float, np.ndarray]:
    """Exact-match accuracy and confusion matrix (rows = gold, cols = predicted)."""
    pred = np.asarray(predictions, dtype=np.int64)
    gold = np.asarray(gold, dtype=np.int64)
    if pred.shape != gold.shape:
        raise ValueError(f"{len(pred)} predictions for {len(gold)} gold labels")
    if len(gold) == 0:
        raise ValueError("nothing to evaluate")
    c = int(n_classes if n_classes is not None else max(pred.max(), gold.max()) + 1)
    conf = np.zeros((c, c), dtype=np.int64)
    np.add.at(conf, (gold, pred), 1)
    return int(np.trace(conf)) / len(gold), conf


def precision_recall(conf: np.ndarray) -> tuple[list[float], list[float]]:
    tp = np.diag(conf).astype(np.float64)
    pred_tot = conf.sum(axis=0)
    gold_tot = conf.sum(axis=1)
    prec = np.divide(tp, pred_tot, out=np.zeros_like(tp), where=pred_tot > 0)
    rec = np.divide(tp, gold_tot, out=np.zeros_like(tp), where=gold_tot > 0)
    return prec.tolist(), rec.tolist()


# ---------------------------------------------------------------------------
# trained pipelines
# ---------------------------------------------------------------------------


@dataclass
class TrainedMethod:
    """A fitted pipeline for one method: preprocessing plus its model."""

    spec: MethodSpec
    preprocessor: Preprocessor
    config: RunConfig
    seed: int
    model: MessageClassifier | ConcatClassifier | None = None
    encoder: TextBlock | None = None
    forest: Forest | None = None

    @property
    def classes(self) -> tuple[str, ...]:
        return self.preprocessor.classes

    def predict_encoded(self, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
        if self.forest is not None:
            X = forest_features(self.encoder, batch, self.spec.metadata_mode == "concat")
            probs = self.forest.votes(X)
            return np.argmax(probs, axis=1), probs
        return predict_batch(self.model, batch)

    def predict(self, messages) -> tuple[list[str], np.ndarray]:
        idx, probs = self.predict_encoded(self.preprocessor.encode(messages, with_labels=False))
        return [self.classes[i] for i in idx], probs


def encoder_embeddings(encoder: TextBlock, batch: Batch, chunk: int = 256) -> np.ndarray:
    parts = [encoder.encode(batch.tokens[i:i + chunk], batch.mask[i:i + chunk])[0]
             for i in range(0, len(batch), chunk)]
    return np.vstack(parts) if parts else np.zeros((0, encoder.d_model))


def forest_features(encoder: TextBlock, batch: Batch, use_meta: bool) -> np.ndarray:
    emb = batch.emb if batch.emb is not None else encoder_embeddings(encoder, batch)
    return np.concatenate([emb, batch.feats], axis=1) if use_meta else emb


class Workbench:
    """Splits, preprocessing and encoders shared by every method in one comparison.

    The frozen encoder is built once from the seed; the fine-tuned encoder is
    trained once (text only) and reused by methods 5-8.
    """

    def __init__(self, train_ds: Dataset, val_ds: Dataset, test_ds: Dataset,
                 config: RunConfig, seed: int, preprocessor: Preprocessor | None = None):
        self.config = config
        self.seed = seed
        self.datasets = {"train": train_ds, "val": val_ds, "test": test_ds}
        self.pre = preprocessor or Preprocessor.fit(train_ds, config.model, config.featurizer)
        self.batches = {k: self.pre.encode(ds) for k, ds in self.datasets.items()}
        self._frozen: TextBlock | None = None
        self._text_model: MessageClassifier | None = None
        self._emb: dict[str, dict[str, np.ndarray]] = {}

    @property
    def n_classes(self) -> int:
        return len(self.pre.classes)

    def new_text_classifier(self) -> MessageClassifier:
        return MessageClassifier.build(self.n_classes, len(self.pre.vocab), None, self.config.model,
                                       "average", self.seed, self.pre)

    def frozen_encoder(self) -> TextBlock:
        if self._frozen is None:
            # same init stream as every other text block built from this seed
            self._frozen = self.new_text_classifier().text_block
        return self._frozen

    def finetuned_model(self) -> MessageClassifier:
        if self._text_model is None:
            model = self.new_text_classifier()
            train(model, self.batches["train"], self.batches["val"], self.seed,
                  self.config.training, self.config.optimizer)
            self._text_model = model
        return self._text_model

    def encoder_for(self, spec: MethodSpec) -> TextBlock:
        return self.frozen_encoder() if spec.encoder_mode == "frozen" else self.finetuned_model().text_block

    def batch(self, name: str, spec: MethodSpec) -> Batch:
        """Encoded split with the method's encoder embeddings attached."""
        key = spec.encoder_mode
        if key not in self._emb:
            enc = self.encoder_for(spec)
            self._emb[key] = {k: encoder_embeddings(enc, b) for k, b in self.batches.items()}
        b = self.batches[name]
        return Batch(b.tokens, b.mask, b.feats, b.labels, self._emb[key][name])


def fit_method(spec: MethodSpec | int, bench: Workbench) -> TrainedMethod:
    spec = spec if isinstance(spec, MethodSpec) else get_method(spec)
    cfg, seed = bench.config, bench.seed
    out = TrainedMethod(spec, bench.pre, cfg, seed)
    if spec.metadata_mode == "block":
        kind = "average" if spec.head == "average_combine" else "weighted_concat"
        model = MessageClassifier.build(bench.n_classes, len(bench.pre.vocab), bench.pre.featurizer.dim,
                                        cfg.model, kind, seed, bench.pre)
        train(model, bench.batches["train"], bench.batches["val"], seed, cfg.training, cfg.optimizer)
        out.model = model
        return out

    use_meta = spec.metadata_mode == "concat"
    if spec.id == 5:
        out.model = bench.finetuned_model()
        return out
    encoder = bench.encoder_for(spec)
    tr, va = bench.batch("train", spec), bench.batch("val", spec)
    if spec.head == "dense":
        head_rng = np.random.default_rng([seed, spec.id])
        model = ConcatClassifier(encoder, bench.n_classes, bench.pre.featurizer.dim, use_meta, head_rng)
        train(model, tr, va, seed, cfg.training, cfg.optimizer)
        out.model = model
    else:
        fp = cfg.forest
        params = ForestParams(n_trees=fp.n_trees, max_depth=fp.max_depth,
                              min_samples_leaf=fp.min_samples_leaf, bootstrap=fp.bootstrap,
                              max_features=fp.max_features, seed=seed)
        out.encoder = encoder
        out.forest = fit_forest(forest_features(encoder, tr, use_meta), tr.labels, params, bench.n_classes)
    return out


@dataclass
class RunResult:
    method: int
    dataset: str
    accuracy: float
    confusion: list[list[int]]
    precision: list[float]
    recall: list[float]
    seed: int
    config: dict
    wall_clock: float
    best: bool = False
    history: dict = field(default_factory=dict)


def run_method(spec: MethodSpec | int, bench: Workbench, dataset_name: str = "corpus",
               return_model: bool = False):
    spec = spec if isinstance(spec, MethodSpec) else get_method(spec)
    t0 = time.perf_counter()
    fitted = fit_method(spec, bench)
    test = bench.batch("test", spec) if spec.metadata_mode != "block" else bench.batches["test"]
    pred, _ = fitted.predict_encoded(test)
    acc, conf = evaluate(pred, test.labels, bench.n_classes)
    prec, rec = precision_recall(conf)
    result = RunResult(spec.id, dataset_name, acc, conf.tolist(), prec, rec, bench.seed,
                       bench.config.to_dict(), time.perf_counter() - t0)
    log.info("method %d on %s: accuracy %.4f (%.1fs)", spec.id, dataset_name, acc, result.wall_clock)
    return (result, fitted) if return_model else result


def prepare_bench(ds: Dataset, config: RunConfig, seed: int) -> Workbench:
    sp = config.split
    train_ds, val_ds, test_ds = split(ds, SplitSpec(sp.train, sp.val, sp.test, seed))
    return Workbench(train_ds, val_ds, test_ds, config, seed)


def compare_all(bench: Workbench, dataset_name: str = "corpus",
                methods: tuple[int, ...] | None = None) -> list[RunResult]:
    """One row per method, all sharing the bench's splits, vocabulary and featurizer."""
    ids = methods if methods is not None else bench.config.methods
    rows = [run_method(get_method(i), bench, dataset_name) for i in ids]
    best = max(r.accuracy for r in rows)
    for r in rows:
        r.best = r.accuracy == best
    return rows


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def results_csv(rows: list[RunResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["method", "description", "dataset", "accuracy", "best", "seed", "wall_clock_s",
                *[f"published:{c}" for c in PUBLISHED_COLUMNS]])
    for r in rows:
        w.writerow([r.method, METHOD_BY_ID[r.method].description, r.dataset, repr(r.accuracy),
                    int(r.best), r.seed, f"{r.wall_clock:.3f}", *PUBLISHED_TABLE[r.method]])
    return buf.getvalue()


def results_text(rows: list[RunResult]) -> str:
    dataset = rows[0].dataset if rows else ""
    header = ["Method#", dataset, *(f"published {c}" for c in PUBLISHED_COLUMNS)]
    body = [[str(r.method), f"{r.accuracy:.4f}" + (" *" if r.best else ""),
             *(f"{v:.2f}" for v in PUBLISHED_TABLE[r.method])] for r in rows]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    line = lambda cells: " | ".join(c.rjust(w) for c, w in zip(cells, widths))
    sep = "-+-".join("-" * w for w in widths)
    out = [line(header), sep, *map(line, body), "",
           "* best local accuracy. Published columns use pretrained BERT on the full corpora;",
           "  they are reference values, not targets for this desk-scale encoder."]
    return "\n".join(out) + "\n"


def write_report(rows: list[RunResult], path) -> tuple[Path, Path]:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".csv", ".txt") else path
    csv_path, txt_path = stem.with_suffix(".csv"), stem.with_suffix(".txt")
    csv_path.write_text(results_csv(rows), encoding="utf-8")
    txt_path.write_text(results_text(rows), encoding="utf-8")
    return csv_path, txt_path


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "msgblocks-checkpoint"


def save_checkpoint(fitted: TrainedMethod, path) -> None:
    """Write an ``.npz`` holding float64 parameters, forest arrays and a JSON header."""
    arrays: dict[str, np.ndarray] = {}
    header = {
        "format": CHECKPOINT_FORMAT, "version": 1, "method": fitted.spec.id, "seed": fitted.seed,
        "config": fitted.config.to_dict(), "classes": list(fitted.classes),
        "t_max": fitted.preprocessor.t_max, "vocab": fitted.preprocessor.vocab.tokens,
        "featurizer": fitted.preprocessor.featurizer.to_dict(),
    }
    if fitted.forest is not None:
        header["forest"] = fitted.forest.meta()
        arrays.update(fitted.forest.to_arrays())
        params = fitted.encoder.parameters()
    else:
        params = fitted.model.parameters()
    for p in params:
        arrays[f"param:{p.name}"] = p.value
    arrays["header"] = np.array(json.dumps(header))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> TrainedMethod:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        arrays = {k: data[k] for k in data.files}
    cfg = RunConfig.from_dict(header["config"])
    spec = get_method(header["method"])
    seed = header["seed"]
    pre = Preprocessor(Vocab(header["vocab"]), fz.FeaturizerModel.from_dict(header["featurizer"]),
                       tuple(header["classes"]), header["t_max"])
    n_classes, vocab_size, fdim = len(pre.classes), len(pre.vocab), pre.featurizer.dim
    out = TrainedMethod(spec, pre, cfg, seed)
    if spec.metadata_mode == "block":
        kind = "average" if spec.head == "average_combine" else "weighted_concat"
        out.model = MessageClassifier.build(n_classes, vocab_size, fdim, cfg.model, kind, seed, pre)
        params = out.model.parameters()
    else:
        text = MessageClassifier.build(n_classes, vocab_size, None, cfg.model, "average", seed, pre)
        if "forest" in header:
            out.encoder = text.text_block
            out.forest = Forest.from_arrays(header["forest"], arrays)
            params = out.encoder.parameters()
        elif spec.id == 5:
            out.model = text
            params = text.parameters()
        else:
            out.model = ConcatClassifier(text.text_block, n_classes, fdim,
                                         spec.metadata_mode == "concat", np.random.default_rng(0))
            params = out.model.parameters()
    for p in params:
        key = f"param:{p.name}"
        if key not in arrays:
            raise ValueError(f"{path}: missing parameter {p.name}")
        if arrays[key].shape != p.value.shape:
            raise ValueError(f"{path}: parameter {p.name} has shape {arrays[key].shape}, "
                             f"expected {p.value.shape}")
        p.value[...] = arrays[key]
    return out
