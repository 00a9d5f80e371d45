"""Text and metadata blocks, output combination, and joint training.

A :class:`MessageClassifier` owns one block per input modality. Each block maps
its input to a vector with one value per class; the combine step merges them
and a single softmax produces the prediction. Training updates every block and
the combine head from the same loss in every optimizer step.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import featurizer as fz
from .config import ModelConfig, OptimizerConfig, TrainingConfig
from .corpus import Dataset, Message
from .nn import (AttentionLayer, Dense, Embedding, OptimizerState, Param, ShapeError,
                 optimizer_step, softmax, softmax_cross_entropy)

PAD, UNK, CLS = 0, 1, 2
SPECIALS = ("[PAD]", "[UNK]", "[CLS]")
_TOKEN_RE = re.compile(r"[^\W_]+")


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


def words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        if tuple(self.tokens[:3]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def encode(self, text: str, t_max: int) -> tuple[np.ndarray, np.ndarray]:
        """``[CLS] tok... [PAD]...`` truncated to ``t_max``; mask is True on padding."""
        ids = [CLS] + [self.index.get(w, UNK) for w in words(text)]
        ids = ids[:t_max]
        out = np.full(t_max, PAD, dtype=np.int64)
        out[:len(ids)] = ids
        mask = np.ones(t_max, dtype=bool)
        mask[:len(ids)] = False
        return out, mask


def build_vocab(train: Iterable[Message] | Iterable[str], size: int) -> Vocab:
    """Keep the ``size - 3`` most frequent words (ties alphabetical) after the specials."""
    counts: Counter = Counter()
    for item in train:
        counts.update(words(item if isinstance(item, str) else item.text))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max(size - len(SPECIALS), 0)]
    return Vocab(list(SPECIALS) + [w for w, _ in ranked])


def tokenize(vocab: Vocab, text: str, t_max: int) -> tuple[np.ndarray, np.ndarray]:
    return vocab.encode(text, t_max)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    tokens: np.ndarray          # (B, T) int
    mask: np.ndarray            # (B, T) bool, True = padding
    feats: np.ndarray           # (B, F)
    labels: np.ndarray | None = None
    emb: np.ndarray | None = None   # precomputed frozen-encoder CLS vectors, if any

    def __len__(self) -> int:
        return len(self.tokens)

    def take(self, idx) -> "Batch":
        return Batch(self.tokens[idx], self.mask[idx], self.feats[idx],
                     None if self.labels is None else self.labels[idx],
                     None if self.emb is None else self.emb[idx])


@dataclass
class Preprocessor:
    """Fitted vocabulary + featurizer + class list shared by every model on one split."""

    vocab: Vocab
    featurizer: fz.FeaturizerModel
    classes: tuple[str, ...]
    t_max: int

    @classmethod
    def fit(cls, train: Dataset, model_cfg: ModelConfig,
            feat_cfg: fz.FeaturizerConfig | None = None) -> "Preprocessor":
        return cls(build_vocab(train, model_cfg.vocab_size), fz.fit(train, feat_cfg),
                   tuple(train.label_set), model_cfg.t_max)

    def encode(self, messages: Iterable[Message], with_labels: bool = True) -> Batch:
        messages = list(messages)
        t = self.t_max
        tokens = np.zeros((len(messages), t), dtype=np.int64)
        mask = np.ones((len(messages), t), dtype=bool)
        for i, m in enumerate(messages):
            tokens[i], mask[i] = self.vocab.encode(m.text, t)
        feats = fz.transform_many(self.featurizer, messages)
        labels = None
        if with_labels:
            lookup = {c: i for i, c in enumerate(self.classes)}
            try:
                labels = np.array([lookup[m.label] for m in messages], dtype=np.int64)
            except KeyError as exc:
                raise ValueError(f"label {exc.args[0]!r} is not one of the model classes") from None
        return Batch(tokens, mask, feats, labels)


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


class TextBlock:
    """Token + learned position embeddings, encoder layers, CLS pooling, class head."""

    def __init__(self, vocab_size: int, n_classes: int, cfg: ModelConfig,
                 rng: np.random.Generator, name: str = "text"):
        self.name = name
        self.t_max = cfg.t_max
        self.d_model = cfg.d_model
        self.emb = Embedding(vocab_size, cfg.d_model, rng, name=f"{name}.tok")
        self.pos = Embedding(cfg.t_max, cfg.d_model, rng, name=f"{name}.pos")
        self.layers = [AttentionLayer(cfg.d_model, cfg.n_heads, cfg.d_ff, rng, name=f"{name}.layer{i}")
                       for i in range(cfg.n_layers)]
        self.head = Dense(cfg.d_model, n_classes, "none", rng, name=f"{name}.head")

    def encoder_parameters(self) -> list[Param]:
        ps = [*self.emb.parameters(), *self.pos.parameters()]
        for layer in self.layers:
            ps.extend(layer.parameters())
        return ps

    def parameters(self) -> list[Param]:
        return self.encoder_parameters() + self.head.parameters()

    def encode(self, tokens: np.ndarray, mask: np.ndarray):
        """Pooled CLS vectors ``(B, d_model)`` and the cache for :meth:`encode_backward`."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[1] > self.t_max:
            raise ShapeError(f"token batch shape {tokens.shape}, expected (B, <= {self.t_max})")
        t = tokens.shape[1]
        x = self.emb.forward(tokens)[0] + self.pos.table.value[:t]
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x, mask)
            caches.append(c)
        return x[:, 0, :], (tokens, x.shape, caches)

    def encode_backward(self, dcls: np.ndarray, cache) -> None:
        tokens, shape, caches = cache
        dx = np.zeros(shape)
        dx[:, 0, :] = dcls
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dx = layer.backward(dx, c)
        self.emb.backward(dx, tokens)
        self.pos.table.grad[:shape[1]] += dx.sum(axis=0)

    def forward(self, batch: Batch):
        cls_vec, enc_cache = self.encode(batch.tokens, batch.mask)
        logits, head_cache = self.head.forward(cls_vec)
        return logits, (enc_cache, head_cache)

    def backward(self, dlogits: np.ndarray, cache) -> None:
        enc_cache, head_cache = cache
        self.encode_backward(self.head.backward(dlogits, head_cache), enc_cache)


def text_block_forward(block: TextBlock, tokens, mask) -> np.ndarray:
    tokens = np.atleast_2d(tokens)
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    cls_vec, _ = block.encode(tokens, mask)
    return block.head.forward(cls_vec)[0]


class MetaBlock:
    """Two ReLU layers: feature_dim -> feature_dim -> n_classes."""

    def __init__(self, feature_dim: int, n_classes: int, rng: np.random.Generator, name: str = "meta"):
        self.name = name
        self.fc1 = Dense(feature_dim, feature_dim, "relu", rng, name=f"{name}.fc1")
        self.fc2 = Dense(feature_dim, n_classes, "relu", rng, name=f"{name}.fc2")

    def parameters(self) -> list[Param]:
        return self.fc1.parameters() + self.fc2.parameters()

    def forward(self, batch: Batch):
        h, c1 = self.fc1.forward(batch.feats)
        out, c2 = self.fc2.forward(h)
        return out, (c1, c2)

    def backward(self, dout: np.ndarray, cache) -> None:
        c1, c2 = cache
        self.fc1.backward(self.fc2.backward(dout, c2), c1)


def meta_block_forward(block: MetaBlock, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    h = block.fc1.forward(v)[0]
    return block.fc2.forward(h)[0]


class Combine:
    """Merge per-block class vectors into one logit vector.

    ``average``: elementwise mean of block outputs (or, with ``average_probs``,
    log of the mean of per-block softmaxes so the final softmax returns that mean).
    ``weighted_concat``: concatenate in block order, then a trained dense head
    (optionally with one ReLU hidden layer).
    """

    KINDS = ("average", "weighted_concat")

    def __init__(self, kind: str, n_classes: int, n_blocks: int, rng: np.random.Generator,
                 hidden: int | None = None, average_probs: bool = False, name: str = "combine"):
        if kind not in self.KINDS:
            raise ValueError(f"unknown combine kind {kind!r}")
        self.kind = kind
        self.n_classes = n_classes
        self.n_blocks = n_blocks
        self.average_probs = average_probs
        self.layers: list[Dense] = []
        if kind == "weighted_concat":
            n_in = n_classes * n_blocks
            if hidden:
                self.layers.append(Dense(n_in, hidden, "relu", rng, name=f"{name}.hidden"))
                n_in = hidden
            self.layers.append(Dense(n_in, n_classes, "none", rng, name=f"{name}.head"))

    def parameters(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, outputs: Sequence[np.ndarray]):
        if not outputs:
            raise ValueError("nothing to combine")
        shapes = {o.shape for o in outputs}
        if len(shapes) != 1 or outputs[0].shape[-1] != self.n_classes:
            raise ShapeError(f"block output shapes {sorted(shapes)} do not all end in {self.n_classes}")
        if self.kind == "average":
            n = len(outputs)
            if self.average_probs:
                probs = [softmax(o) for o in outputs]
                mean = sum(probs) / n
                return np.log(mean), ("probs", probs, mean)
            return sum(outputs) / n, ("mean", n)
        if len(outputs) != self.n_blocks:
            raise ShapeError(f"expected {self.n_blocks} block outputs, got {len(outputs)}")
        x = np.concatenate(outputs, axis=-1)
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, ("concat", caches)

    def backward(self, dy: np.ndarray, cache) -> list[np.ndarray]:
        tag = cache[0]
        if tag == "mean":
            n = cache[1]
            return [dy / n for _ in range(n)]
        if tag == "probs":
            _, probs, mean = cache
            dp = dy / mean / len(probs)
            return [p * (dp - np.sum(dp * p, axis=-1, keepdims=True)) for p in probs]
        for layer, c in zip(reversed(self.layers), reversed(cache[1])):
            dy = layer.backward(dy, c)
        return np.split(dy, self.n_blocks, axis=-1)


def combine(outputs: Sequence[np.ndarray], strategy: Combine) -> np.ndarray:
    return strategy.forward([np.asarray(o, dtype=np.float64) for o in outputs])[0]


# ---------------------------------------------------------------------------
# composed models
# ---------------------------------------------------------------------------


class _Model:
    """Shared plumbing: parameter enumeration, recorded forward, backward."""

    _tape = None

    def parameters(self) -> list[Param]:
        raise NotImplementedError

    def trainable_parameters(self) -> list[Param]:
        return self.parameters()

    def named_parameters(self) -> dict[str, Param]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def _forward(self, batch: Batch):
        raise NotImplementedError

    def _backward(self, dlogits: np.ndarray, cache) -> None:
        raise NotImplementedError

    def logits(self, batch: Batch) -> np.ndarray:
        """Inference; does not touch model state."""
        return self._forward(batch)[0]

    def forward(self, batch: Batch) -> np.ndarray:
        """Forward pass recorded for a following :meth:`backward`."""
        out, cache = self._forward(batch)
        self._tape = cache
        return out

    def backward(self, dlogits: np.ndarray) -> None:
        if self._tape is None:
            raise RuntimeError("backward() called without a recorded forward()")
        cache, self._tape = self._tape, None
        self._backward(dlogits, cache)

    def loss_and_grad(self, batch: Batch) -> float:
        """Zero grads, run forward+backward for mean cross-entropy, return the loss."""
        if batch.labels is None:
            raise ValueError("batch has no labels")
        self.zero_grad()
        logits = self.forward(batch)
        loss, _, dlogits = softmax_cross_entropy(logits, batch.labels)
        self.backward(dlogits)
        return loss

    def loss(self, batch: Batch) -> float:
        return softmax_cross_entropy(self.logits(batch), batch.labels)[0]


class MessageClassifier(_Model):
    """Blocks (text first, then metadata) followed by a combine step.

    With only a text block and ``average`` combine this is a plain text
    classifier (the combine of one output is the output itself).
    """

    def __init__(self, text_block: TextBlock | None, meta_block: MetaBlock | None,
                 combine_step: Combine, preprocessor: Preprocessor | None = None):
        self.blocks = [b for b in (text_block, meta_block) if b is not None]
        if not self.blocks:
            raise ValueError("a classifier needs at least one block")
        self.text_block = text_block
        self.meta_block = meta_block
        self.combine = combine_step
        self.preprocessor = preprocessor

    @classmethod
    def build(cls, n_classes: int, vocab_size: int, feature_dim: int | None, cfg: ModelConfig,
              combine_kind: str, seed: int, preprocessor: Preprocessor | None = None,
              use_text: bool = True) -> "MessageClassifier":
        rng = np.random.default_rng(seed)
        text = TextBlock(vocab_size, n_classes, cfg, rng) if use_text else None
        meta = MetaBlock(feature_dim, n_classes, rng) if feature_dim else None
        n_blocks = int(text is not None) + int(meta is not None)
        comb = Combine(combine_kind, n_classes, n_blocks, rng,
                       hidden=cfg.combine_hidden, average_probs=cfg.average_probs)
        return cls(text, meta, comb, preprocessor)

    @property
    def classes(self) -> tuple[str, ...]:
        return self.preprocessor.classes if self.preprocessor else ()

    def parameters(self) -> list[Param]:
        return [p for b in self.blocks for p in b.parameters()] + self.combine.parameters()

    def block_parameters(self) -> dict[str, list[Param]]:
        out = {b.name: b.parameters() for b in self.blocks}
        out["combine"] = self.combine.parameters()
        return out

    def _forward(self, batch: Batch):
        outs, caches = [], []
        for b in self.blocks:
            o, c = b.forward(batch)
            outs.append(o)
            caches.append(c)
        logits, comb_cache = self.combine.forward(outs)
        return logits, (caches, comb_cache)

    def _backward(self, dlogits, cache) -> None:
        caches, comb_cache = cache
        for b, d, c in zip(self.blocks, self.combine.backward(dlogits, comb_cache), caches):
            b.backward(d, c)


class ConcatClassifier(_Model):
    """Baseline: frozen text encoder embedding (+ metadata vector) into one dense layer.

    The encoder is never updated; backward stops at the embedding, so its
    gradients stay exactly zero.
    """

    def __init__(self, encoder: TextBlock, n_classes: int, feature_dim: int,
                 use_meta: bool, rng: np.random.Generator):
        self.encoder = encoder
        self.use_meta = use_meta
        n_in = encoder.d_model + (feature_dim if use_meta else 0)
        self.head = Dense(n_in, n_classes, "none", rng, name="concat.head")

    def parameters(self) -> list[Param]:
        return self.encoder.parameters() + self.head.parameters()

    def trainable_parameters(self) -> list[Param]:
        return self.head.parameters()

    def features(self, batch: Batch) -> np.ndarray:
        emb = batch.emb if batch.emb is not None else self.encoder.encode(batch.tokens, batch.mask)[0]
        return np.concatenate([emb, batch.feats], axis=1) if self.use_meta else emb

    def _forward(self, batch: Batch):
        return self.head.forward(self.features(batch))

    def _backward(self, dlogits, cache) -> None:
        self.head.backward(dlogits, cache)


# ---------------------------------------------------------------------------
# training / inference
# ---------------------------------------------------------------------------


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = -1


def accuracy_of(model: _Model, batch: Batch, chunk: int = 256) -> float:
    preds = predict_batch(model, batch, chunk)[0]
    return float(np.mean(preds == batch.labels))


def predict_batch(model: _Model, batch: Batch, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Argmax labels (lowest index on ties) and softmax probabilities."""
    probs = [softmax(model.logits(batch.take(slice(i, i + chunk))), axis=-1)
             for i in range(0, len(batch), chunk)]
    p = np.vstack(probs) if probs else np.zeros((0, 0))
    return np.argmax(p, axis=1), p


def make_optimizer(cfg: OptimizerConfig, lr: float | None = None) -> OptimizerState:
    return OptimizerState(kind=cfg.kind, lr=cfg.lr if lr is None else lr, beta1=cfg.beta1,
                          beta2=cfg.beta2, eps=cfg.eps, clip_norm=cfg.clip_norm)


def train(model: _Model, train_batch: Batch, val_batch: Batch | None, seed: int,
          training: TrainingConfig | None = None, optimizer: OptimizerConfig | None = None,
          lr: float | None = None, keep_best: bool = True) -> History:
    """Mini-batch training of every trainable parameter from one shared loss.

    Each step runs forward, cross-entropy, backward through all blocks and the
    combine head, then one optimizer update of all of them. Parameters from the
    epoch with the best validation accuracy are restored at the end.
    """
    training = training or TrainingConfig()
    opt = make_optimizer(optimizer or OptimizerConfig(), lr)
    params = model.trainable_parameters()
    rng = np.random.default_rng(seed)
    n = len(train_batch)
    if n == 0:
        raise ValueError("empty training set")
    hist = History()
    best_acc, best = -1.0, None
    for epoch in range(training.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, training.batch_size):
            batch = train_batch.take(order[start:start + training.batch_size])
            losses.append(model.loss_and_grad(batch))
            optimizer_step(opt, params)
        hist.train_loss.append(float(np.mean(losses)))
        if val_batch is not None and len(val_batch):
            acc = accuracy_of(model, val_batch)
            hist.val_accuracy.append(acc)
            if keep_best and acc > best_acc:
                best_acc, hist.best_epoch = acc, epoch
                best = {p.name: p.value.copy() for p in params}
    if best is not None:
        for p in params:
            p.value[...] = best[p.name]
    return hist


def predict(model: MessageClassifier | ConcatClassifier, message: Message,
            preprocessor: Preprocessor | None = None) -> tuple[str, np.ndarray]:
    pre = preprocessor or model.preprocessor
    batch = pre.encode([message], with_labels=False)
    idx, probs = predict_batch(model, batch)
    return pre.classes[int(idx[0])], probs[0]


def embed(model: MessageClassifier | TextBlock, message: Message, preprocessor: Preprocessor | None = None,
          with_metadata: bool = False) -> np.ndarray:
    """Pooled CLS vector of the text block, optionally followed by the metadata vector."""
    block = model.text_block if isinstance(model, MessageClassifier) else model
    pre = preprocessor or getattr(model, "preprocessor", None)
    batch = pre.encode([message], with_labels=False)
    vec = block.encode(batch.tokens, batch.mask)[0][0]
    return np.concatenate([vec, batch.feats[0]]) if with_metadata else vec
