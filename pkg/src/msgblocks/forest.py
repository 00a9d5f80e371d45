"""Random forest of Gini-split classification trees."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

log = logging.getLogger(__name__)

LEAF = -1


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 250
    max_depth: int | None = None
    min_samples_leaf: int = 1
    bootstrap: bool = True
    max_features: str | int = "sqrt"   # "sqrt", "all", or an int
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.min_samples_leaf < 1:
            raise ValueError("n_trees and min_samples_leaf must be >= 1")

    def n_features(self, d: int) -> int:
        if self.max_features == "sqrt":
            return max(1, int(math.sqrt(d)))
        if self.max_features == "all":
            return d
        return max(1, min(d, int(self.max_features)))


def gini(class_counts) -> float:
    counts = np.asarray(class_counts, dtype=np.float64)
    n = counts.sum()
    if n <= 0:
        raise ValueError("gini of an empty node")
    return float(1.0 - np.sum((counts / n) ** 2))


@dataclass
class Tree:
    """Flat binary tree. ``feature[i] == LEAF`` marks a leaf; ``value[i]`` holds class counts."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] != LEAF
        while active.any():
            idx = np.nonzero(active)[0]
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] != LEAF
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.value[self.apply(X)], axis=1)

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] != LEAF:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())


def _best_split(Xn: np.ndarray, yn: np.ndarray, features: np.ndarray, n_classes: int,
                min_leaf: int):
    """Best (feature, threshold) over ``features`` by weighted child Gini.

    Minimising the weighted Gini equals maximising ``S_l/n_l + S_r/n_r`` with
    ``S`` the sum of squared class counts. Candidates whose float score is
    within rounding of the best are compared exactly; remaining ties go to
    the lowest feature index, then the lowest threshold.
    """
    n = len(yn)
    cols = Xn[:, features]
    order = np.argsort(cols, axis=0, kind="stable")
    xs = np.take_along_axis(cols, order, axis=0)
    onehot = np.eye(n_classes)[yn]
    left = np.cumsum(onehot[order], axis=0)[:-1]          # (n-1, k, C) counts left of cut i
    total = onehot.sum(axis=0)
    right = total - left
    nl = np.arange(1, n, dtype=np.float64)[:, None]
    nr = n - nl
    valid = (xs[1:] > xs[:-1]) & (nl >= min_leaf) & (nr >= min_leaf)
    if not valid.any():
        return None
    sl = np.sum(left * left, axis=-1)
    sr = np.sum(right * right, axis=-1)
    score = np.where(valid, sl / nl + sr / nr, -np.inf)
    best = score.max()
    cand = np.argwhere(score >= best - 1e-9 * max(1.0, abs(best)))
    choice = None
    for pos, j in cand:
        pos, j = int(pos), int(j)
        exact = Fraction(int(sl[pos, j]), pos + 1) + Fraction(int(sr[pos, j]), n - pos - 1)
        thr = (xs[pos, j] + xs[pos + 1, j]) / 2.0
        key = (-exact, int(features[j]), thr)
        if choice is None or key < choice[0]:
            choice = (key, int(features[j]), thr)
    return choice[1], choice[2]


def fit_tree(X: np.ndarray, y: np.ndarray, n_classes: int, min_samples_leaf: int = 1,
             max_depth: int | None = None, n_features: int | None = None,
             rng: np.random.Generator | None = None) -> Tree:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    d = X.shape[1]
    k = d if n_features is None else n_features
    rng = rng if rng is not None else np.random.default_rng(0)
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(np.bincount(y[idx], minlength=n_classes).astype(np.float64))
        return len(feature) - 1

    stack = [(new_node(np.arange(len(y))), np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if (np.count_nonzero(value[node]) <= 1 or len(idx) < 2 * min_samples_leaf
                or (max_depth is not None and depth >= max_depth)):
            continue
        if k >= d:
            feats = np.arange(d)
        else:
            # draw k features; if none can split, keep drawing from the rest
            feats = rng.permutation(d)
        split = None
        for start in range(0, len(feats), k):
            chunk = np.sort(feats[start:start + k]) if k < d else feats
            split = _best_split(X[idx], y[idx], chunk, n_classes, min_samples_leaf)
            if split is not None or k >= d:
                break
        if split is None:
            continue
        f, thr = split
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return Tree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=np.float64),
                np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                np.array(value, dtype=np.float64).reshape(len(feature), n_classes))


@dataclass
class Forest:
    params: ForestParams
    n_classes: int
    n_features: int
    trees: list[Tree]

    def votes(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ValueError(f"forest expects {self.n_features} features, got {X.shape[1]}")
        tally = np.zeros((len(X), self.n_classes))
        rows = np.arange(len(X))
        for tree in self.trees:
            tally[rows, tree.predict(X)] += 1.0
        return tally / len(self.trees)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.votes(X), axis=1)

    def to_arrays(self, prefix: str = "forest") -> dict[str, np.ndarray]:
        out = {}
        for i, t in enumerate(self.trees):
            for name in ("feature", "threshold", "left", "right", "value"):
                out[f"{prefix}.{i}.{name}"] = getattr(t, name)
        return out

    def meta(self) -> dict:
        return {"params": asdict(self.params), "n_classes": self.n_classes,
                "n_features": self.n_features, "n_trees": len(self.trees)}

    @classmethod
    def from_arrays(cls, meta: dict, arrays, prefix: str = "forest") -> "Forest":
        trees = [Tree(*(np.asarray(arrays[f"{prefix}.{i}.{name}"])
                        for name in ("feature", "threshold", "left", "right", "value")))
                 for i in range(meta["n_trees"])]
        return cls(ForestParams(**meta["params"]), meta["n_classes"], meta["n_features"], trees)


def fit_forest(X: np.ndarray, y: np.ndarray, params: ForestParams | None = None,
               n_classes: int | None = None) -> Forest:
    params = params or ForestParams()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y) or len(y) < 2:
        raise ValueError(f"need at least two samples with matching X {X.shape} / y {y.shape}")
    n_classes = int(n_classes if n_classes is not None else y.max() + 1)
    if len(np.unique(y)) < 2:
        log.warning("forest trained on a single class; every tree is one leaf")
    d = X.shape[1]
    k = params.n_features(d)
    # one independent stream per tree, derived from the forest seed
    seeds = np.random.SeedSequence(params.seed).spawn(params.n_trees)
    trees = []
    for ss in seeds:
        rng = np.random.default_rng(ss)
        if params.bootstrap:
            idx = rng.integers(0, len(y), size=len(y))
            Xt, yt = X[idx], y[idx]
        else:
            Xt, yt = X, y
        trees.append(fit_tree(Xt, yt, n_classes, params.min_samples_leaf, params.max_depth, k, rng))
    return Forest(params, n_classes, d, trees)


def predict_forest(forest: Forest, x) -> tuple[int, np.ndarray]:
    """Majority vote for one sample (ties -> lowest class) and the vote shares."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("predict_forest takes a single feature vector")
    shares = forest.votes(x[None])[0]
    return int(np.argmax(shares)), shares
