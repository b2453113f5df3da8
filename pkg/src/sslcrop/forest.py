"""Random forest on flattened band x step features, built from scratch.

CART trees with Gini impurity, bootstrap resampling, a random feature
subset re-drawn at every node, and midpoint thresholds between adjacent
distinct values.  Each tree owns a generator spawned deterministically
from the forest seed, so results are independent of fit/predict order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .dataio import Dataset


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 500
    max_features: int | None = None  # None -> floor(sqrt(n_features))
    min_leaf: int = 1
    max_depth: int | None = None
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.min_leaf < 1:
            raise ValueError("n_trees and min_leaf must be >= 1")


def gini(counts: np.ndarray) -> float:
    """Gini impurity of a class-count vector."""
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(1.0 - (p * p).sum())


@dataclass
class TreeNode:
    counts: np.ndarray                 # class counts of the node's samples
    feature: int = -1                  # -1 marks a leaf
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None


@dataclass
class DecisionTree:
    root: TreeNode
    n_features: int

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(len(X), dtype=np.int64)
        for i, x in enumerate(X):
            node = self.root
            while node.feature >= 0:
                node = node.left if x[node.feature] <= node.threshold else node.right
            out[i] = int(node.counts.argmax())  # first max = lowest class
        return out


@dataclass
class Forest:
    trees: list[DecisionTree]
    n_features: int
    n_classes: int
    config: ForestConfig = field(default_factory=ForestConfig)


def _best_split(x: np.ndarray, y: np.ndarray, n_classes: int, min_leaf: int):
    """Best (gini, threshold) split of one feature column, or None."""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    onehot = np.zeros((len(ys), n_classes))
    onehot[np.arange(len(ys)), ys] = 1.0
    cum = onehot.cumsum(axis=0)
    total = cum[-1]
    n = len(ys)
    # candidate boundaries: between adjacent distinct values, honoring min_leaf
    cuts = np.nonzero(xs[:-1] < xs[1:])[0]
    cuts = cuts[(cuts + 1 >= min_leaf) & (n - cuts - 1 >= min_leaf)]
    if len(cuts) == 0:
        return None
    nl = (cuts + 1).astype(np.float64)
    nr = n - nl
    left = cum[cuts]
    right = total - left
    gl = 1.0 - ((left / nl[:, None]) ** 2).sum(axis=1)
    gr = 1.0 - ((right / nr[:, None]) ** 2).sum(axis=1)
    weighted = (nl * gl + nr * gr) / n
    best = int(weighted.argmin())  # first minimum -> smallest threshold
    thr = 0.5 * (xs[cuts[best]] + xs[cuts[best] + 1])
    return float(weighted[best]), float(thr)


def _grow(X: np.ndarray, y: np.ndarray, cfg: ForestConfig, n_classes: int,
          rng: np.random.Generator) -> TreeNode:
    n_features = X.shape[1]
    max_features = cfg.max_features or max(1, math.floor(math.sqrt(n_features)))

    def build(idx: np.ndarray, depth: int) -> TreeNode:
        counts = np.bincount(y[idx], minlength=n_classes).astype(np.float64)
        node = TreeNode(counts)
        if (
            (counts > 0).sum() <= 1
            or len(idx) < 2 * cfg.min_leaf
            or (cfg.max_depth is not None and depth >= cfg.max_depth)
        ):
            return node
        # Scan a random feature order; stop once max_features candidates
        # produced a valid split (constant features do not count).
        best = None
        found = 0
        for f in rng.permutation(n_features):
            res = _best_split(X[idx, f], y[idx], n_classes, cfg.min_leaf)
            if res is None:
                continue
            found += 1
            if best is None or res[0] < best[0]:
                best = (res[0], int(f), res[1])
            if found >= max_features:
                break
        if best is None:
            return node
        _, node.feature, node.threshold = best
        mask = X[idx, node.feature] <= node.threshold
        node.left = build(idx[mask], depth + 1)
        node.right = build(idx[~mask], depth + 1)
        return node

    return build(np.arange(len(X)), 0)


def rf_fit(train: Dataset, cfg: ForestConfig = ForestConfig()) -> Forest:
    """Fit a forest on the flattened reflectance features of a labeled dataset."""
    if len(train) == 0:
        raise ValueError("cannot fit a forest on an empty dataset")
    X = train.feature_matrix()
    y = train.labels_array() - 1
    n_classes = 6
    seqs = seeding.seed_sequence(cfg.seed, "forest").spawn(cfg.n_trees)
    trees = []
    for seq in seqs:
        rng = np.random.Generator(np.random.PCG64(seq))
        idx = rng.integers(0, len(X), len(X)) if cfg.bootstrap else np.arange(len(X))
        trees.append(DecisionTree(_grow(X[idx], y[idx], cfg, n_classes, rng), X.shape[1]))
    return Forest(trees, X.shape[1], n_classes, cfg)


def rf_predict(forest: Forest, samples: Dataset | np.ndarray) -> np.ndarray:
    """Majority vote over trees; returns 1-based classes, ties to lowest index."""
    X = samples.feature_matrix() if isinstance(samples, Dataset) else np.asarray(samples)
    if X.ndim != 2 or X.shape[1] != forest.n_features:
        raise ValueError(
            f"feature matrix {X.shape} does not match training width {forest.n_features}"
        )
    votes = np.zeros((len(X), forest.n_classes), dtype=np.int64)
    for tree in forest.trees:
        pred = tree.predict(X)
        votes[np.arange(len(X)), pred] += 1
    return votes.argmax(axis=1) + 1
