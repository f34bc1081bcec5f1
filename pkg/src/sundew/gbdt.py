"""Histogram gradient-boosted regression trees for logistic and softmax losses.

Trees are grown level-wise on quantile-binned features. A split on bin ``b`` of
feature ``f`` sends a row left when ``x[f] <= edges[f][b]``, so binned training and
raw-value inference agree exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

FORMAT_VERSION = 1


@dataclass
class Tree:
    feature: np.ndarray      # int, -1 for leaves
    threshold: np.ndarray    # float
    left: np.ndarray         # int child index, -1 for leaves
    right: np.ndarray
    value: np.ndarray        # leaf weight (0 on internal nodes)

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            internal = self.feature[node] >= 0
            if not internal.any():
                break
            idx = rows[internal]
            n = node[idx]
            go_left = X[idx, self.feature[n]] <= self.threshold[n]
            node[idx] = np.where(go_left, self.left[n], self.right[n])
        return self.value[node]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=np.float64),
        )


def _bin_edges(X: np.ndarray, max_bins: int) -> List[np.ndarray]:
    qs = np.linspace(0, 1, max_bins + 1)[1:-1]
    edges = []
    for f in range(X.shape[1]):
        e = np.unique(np.quantile(X[:, f], qs, method="linear"))
        edges.append(e)
    return edges


def _bin(X: np.ndarray, edges: List[np.ndarray]) -> np.ndarray:
    out = np.empty(X.shape, dtype=np.int32)
    for f, e in enumerate(edges):
        out[:, f] = np.searchsorted(e, X[:, f], side="left")
    return out


class _TreeGrower:
    """Grows one tree on pre-binned data given per-row gradients and hessians."""

    def __init__(self, binned, edges, max_depth, reg_lambda, min_child_weight, n_bins):
        self.binned = binned
        self.edges = edges
        self.max_depth = max_depth
        self.reg_lambda = reg_lambda
        self.min_child_weight = min_child_weight
        self.n_bins = n_bins
        n, m = binned.shape
        self.n_features = m
        # flat (feature, bin) index per cell, reused for every histogram
        self.flat = binned.astype(np.intp) + (np.arange(m, dtype=np.intp) * n_bins)[None, :]
        self.n_edges = np.array([len(e) for e in edges])

    def grow(self, g: np.ndarray, h: np.ndarray, gain_acc: np.ndarray) -> Tree:
        n = g.shape[0]
        m, nb, lam = self.n_features, self.n_bins, self.reg_lambda
        feature, threshold, left, right, value = [-1], [0.0], [-1], [-1], [0.0]
        node_of_row = np.zeros(n, dtype=np.int64)
        frontier = [0]
        sums = {0: (g.sum(), h.sum())}

        for _depth in range(self.max_depth):
            if not frontier:
                break
            slot = np.full(len(feature), -1, dtype=np.int64)
            slot[frontier] = np.arange(len(frontier))
            row_slot = slot[node_of_row]
            active = row_slot >= 0
            if not active.any():
                break
            # rows outside the frontier get zero weight instead of being gathered out
            idx = (self.flat + (np.maximum(row_slot, 0) * (m * nb))[:, None]).ravel()
            size = len(frontier) * m * nb
            gh = np.bincount(idx, weights=np.repeat(np.where(active, g, 0.0), m), minlength=size)
            hh = np.bincount(idx, weights=np.repeat(np.where(active, h, 0.0), m), minlength=size)
            gh = gh.reshape(len(frontier), m, nb)
            hh = hh.reshape(len(frontier), m, nb)
            gl = np.cumsum(gh, axis=2)
            hl = np.cumsum(hh, axis=2)

            new_frontier = []
            for s, node in enumerate(frontier):
                G, H = sums[node]
                GL, HL = gl[s], hl[s]
                GR, HR = G - GL, H - HL
                gain = GL**2 / (HL + lam) + GR**2 / (HR + lam) - G**2 / (H + lam)
                ok = (HL >= self.min_child_weight) & (HR >= self.min_child_weight)
                # a split at the last occupied bin leaves the right side empty
                ok &= np.arange(nb)[None, :] < self.n_edges[:, None]
                gain = np.where(ok, gain, -np.inf)
                best = int(np.argmax(gain))
                f, b = divmod(best, nb)
                if not np.isfinite(gain[f, b]) or gain[f, b] <= 1e-12:
                    continue
                gain_acc[f] += gain[f, b]
                li, ri = len(feature), len(feature) + 1
                feature[node] = f
                threshold[node] = float(self.edges[f][b])
                left[node], right[node] = li, ri
                for _ in range(2):
                    feature.append(-1)
                    threshold.append(0.0)
                    left.append(-1)
                    right.append(-1)
                    value.append(0.0)
                sums[li] = (GL[f, b], HL[f, b])
                sums[ri] = (GR[f, b], HR[f, b])
                in_node = node_of_row == node
                goes_left = self.binned[:, f] <= b
                node_of_row[in_node & goes_left] = li
                node_of_row[in_node & ~goes_left] = ri
                new_frontier.extend([li, ri])
            frontier = new_frontier

        feature_arr = np.asarray(feature, dtype=np.int64)
        value_arr = np.zeros(len(feature))
        for node, (G, H) in sums.items():
            if feature_arr[node] < 0:
                value_arr[node] = -G / (H + lam)
        return Tree(
            feature=feature_arr,
            threshold=np.asarray(threshold, dtype=np.float64),
            left=np.asarray(left, dtype=np.int64),
            right=np.asarray(right, dtype=np.int64),
            value=value_arr,
        )


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softmax(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


@dataclass
class GradientBoostedTrees:
    """Gradient boosting on shallow regression trees.

    ``n_classes == 1`` fits a binary logistic model; ``n_classes > 1`` fits one
    tree per class per round under softmax cross-entropy.
    """

    n_classes: int = 1
    rounds: int = 50
    max_depth: int = 3
    learning_rate: float = 0.1
    reg_lambda: float = 1.0
    min_child_weight: float = 1e-3
    max_bins: int = 64
    seed: int = 0
    base_score: Optional[np.ndarray] = None
    trees: List[List[Tree]] = field(default_factory=list)
    feature_gain: Optional[np.ndarray] = None
    n_features: int = 0

    def fit(self, X: np.ndarray, y: np.ndarray, sample_weight: Optional[np.ndarray] = None):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        n, m = X.shape
        if n == 0:
            raise ValueError("cannot fit on an empty design matrix")
        w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
        self.n_features = m
        edges = _bin_edges(X, self.max_bins)
        binned = _bin(X, edges)
        grower = _TreeGrower(
            binned, edges, self.max_depth, self.reg_lambda, self.min_child_weight, self.max_bins
        )
        self.feature_gain = np.zeros(m)
        self.trees = []
        K = self.n_classes

        if K == 1:
            y = y.astype(np.float64)
            if set(np.unique(y)) - {0.0, 1.0}:
                raise ValueError("binary targets must be 0/1")
            p0 = np.clip(np.sum(w * y) / np.sum(w), 1e-6, 1 - 1e-6)
            self.base_score = np.array([np.log(p0 / (1 - p0))])
            F = np.full(n, self.base_score[0])
            for _ in range(self.rounds):
                p = _sigmoid(F)
                tree = grower.grow(w * (p - y), w * p * (1 - p), self.feature_gain)
                F += self.learning_rate * tree.predict(X)
                self.trees.append([tree])
        else:
            y = y.astype(np.int64)
            if y.min() < 0 or y.max() >= K:
                raise ValueError("class targets out of range")
            Y = np.zeros((n, K))
            Y[np.arange(n), y] = 1.0
            prior = (Y * w[:, None]).sum(axis=0) + 1.0
            prior /= prior.sum()
            self.base_score = np.log(prior)
            F = np.tile(self.base_score, (n, 1))
            for _ in range(self.rounds):
                P = _softmax(F)
                round_trees = []
                for k in range(K):
                    pk = P[:, k]
                    # factor K/(K-1) is the usual softmax hessian scaling
                    hk = w * pk * (1 - pk) * K / (K - 1)
                    tree = grower.grow(w * (pk - Y[:, k]), hk, self.feature_gain)
                    F[:, k] += self.learning_rate * tree.predict(X)
                    round_trees.append(tree)
                self.trees.append(round_trees)
        return self

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got shape {X.shape}")
        K = self.n_classes
        F = np.tile(self.base_score, (X.shape[0], 1))
        for round_trees in self.trees:
            for k, tree in enumerate(round_trees):
                F[:, k] += self.learning_rate * tree.predict(X)
        return F[:, 0] if K == 1 else F

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """Binary: P(y=1) per row. Multi-class: row-stochastic matrix."""
        F = self.decision_function(X)
        return _sigmoid(F) if self.n_classes == 1 else _softmax(F)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "n_classes": self.n_classes,
            "rounds": self.rounds,
            "max_depth": self.max_depth,
            "learning_rate": self.learning_rate,
            "reg_lambda": self.reg_lambda,
            "min_child_weight": self.min_child_weight,
            "max_bins": self.max_bins,
            "seed": self.seed,
            "n_features": self.n_features,
            "base_score": self.base_score.tolist(),
            "feature_gain": self.feature_gain.tolist(),
            "trees": [[t.to_dict() for t in rt] for rt in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GradientBoostedTrees":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported tree format version {d.get('format_version')}")
        return cls(
            n_classes=d["n_classes"],
            rounds=d["rounds"],
            max_depth=d["max_depth"],
            learning_rate=d["learning_rate"],
            reg_lambda=d["reg_lambda"],
            min_child_weight=d["min_child_weight"],
            max_bins=d["max_bins"],
            seed=d["seed"],
            n_features=d["n_features"],
            base_score=np.asarray(d["base_score"], dtype=np.float64),
            feature_gain=np.asarray(d["feature_gain"], dtype=np.float64),
            trees=[[Tree.from_dict(t) for t in rt] for rt in d["trees"]],
        )
