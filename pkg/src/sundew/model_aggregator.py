"""Per-component conflict resolution among the specialized predictors.

First a binary consensus decides malware vs benign; if malware, a confident set
of positive predictors is chosen and the riskiest class in it wins.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Collection, FrozenSet, Mapping, Optional, Sequence, Tuple

import numpy as np

from .domain import (
    ALL_LABELS,
    BENIGN,
    MALWARE_CLASSES,
    N_CLASSES,
    Component,
    ConfidentSetMetric,
    ConsensusStrategy,
    EnsembleConfig,
    LEARNED_STRATEGIES,
    Label,
    MalwareClass,
    PredictionTuple,
    PredictorParams,
    RiskTable,
    label_order,
    risk_rank,
)
from .gbdt import GradientBoostedTrees
from .knowledge import ConfidenceWindow

AGGREGATOR_FORMAT = "sundew-aggregator"
AGGREGATOR_VERSION = 1
TIE_EPS = 1e-9
BENIGN_INDEX = len(ALL_LABELS) - 1


@dataclass(frozen=True)
class ComponentPredictions:
    """R_k and S_k for one program: one entry per malware class, in class order."""

    labels: np.ndarray
    probability_estimate: np.ndarray
    malicious_row_percentage: np.ndarray

    def __post_init__(self):
        for name in ("labels", "probability_estimate", "malicious_row_percentage"):
            arr = np.asarray(getattr(self, name))
            if arr.shape != (N_CLASSES,):
                raise ValueError(f"{name} must have one entry per malware class")
            object.__setattr__(self, name, arr)

    @classmethod
    def from_tuples(cls, tuples: Sequence[PredictionTuple]) -> "ComponentPredictions":
        return cls(
            np.array([t.label for t in tuples], dtype=np.int64),
            np.array([t.stats.probability_estimate for t in tuples]),
            np.array([t.stats.malicious_row_percentage for t in tuples]),
        )

    def positives(self) -> Tuple[MalwareClass, ...]:
        return tuple(j for j, r in zip(MALWARE_CLASSES, self.labels) if r == 1)

    def estimate(self, j: MalwareClass) -> float:
        return float(self.probability_estimate[MALWARE_CLASSES.index(j)])

    def feature_vector(self) -> np.ndarray:
        return aggregator_features(
            self.probability_estimate[None, :], self.malicious_row_percentage[None, :]
        )[0]


def aggregator_features(est: np.ndarray, pct: np.ndarray) -> np.ndarray:
    """Interleave (estimate, row percentage) per class: 2n columns."""
    n = est.shape[0]
    X = np.empty((n, 2 * N_CLASSES))
    X[:, 0::2] = est
    X[:, 1::2] = pct
    return X


@dataclass(frozen=True)
class ComponentVerdict:
    label: Label
    confidence: float


@dataclass(frozen=True)
class LearnedAggregator:
    """Multi-class model over predictor outputs; label space is the 8 classes plus Benign."""

    kind: ConsensusStrategy
    component: Component
    model: GradientBoostedTrees

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        if X.shape[1] != 2 * N_CLASSES:
            raise ValueError(f"aggregator input must have {2 * N_CLASSES} columns")
        return self.model.predict_proba(X)

    def to_dict(self) -> dict:
        return {
            "format": AGGREGATOR_FORMAT,
            "version": AGGREGATOR_VERSION,
            "kind": self.kind.value,
            "component": self.component.value,
            "labels": [str(lab) for lab in ALL_LABELS],
            "model": self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LearnedAggregator":
        if d.get("format") != AGGREGATOR_FORMAT or d.get("version") != AGGREGATOR_VERSION:
            raise ValueError("not a supported aggregator document")
        return cls(ConsensusStrategy(d["kind"]), Component(d["component"]),
                   GradientBoostedTrees.from_dict(d["model"]))


def learned_targets(
    kind: ConsensusStrategy, true_labels: Sequence[Label], own_votes: np.ndarray
) -> np.ndarray:
    """Target indices into ALL_LABELS.

    Booster: the program's actual class. Multiplexer: the class if the predictor
    specialized for that class voted 1 on it, else Benign. ``own_votes[i]`` is that
    specialist's vote for program ``i`` (ignored for benign programs).
    """
    y = np.empty(len(true_labels), dtype=np.int64)
    for i, lab in enumerate(true_labels):
        if lab is BENIGN:
            y[i] = BENIGN_INDEX
        elif kind is ConsensusStrategy.BOOSTER:
            y[i] = label_order(lab)
        elif kind is ConsensusStrategy.MULTIPLEXER:
            y[i] = label_order(lab) if own_votes[i] == 1 else BENIGN_INDEX
        else:
            raise ValueError(f"{kind} is not a learned strategy")
    return y


def benign_balanced_weights(y: np.ndarray) -> np.ndarray:
    """Equal total weight for Benign targets and malware targets, mean weight one.

    The consensus decision thresholds P(Benign) at one half, so the two sides of
    that decision are balanced rather than the nine labels.
    """
    benign = y == BENIGN_INDEX
    n_b, n_m = int(benign.sum()), int((~benign).sum())
    if n_b == 0 or n_m == 0:
        return np.ones(len(y))
    return np.where(benign, 0.5 / n_b, 0.5 / n_m) * len(y)


def train_learned_aggregator(
    kind: ConsensusStrategy,
    component: Component,
    labels: np.ndarray,
    est: np.ndarray,
    pct: np.ndarray,
    true_labels: Sequence[Label],
    params: Optional[PredictorParams] = None,
    seed: int = 0,
) -> LearnedAggregator:
    """Fit a Booster or Multiplexer on the conflicting-view matrix of one component.

    ``labels``, ``est`` and ``pct`` are ``(n_programs, n_classes)`` outputs of every
    specialized predictor of ``component`` on every training program.
    """
    if kind not in LEARNED_STRATEGIES:
        raise ValueError(f"{kind} is not a learned strategy")
    params = params or PredictorParams()
    own_votes = np.array([
        labels[i, label_order(lab)] if lab is not BENIGN else 0
        for i, lab in enumerate(true_labels)
    ])
    y = learned_targets(kind, true_labels, own_votes)
    model = GradientBoostedTrees(
        n_classes=len(ALL_LABELS),
        rounds=params.rounds,
        max_depth=params.aggregator_max_depth,
        learning_rate=params.learning_rate,
        max_bins=params.max_bins,
        min_child_weight=params.aggregator_min_child_weight,
        seed=seed,
    )
    model.fit(aggregator_features(est, pct), y, benign_balanced_weights(y))
    return LearnedAggregator(kind, component, model)


def consensus_if_malware(
    preds: ComponentPredictions,
    strategy: ConsensusStrategy,
    learned: Optional[LearnedAggregator] = None,
    majority_tie_malware: bool = True,
    proba: Optional[np.ndarray] = None,
) -> Tuple[bool, float]:
    """Binary vote on maliciousness: returns ``(is_malware, probmalware)``.

    ``proba`` may supply the learned model's class probabilities precomputed in
    batch; otherwise ``learned`` is evaluated on this program.
    """
    r = preds.labels
    p1 = preds.probability_estimate
    n = len(r)
    if strategy is ConsensusStrategy.LOGICAL_OR:
        return bool(np.any(r == 1)), float(p1.max())
    if strategy is ConsensusStrategy.MAJORITY:
        votes = int(np.count_nonzero(r == 1))
        malware = votes > n / 2 or (majority_tie_malware and votes * 2 == n)
        return malware, votes / n
    if strategy is ConsensusStrategy.MOST_CONFIDENT:
        # mean of (Prob-1 - Prob-0); summed in sorted order so the sign is order-free
        diff = float(np.sum(np.sort(2.0 * p1 - 1.0)) / n)
        return diff > 0, float(np.sum(np.sort(p1)) / n)
    if strategy in LEARNED_STRATEGIES:
        if proba is None:
            if learned is None:
                raise ValueError(f"{strategy.value} consensus needs a trained aggregator")
            if learned.kind is not strategy:
                raise ValueError(f"aggregator is a {learned.kind.value}, not {strategy.value}")
            proba = learned.predict_proba(preds.feature_vector())[0]
        p_benign = float(proba[BENIGN_INDEX])
        return p_benign < 0.5, 1.0 - p_benign
    raise ValueError(f"unknown consensus strategy {strategy}")


def _argmax_set(candidates: Sequence[MalwareClass], preds: ComponentPredictions) -> FrozenSet[MalwareClass]:
    best = max(preds.estimate(j) for j in candidates)
    return frozenset(j for j in candidates if preds.estimate(j) >= best - TIE_EPS)


def get_confident_set(
    preds: ComponentPredictions,
    expert: Collection[MalwareClass],
    windows: Optional[Mapping[MalwareClass, ConfidenceWindow]],
    metric: ConfidentSetMetric,
) -> FrozenSet[MalwareClass]:
    positives = preds.positives()
    if not positives:
        raise ValueError("confident set needs at least one positive prediction")
    if metric is ConfidentSetMetric.CONFIDENCE:
        return _argmax_set(positives, preds)
    if metric is ConfidentSetMetric.PRIOR_KNOWLEDGE:
        experts = [j for j in positives if j in expert]
        return _argmax_set(experts or positives, preds)
    if metric is ConfidentSetMetric.CONFIDENCE_WINDOW:
        inside = []
        for j in positives:
            w = windows.get(j) if windows else None
            if w is not None and w.usable and w.separated and w.contains(preds.estimate(j)):
                inside.append(j)
        return frozenset(inside) if inside else _argmax_set(positives, preds)
    raise ValueError(f"unknown confident-set metric {metric}")


def most_risky(
    candidates: Collection[Label],
    confidence: Mapping[Label, float],
    risks: Optional[RiskTable] = None,
) -> Label:
    """Riskiest candidate; ties go to higher confidence, then declaration order."""
    return max(
        candidates,
        key=lambda lab: (risk_rank(lab, risks), confidence.get(lab, 0.0), -label_order(lab)),
    )


def aggregate_model(
    preds: ComponentPredictions,
    expert: Collection[MalwareClass],
    windows: Optional[Mapping[MalwareClass, ConfidenceWindow]],
    strategy: ConsensusStrategy,
    metric: ConfidentSetMetric,
    learned: Optional[LearnedAggregator] = None,
    risks: Optional[RiskTable] = None,
    majority_tie_malware: bool = True,
    proba: Optional[np.ndarray] = None,
) -> ComponentVerdict:
    malware, probmalware = consensus_if_malware(
        preds, strategy, learned, majority_tie_malware, proba
    )
    if not malware:
        return ComponentVerdict(BENIGN, float(1.0 - probmalware))
    if preds.positives():
        cset = get_confident_set(preds, expert, windows, metric)
    else:
        # consensus says malware with no positive vote (learned or mean-difference
        # strategies): every predictor is a candidate
        cset = _argmax_set(MALWARE_CLASSES, preds)
    conf = {j: preds.estimate(j) for j in cset}
    label = most_risky(cset, conf, risks)
    return ComponentVerdict(label, conf[label])


def aggregate_with_config(
    preds: ComponentPredictions,
    component: Component,
    expert: Collection[MalwareClass],
    windows: Optional[Mapping[MalwareClass, ConfidenceWindow]],
    cfg: EnsembleConfig,
    learned: Optional[LearnedAggregator] = None,
    proba: Optional[np.ndarray] = None,
) -> ComponentVerdict:
    return aggregate_model(
        preds,
        expert,
        windows,
        cfg.consensus_strategy[component],
        cfg.confident_set_metric[component],
        learned,
        cfg.risks,
        cfg.majority_tie_malware,
        proba,
    )
