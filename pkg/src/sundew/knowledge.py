"""Prior knowledge about predictors: validation F1, expert sets, strengths, confidence windows."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, FrozenSet, Mapping, Optional, Sequence, Tuple

import numpy as np

from .domain import (
    BENIGN,
    COMPONENTS,
    MALWARE_CLASSES,
    Component,
    Label,
    MalwareClass,
    Program,
)
from .predictor import SpecializedPredictor, predict_batch

PredictorTable = Mapping[Tuple[Component, MalwareClass], SpecializedPredictor]

MIN_WINDOW_PROGRAMS = 4


def f1_score(pred: np.ndarray, truth: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    tp = np.count_nonzero(pred & truth)
    fp = np.count_nonzero(pred & ~truth)
    fn = np.count_nonzero(~pred & truth)
    return 2 * tp / (2 * tp + fp + fn) if tp else 0.0


@dataclass(frozen=True)
class PriorKnowledgeTable:
    f1: Mapping[Component, Mapping[MalwareClass, float]]

    def __post_init__(self):
        for c in COMPONENTS:
            for j in MALWARE_CLASSES:
                v = self.f1[c][j]
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"F1 {v} for ({c}, {j}) outside [0, 1]")

    def __getitem__(self, key: Tuple[Component, MalwareClass]) -> float:
        return self.f1[key[0]][key[1]]

    def to_dict(self) -> dict:
        return {c.value: {j.value: self.f1[c][j] for j in MALWARE_CLASSES} for c in COMPONENTS}

    @classmethod
    def from_dict(cls, d: Mapping) -> "PriorKnowledgeTable":
        return cls({Component(c): {MalwareClass(j): float(v) for j, v in t.items()} for c, t in d.items()})


def compute_prior_knowledge(
    predictors: PredictorTable, validate: Sequence[Program]
) -> PriorKnowledgeTable:
    """Program-level F1 of every predictor on its own class vs benign validation programs."""
    table: Dict[Component, Dict[MalwareClass, float]] = {}
    for c in COMPONENTS:
        table[c] = {}
        for j in MALWARE_CLASSES:
            if (c, j) not in predictors:
                raise KeyError(f"missing predictor for ({c}, {j})")
            progs = [p for p in validate if p.true_class is j or p.true_class is BENIGN]
            if not progs:
                table[c][j] = 0.0
                continue
            out = predict_batch(predictors[(c, j)], [p.data[c] for p in progs])
            truth = np.array([p.true_class is j for p in progs])
            table[c][j] = f1_score(out.labels, truth)
    return PriorKnowledgeTable(table)


def expert_set(t: PriorKnowledgeTable, k: Component, eta: float) -> FrozenSet[MalwareClass]:
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta={eta} outside [0, 1]")
    return frozenset(j for j in MALWARE_CLASSES if t.f1[k][j] > eta)


def benign_strength(t: PriorKnowledgeTable, k: Component) -> float:
    """Strength proxy for a Benign component verdict: the component's mean F1."""
    return float(np.mean([t.f1[k][j] for j in MALWARE_CLASSES]))


def strengths_for_predictions(
    t: PriorKnowledgeTable, predicted: Mapping[Component, Label]
) -> Dict[Component, float]:
    out = {}
    for c in COMPONENTS:
        label = predicted[c]
        out[c] = benign_strength(t, c) if label is BENIGN else t.f1[c][label]
    return out


@dataclass(frozen=True)
class ConfidenceWindow:
    """IQRs of a predictor's probability estimate on its own class vs everything else.

    ``gap`` is ``own_q25 - other_q75``: positive when the own-class box sits above
    the other box.
    """

    own_iqr: Tuple[float, float]
    other_iqr: Tuple[float, float]
    separated: bool
    usable: bool = True

    @property
    def gap(self) -> float:
        return self.own_iqr[0] - self.other_iqr[1]

    def contains(self, estimate: float) -> bool:
        return self.own_iqr[0] <= estimate <= self.own_iqr[1]

    def to_dict(self) -> dict:
        return {
            "own_iqr": list(self.own_iqr),
            "other_iqr": list(self.other_iqr),
            "separated": self.separated,
            "usable": self.usable,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ConfidenceWindow":
        return cls(tuple(d["own_iqr"]), tuple(d["other_iqr"]), bool(d["separated"]), bool(d["usable"]))


UNUSABLE_WINDOW = ConfidenceWindow((0.0, 0.0), (0.0, 0.0), separated=False, usable=False)

WindowTable = Mapping[Component, Mapping[MalwareClass, ConfidenceWindow]]


def window_from_estimates(own: np.ndarray, other: np.ndarray, gamma: float) -> ConfidenceWindow:
    if len(own) < MIN_WINDOW_PROGRAMS or len(other) < MIN_WINDOW_PROGRAMS:
        return UNUSABLE_WINDOW
    oq = tuple(float(v) for v in np.quantile(own, [0.25, 0.75]))
    xq = tuple(float(v) for v in np.quantile(other, [0.25, 0.75]))
    return ConfidenceWindow(oq, xq, separated=(oq[0] - xq[1]) >= gamma)


def compute_confidence_windows(
    predictors: PredictorTable,
    validate: Sequence[Program],
    gamma: float,
    estimates: Optional[Mapping[Component, np.ndarray]] = None,
) -> Dict[Component, Dict[MalwareClass, ConfidenceWindow]]:
    """Build a window per predictor from validation probability estimates.

    ``estimates`` may carry precomputed ``(n_programs, n_classes)`` arrays per
    component, aligned with ``validate``.
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    labels = [p.true_class for p in validate]
    counts = {lab: labels.count(lab) for lab in set(labels)}
    out: Dict[Component, Dict[MalwareClass, ConfidenceWindow]] = {}
    for c in COMPONENTS:
        out[c] = {}
        for ji, j in enumerate(MALWARE_CLASSES):
            if counts.get(j, 0) < MIN_WINDOW_PROGRAMS or counts.get(BENIGN, 0) < MIN_WINDOW_PROGRAMS:
                out[c][j] = UNUSABLE_WINDOW
                continue
            if estimates is not None:
                est = estimates[c][:, ji]
            else:
                est = predict_batch(predictors[(c, j)], [p.data[c] for p in validate]).probability_estimate
            own = np.array([lab is j for lab in labels])
            out[c][j] = window_from_estimates(est[own], est[~own], gamma)
    return out


def windows_to_dict(w: WindowTable) -> dict:
    return {c.value: {j.value: w[c][j].to_dict() for j in MALWARE_CLASSES} for c in COMPONENTS}


def windows_from_dict(d: Mapping) -> Dict[Component, Dict[MalwareClass, ConfidenceWindow]]:
    return {
        Component(c): {MalwareClass(j): ConfidenceWindow.from_dict(v) for j, v in t.items()}
        for c, t in d.items()
    }
