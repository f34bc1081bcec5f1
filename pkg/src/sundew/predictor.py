"""Specialized (component, class) predictors: row classifier plus program-level thresholds."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import mannwhitneyu

from .domain import (
    BENIGN,
    Component,
    MalwareClass,
    PredictionTuple,
    PredictorParams,
    Program,
    Requirement,
    SnapshotMatrix,
    Statistics,
)
from .gbdt import GradientBoostedTrees

log = logging.getLogger(__name__)

PREDICTOR_FORMAT = "sundew-predictor"
PREDICTOR_VERSION = 1

THETA_GRID = np.round(np.arange(21) * 0.05, 2)
CUTOFF_GRID = (0.3, 0.4, 0.5, 0.6, 0.7)
DEFAULT_CUTOFF, DEFAULT_THETA = 0.5, 0.5


class SchemaMismatchError(ValueError):
    pass


class TrainingError(ValueError):
    pass


def schema_hash(component: Component, columns: Sequence[str]) -> str:
    text = component.value + "|" + ",".join(columns)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class RowClassifier:
    model: GradientBoostedTrees
    component: Component
    columns: Tuple[str, ...]
    feature_idx: Tuple[int, ...]

    @property
    def schema_hash(self) -> str:
        return schema_hash(self.component, self.columns)

    def check_schema(self, columns: Sequence[str]) -> None:
        if schema_hash(self.component, columns) != self.schema_hash:
            raise SchemaMismatchError(
                f"{self.component} matrix columns do not match the training schema"
            )

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        return self.model.predict_proba(X[:, list(self.feature_idx)])

    def to_dict(self) -> dict:
        return {
            "component": self.component.value,
            "columns": list(self.columns),
            "feature_idx": list(self.feature_idx),
            "schema_hash": self.schema_hash,
            "model": self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RowClassifier":
        clf = cls(
            model=GradientBoostedTrees.from_dict(d["model"]),
            component=Component(d["component"]),
            columns=tuple(d["columns"]),
            feature_idx=tuple(int(i) for i in d["feature_idx"]),
        )
        if clf.schema_hash != d["schema_hash"]:
            raise SchemaMismatchError("stored schema hash does not match stored columns")
        return clf


def predict_rows(clf: RowClassifier, m: SnapshotMatrix) -> np.ndarray:
    clf.check_schema(m.columns)
    return clf.predict_matrix(m.features)


def program_statistics(row_probs: np.ndarray, row_prob_cutoff: float) -> Statistics:
    """Mean row probability and the share of rows strictly above the cutoff."""
    row_probs = np.asarray(row_probs, dtype=np.float64)
    if row_probs.size == 0:
        raise ValueError("no row probabilities")
    est = float(np.clip(row_probs.mean(), 0.0, 1.0))
    pct = float(np.count_nonzero(row_probs > row_prob_cutoff) / row_probs.size)
    return Statistics(est, pct)


def threshold_label(malicious_row_percentage, theta: float):
    """1 when the malicious-row share reaches theta (inclusive). Works elementwise."""
    out = np.asarray(malicious_row_percentage) >= theta
    return out.astype(np.int64) if out.ndim else int(out)


@dataclass(frozen=True)
class Calibration:
    row_prob_cutoff: float
    theta: float
    tpr: float
    fpr: float
    f1: float
    flags: Tuple[str, ...] = ()


@dataclass(frozen=True)
class SpecializedPredictor:
    component: Component
    target_class: MalwareClass
    requirement: Requirement
    row_classifier: RowClassifier
    row_prob_cutoff: float
    theta: float
    calibration: Calibration
    training_labels: Tuple[str, ...] = ()

    @property
    def flags(self) -> Tuple[str, ...]:
        return self.calibration.flags

    def to_dict(self) -> dict:
        c = self.calibration
        return {
            "format": PREDICTOR_FORMAT,
            "version": PREDICTOR_VERSION,
            "component": self.component.value,
            "target_class": self.target_class.value,
            "requirement": self.requirement.value,
            "row_prob_cutoff": self.row_prob_cutoff,
            "theta": self.theta,
            "calibration": {
                "row_prob_cutoff": c.row_prob_cutoff,
                "theta": c.theta,
                "tpr": c.tpr,
                "fpr": c.fpr,
                "f1": c.f1,
                "flags": list(c.flags),
            },
            "training_labels": list(self.training_labels),
            "row_classifier": self.row_classifier.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpecializedPredictor":
        if d.get("format") != PREDICTOR_FORMAT or d.get("version") != PREDICTOR_VERSION:
            raise ValueError("not a supported predictor document")
        c = d["calibration"]
        return cls(
            component=Component(d["component"]),
            target_class=MalwareClass(d["target_class"]),
            requirement=Requirement(d["requirement"]),
            row_classifier=RowClassifier.from_dict(d["row_classifier"]),
            row_prob_cutoff=float(d["row_prob_cutoff"]),
            theta=float(d["theta"]),
            calibration=Calibration(
                c["row_prob_cutoff"], c["theta"], c["tpr"], c["fpr"], c["f1"], tuple(c["flags"])
            ),
            training_labels=tuple(d["training_labels"]),
        )


def predict_program(p: SpecializedPredictor, d: SnapshotMatrix) -> PredictionTuple:
    if d.component is not p.component:
        raise SchemaMismatchError(f"{d.component} data given to a {p.component} predictor")
    probs = predict_rows(p.row_classifier, d)
    stats = program_statistics(probs, p.row_prob_cutoff)
    return PredictionTuple(threshold_label(stats.malicious_row_percentage, p.theta), stats)


@dataclass(frozen=True)
class BatchOutput:
    """Predictor outputs for many programs, as parallel arrays."""

    labels: np.ndarray
    probability_estimate: np.ndarray
    malicious_row_percentage: np.ndarray


def row_probabilities(clf: RowClassifier, matrices: Sequence[SnapshotMatrix]) -> List[np.ndarray]:
    """Row probabilities for many programs with a single pass through the trees."""
    if not matrices:
        return []
    for m in matrices:
        clf.check_schema(m.columns)
    X = np.concatenate([m.features for m in matrices])
    probs = clf.predict_matrix(X)
    bounds = np.cumsum([m.n_rows for m in matrices])[:-1]
    return np.split(probs, bounds)


def predict_batch(p: SpecializedPredictor, matrices: Sequence[SnapshotMatrix]) -> BatchOutput:
    per_program = row_probabilities(p.row_classifier, matrices)
    est = np.array([np.clip(r.mean(), 0.0, 1.0) for r in per_program])
    pct = np.array([np.count_nonzero(r > p.row_prob_cutoff) / r.size for r in per_program])
    return BatchOutput(threshold_label(pct, p.theta), est, pct)


def _rates(pred: np.ndarray, truth: np.ndarray) -> Tuple[float, float, float]:
    tp = np.count_nonzero(pred & truth)
    fp = np.count_nonzero(pred & ~truth)
    fn = np.count_nonzero(~pred & truth)
    tn = np.count_nonzero(~pred & ~truth)
    tpr = tp / (tp + fn) if tp + fn else 0.0
    fpr = fp / (fp + tn) if fp + tn else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return tpr, fpr, f1


def calibrate_from_probs(
    row_probs: Sequence[np.ndarray],
    is_positive: np.ndarray,
    requirement: Requirement,
    params: Optional[PredictorParams] = None,
) -> Calibration:
    """Grid-search (row cutoff, row-percentage threshold) on validation programs.

    High-TPR classes maximize TPR subject to the high-TPR FPR cap; low-FPR classes
    maximize F1 subject to the tighter cap. When no pair meets its cap the max-F1
    pair is returned and flagged ``infeasible``. When the program-level probability
    estimates of the two groups are statistically indistinguishable the defaults
    are returned and flagged ``degenerate``.
    """
    params = params or PredictorParams()
    truth = np.asarray(is_positive, dtype=bool)
    if len(row_probs) == 0:
        raise ValueError("empty validation split")
    if truth.all() or not truth.any():
        raise ValueError("validation needs both target-class and benign programs")

    est = np.array([r.mean() for r in row_probs])
    # exact ties (e.g. constant estimates) carry no evidence either way
    if np.ptp(est) == 0:
        pval = 1.0
    else:
        pval = mannwhitneyu(est[truth], est[~truth], alternative="greater").pvalue
    if pval > params.degenerate_alpha:
        pct = np.array([np.count_nonzero(r > DEFAULT_CUTOFF) / r.size for r in row_probs])
        tpr, fpr, f1 = _rates(pct >= DEFAULT_THETA, truth)
        log.warning("degenerate calibration (p=%.3g); using default thresholds", pval)
        return Calibration(DEFAULT_CUTOFF, DEFAULT_THETA, tpr, fpr, f1, ("degenerate",))

    high_tpr = requirement is Requirement.HIGH_TPR
    cap = params.high_tpr_fpr_cap if high_tpr else params.low_fpr_fpr_cap
    rows = []
    for cutoff in CUTOFF_GRID:
        pct = np.array([np.count_nonzero(r > cutoff) / r.size for r in row_probs])
        for theta in THETA_GRID:
            tpr, fpr, f1 = _rates(pct >= theta, truth)
            rows.append((cutoff, float(theta), tpr, fpr, f1))

    def tie_key(r):
        # lower FPR first, then the theta edge the requirement favors (smallest for
        # HighTPR, largest for LowFPR), then the cutoff nearest 0.5, then the higher
        cutoff, theta = r[0], r[1]
        theta_pref = -theta if high_tpr else theta
        return (-r[3], theta_pref, -abs(cutoff - 0.5), cutoff)

    feasible = [r for r in rows if r[3] <= cap + 1e-12]
    flags: Tuple[str, ...] = ()
    if feasible:
        objective = (lambda r: r[2]) if high_tpr else (lambda r: r[4])
        best = max(feasible, key=lambda r: (objective(r),) + tie_key(r))
    else:
        flags = ("infeasible",)
        best = max(rows, key=lambda r: (r[4],) + tie_key(r))
    cutoff, theta, tpr, fpr, f1 = best
    return Calibration(cutoff, theta, tpr, fpr, f1, flags)


def calibrate_thresholds(
    clf: RowClassifier,
    validate: Sequence[Program],
    target: MalwareClass,
    requirement: Requirement,
    params: Optional[PredictorParams] = None,
) -> Calibration:
    progs = [p for p in validate if p.true_class is target or p.true_class is BENIGN]
    if not progs:
        raise ValueError("empty validation split")
    probs = row_probabilities(clf, [p.data[clf.component] for p in progs])
    truth = np.array([p.true_class is target for p in progs])
    return calibrate_from_probs(probs, truth, requirement, params)


def fit_row_classifier(
    programs: Sequence[Program],
    component: Component,
    target: MalwareClass,
    params: Optional[PredictorParams] = None,
    seed: int = 0,
) -> RowClassifier:
    """Fit the row model on the rows of ``target`` programs (1) and benign programs (0)."""
    params = params or PredictorParams()
    progs = [p for p in programs if p.true_class is target or p.true_class is BENIGN]
    n_pos = sum(p.true_class is target for p in progs)
    if n_pos == 0:
        raise TrainingError(f"no {target} programs in the training split")
    if n_pos == len(progs):
        raise TrainingError("no benign programs in the training split")

    mats = [p.data[component] for p in progs]
    columns = mats[0].columns
    X = np.concatenate([m.features for m in mats])
    y = np.concatenate(
        [np.full(m.n_rows, 1.0 if p.true_class is target else 0.0) for p, m in zip(progs, mats)]
    )
    # equal total weight per class, mean weight one
    pos_rows = y.sum()
    neg_rows = y.size - pos_rows
    w = np.where(y == 1.0, 0.5 / pos_rows, 0.5 / neg_rows) * y.size

    def fit(cols):
        model = GradientBoostedTrees(
            rounds=params.rounds,
            max_depth=params.max_depth,
            learning_rate=params.learning_rate,
            max_bins=params.max_bins,
            seed=seed,
        )
        return model.fit(X[:, cols], y, w)

    feature_idx = list(range(X.shape[1]))
    model = fit(feature_idx)
    if params.top_n_features is not None and params.top_n_features < X.shape[1]:
        ranked = np.argsort(-model.feature_gain, kind="stable")[: params.top_n_features]
        feature_idx = sorted(int(i) for i in ranked)
        model = fit(feature_idx)
    return RowClassifier(model, component, tuple(columns), tuple(feature_idx))


def train_specialized(
    train: Sequence[Program],
    validate: Sequence[Program],
    component: Component,
    target: MalwareClass,
    requirement: Requirement,
    params: Optional[PredictorParams] = None,
    seed: int = 0,
) -> SpecializedPredictor:
    """Fit P_{component,target} on target-class vs benign rows, then calibrate."""
    params = params or PredictorParams()
    progs = [p for p in train if p.true_class is target or p.true_class is BENIGN]
    training_labels = tuple(sorted({str(p.true_class) for p in progs}))
    assert set(training_labels) <= {str(target), str(BENIGN)}
    clf = fit_row_classifier(progs, component, target, params, seed)
    cal = calibrate_thresholds(clf, validate, target, requirement, params)
    return SpecializedPredictor(
        component=component,
        target_class=target,
        requirement=requirement,
        row_classifier=clf,
        row_prob_cutoff=cal.row_prob_cutoff,
        theta=cal.theta,
        calibration=cal,
        training_labels=training_labels,
    )


def out_of_fold_outputs(
    p: SpecializedPredictor,
    train: Sequence[Program],
    folds: int,
    params: Optional[PredictorParams] = None,
    seed: int = 0,
) -> BatchOutput:
    """Outputs of ``p`` on its own training programs, without in-sample optimism.

    Programs the row model was fit on (target class and benign) are split into
    ``folds`` interleaved folds; each fold is scored by a row model refit on the
    others, with ``p``'s calibrated thresholds. All other programs are scored by
    ``p`` itself. ``folds < 2`` returns plain in-sample outputs.
    """
    out = predict_batch(p, [q.data[p.component] for q in train])
    if folds < 2:
        return out
    labels = out.labels.copy()
    est = out.probability_estimate.copy()
    pct = out.malicious_row_percentage.copy()
    fitted = [i for i, q in enumerate(train) if q.true_class is p.target_class or q.true_class is BENIGN]
    for f in range(folds):
        held = fitted[f::folds]
        rest = [train[i] for k, i in enumerate(fitted) if k % folds != f]
        if not held:
            continue
        try:
            clf = fit_row_classifier(rest, p.component, p.target_class, params, seed + 1000 * (f + 1))
        except TrainingError:
            continue  # too few programs left in the other folds; keep in-sample outputs
        probs = row_probabilities(clf, [train[i].data[p.component] for i in held])
        for i, r in zip(held, probs):
            est[i] = np.clip(r.mean(), 0.0, 1.0)
            pct[i] = np.count_nonzero(r > p.row_prob_cutoff) / r.size
            labels[i] = threshold_label(pct[i], p.theta)
    return BatchOutput(labels, est, pct)
