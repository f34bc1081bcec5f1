import json

import numpy as np
import pytest

from sundew.domain import (
    BENIGN,
    Component,
    MalwareClass as M,
    PredictorParams,
    Requirement,
    SnapshotMatrix,
)
from sundew.predictor import (
    SchemaMismatchError,
    SpecializedPredictor,
    TrainingError,
    calibrate_from_probs,
    out_of_fold_outputs,
    predict_batch,
    predict_program,
    program_statistics,
    threshold_label,
    train_specialized,
)


def test_program_statistics_examples():
    s = program_statistics(np.array([1.0, 1.0, 1.0, 1.0]), 0.5)
    assert (s.probability_estimate, s.malicious_row_percentage) == (1.0, 1.0)
    s = program_statistics(np.array([0.9, 0.1]), 0.5)
    assert s.probability_estimate == pytest.approx(0.5) and s.malicious_row_percentage == 0.5
    s = program_statistics(np.array([0.6] * 3 + [0.2] * 7), 0.5)
    assert s.probability_estimate == pytest.approx(0.32) and s.malicious_row_percentage == pytest.approx(0.3)


def test_row_cutoff_is_strict():
    assert program_statistics(np.array([0.5, 0.5]), 0.5).malicious_row_percentage == 0.0


def test_program_statistics_rejects_empty():
    with pytest.raises(ValueError):
        program_statistics(np.array([]), 0.5)


def test_threshold_rule():
    assert threshold_label(0.45, 0.40) == 1
    assert threshold_label(0.39, 0.40) == 0
    assert threshold_label(0.29, 0.30) == 0
    assert threshold_label(0.30, 0.30) == 1
    assert threshold_label(0.0, 0.0) == 1
    assert threshold_label(np.array([0.1, 0.5]), 0.3).tolist() == [0, 1]


def _two_level_rows(shares, n_rows=20):
    """Row probabilities that are 0.95 on a share of rows and 0.05 elsewhere."""
    out = []
    for s in shares:
        k = int(round(s * n_rows))
        out.append(np.array([0.95] * k + [0.05] * (n_rows - k)))
    return out


def test_separable_ties_favor_requirement_edge():
    probs = _two_level_rows([0.7] * 10 + [0.0] * 10)
    truth = np.array([True] * 10 + [False] * 10)
    hi = calibrate_from_probs(probs, truth, Requirement.HIGH_TPR)
    lo = calibrate_from_probs(probs, truth, Requirement.LOW_FPR)
    assert (hi.theta, hi.tpr, hi.fpr) == (0.05, 1.0, 0.0)
    assert (lo.theta, lo.f1, lo.fpr) == (0.7, 1.0, 0.0)
    assert hi.row_prob_cutoff == lo.row_prob_cutoff == 0.5
    assert hi.flags == lo.flags == ()


def test_high_tpr_respects_fpr_cap():
    # positives 0.3..1.0 share, negatives 0..0.6: max TPR with at most 15% false alarms
    pos = np.linspace(0.3, 1.0, 20)
    neg = np.linspace(0.0, 0.6, 20)
    probs = _two_level_rows(list(pos) + list(neg), n_rows=100)
    truth = np.array([True] * 20 + [False] * 20)
    cal = calibrate_from_probs(probs, truth, Requirement.HIGH_TPR)
    assert cal.fpr <= 0.15
    assert not cal.flags


def test_infeasible_cap_returns_max_f1_with_flag():
    pos = [0.9] * 20
    neg = [1.0] * 5 + [0.0] * 15  # a quarter of the benign programs look fully malicious
    probs = _two_level_rows(pos + neg)
    truth = np.array([True] * 20 + [False] * 20)
    cal = calibrate_from_probs(probs, truth, Requirement.HIGH_TPR)
    assert cal.flags == ("infeasible",)
    assert cal.f1 == pytest.approx(2 * 20 / (2 * 20 + 5))


def test_indistinguishable_groups_are_degenerate():
    rng = np.random.default_rng(0)
    probs = [rng.uniform(0, 1, 30) for _ in range(40)]
    truth = np.array([True, False] * 20)
    cal = calibrate_from_probs(probs, truth, Requirement.LOW_FPR)
    assert cal.flags == ("degenerate",)
    assert (cal.row_prob_cutoff, cal.theta) == (0.5, 0.5)


def test_calibration_needs_both_groups():
    with pytest.raises(ValueError):
        calibrate_from_probs(_two_level_rows([0.5, 0.6]), np.array([True, True]), Requirement.LOW_FPR)
    with pytest.raises(ValueError):
        calibrate_from_probs([], np.array([], dtype=bool), Requirement.LOW_FPR)


def _programs(splits):
    train, validate, _ = splits
    return list(train.programs), list(validate.programs)


@pytest.fixture(scope="module")
def hw_cryptominer(small_splits):
    train, validate = _programs(small_splits)
    return train_specialized(train, validate, Component.HARDWARE, M.CRYPTOMINER, Requirement.HIGH_TPR, seed=3)


def test_specialist_trains_on_own_class_and_benign_only(hw_cryptominer):
    assert set(hw_cryptominer.training_labels) == {"Cryptominer", "Benign"}


def test_separable_specialist_reaches_high_tpr(hw_cryptominer):
    assert hw_cryptominer.calibration.tpr >= 0.95


def test_training_is_deterministic(small_splits, hw_cryptominer):
    train, validate = _programs(small_splits)
    again = train_specialized(train, validate, Component.HARDWARE, M.CRYPTOMINER, Requirement.HIGH_TPR, seed=3)
    assert json.dumps(again.to_dict()) == json.dumps(hw_cryptominer.to_dict())


def test_serialization_round_trip(small_splits, hw_cryptominer):
    back = SpecializedPredictor.from_dict(json.loads(json.dumps(hw_cryptominer.to_dict())))
    _, validate = _programs(small_splits)
    mats = [p.data[Component.HARDWARE] for p in validate]
    a, b = predict_batch(hw_cryptominer, mats), predict_batch(back, mats)
    assert np.array_equal(a.probability_estimate, b.probability_estimate)
    assert np.array_equal(a.labels, b.labels)


def test_batch_matches_single_program(small_splits, hw_cryptominer):
    _, validate = _programs(small_splits)
    mats = [p.data[Component.HARDWARE] for p in validate[:5]]
    batch = predict_batch(hw_cryptominer, mats)
    for i, m in enumerate(mats):
        t = predict_program(hw_cryptominer, m)
        assert t.label == batch.labels[i]
        assert t.stats.probability_estimate == pytest.approx(batch.probability_estimate[i])
        assert t.stats.malicious_row_percentage == batch.malicious_row_percentage[i]


def test_schema_mismatch_is_rejected(small_splits, hw_cryptominer):
    _, validate = _programs(small_splits)
    m = validate[0].data[Component.HARDWARE]
    cols = tuple(reversed(m.columns))
    with pytest.raises(SchemaMismatchError):
        predict_program(hw_cryptominer, SnapshotMatrix(m.features, cols, Component.HARDWARE))
    with pytest.raises(SchemaMismatchError):
        predict_program(hw_cryptominer, validate[0].data[Component.OS])


def test_training_errors(small_splits):
    train, validate = _programs(small_splits)
    benign_only = [p for p in train if p.true_class is BENIGN]
    with pytest.raises(TrainingError):
        train_specialized(benign_only, validate, Component.OS, M.PUA, Requirement.LOW_FPR)
    no_benign = [p for p in train if p.true_class is M.PUA]
    with pytest.raises(TrainingError):
        train_specialized(no_benign, validate, Component.OS, M.PUA, Requirement.LOW_FPR)


def test_out_of_fold_outputs_only_change_fitted_programs(small_splits, hw_cryptominer):
    train, _ = _programs(small_splits)
    plain = out_of_fold_outputs(hw_cryptominer, train, folds=1)
    oof = out_of_fold_outputs(hw_cryptominer, train, folds=3, seed=3)
    fitted = np.array([p.true_class in (M.CRYPTOMINER, BENIGN) for p in train])
    assert np.array_equal(plain.probability_estimate[~fitted], oof.probability_estimate[~fitted])
    assert not np.array_equal(plain.probability_estimate[fitted], oof.probability_estimate[fitted])


def test_top_n_feature_selection(small_splits):
    train, validate = _programs(small_splits)
    params = PredictorParams(top_n_features=4, rounds=10)
    p = train_specialized(train, validate, Component.NETWORK, M.BACKDOOR, Requirement.HIGH_TPR, params)
    assert len(p.row_classifier.feature_idx) == 4
