import numpy as np
import pytest

from sundew.domain import (
    BENIGN,
    MALWARE_CLASSES,
    Component,
    ConfidentSetMetric as Metric,
    ConsensusStrategy as CS,
    MalwareClass as M,
    PredictionTuple,
    Statistics,
)
from sundew.gbdt import GradientBoostedTrees
from sundew.knowledge import ConfidenceWindow
from sundew.model_aggregator import (
    BENIGN_INDEX,
    ComponentPredictions,
    LearnedAggregator,
    aggregate_model,
    aggregator_features,
    benign_balanced_weights,
    consensus_if_malware,
    get_confident_set,
    learned_targets,
    most_risky,
    train_learned_aggregator,
)

# probability estimates and votes of the eight specialists for one program
CONFLICT_PROB1 = [0.47, 0.38, 0.33, 0.73, 0.33, 0.34, 0.19, 0.49]
CONFLICT_VOTES = [1, 1, 0, 1, 0, 0, 0, 1]


def preds(votes, est, pct=None):
    pct = est if pct is None else pct
    return ComponentPredictions(np.array(votes), np.array(est, float), np.array(pct, float))


def single(j, est, others=0.1):
    votes = [int(k is j) for k in MALWARE_CLASSES]
    e = [est if k is j else others for k in MALWARE_CLASSES]
    return preds(votes, e)


def test_conflict_example_most_confident_is_benign():
    malware, prob = consensus_if_malware(preds(CONFLICT_VOTES, CONFLICT_PROB1), CS.MOST_CONFIDENT)
    assert not malware
    assert prob == pytest.approx(np.mean(CONFLICT_PROB1))


def test_conflict_example_logical_or_is_malware():
    malware, _ = consensus_if_malware(preds(CONFLICT_VOTES, CONFLICT_PROB1), CS.LOGICAL_OR)
    assert malware


def test_conflict_example_majority_tie_is_malware():
    p = preds(CONFLICT_VOTES, CONFLICT_PROB1)
    assert sum(CONFLICT_VOTES) == 4
    assert consensus_if_malware(p, CS.MAJORITY)[0]
    assert not consensus_if_malware(p, CS.MAJORITY, majority_tie_malware=False)[0]


def test_confidence_set_picks_highest_estimate():
    votes = [0, 1, 0, 1, 0, 0, 0, 0]
    p = preds(votes, CONFLICT_PROB1)
    assert get_confident_set(p, set(), None, Metric.CONFIDENCE) == {M.BACKDOOR}


def test_prior_knowledge_restricts_to_experts():
    e = [0.1] * 8
    e[MALWARE_CLASSES.index(M.BACKDOOR)] = 0.9
    e[MALWARE_CLASSES.index(M.SPYWARE)] = 0.9
    votes = [int(j in (M.BACKDOOR, M.SPYWARE)) for j in MALWARE_CLASSES]
    p = preds(votes, e)
    assert get_confident_set(p, {M.SPYWARE}, None, Metric.PRIOR_KNOWLEDGE) == {M.SPYWARE}
    # no positive expert: all positives compete
    assert get_confident_set(p, {M.PUA}, None, Metric.PRIOR_KNOWLEDGE) == {M.BACKDOOR, M.SPYWARE}


def test_window_metric_falls_back_to_confidence():
    p = preds([1, 1, 0, 0, 0, 0, 0, 0], [0.6, 0.7, 0, 0, 0, 0, 0, 0])
    far = ConfidenceWindow((0.9, 0.95), (0.1, 0.2), separated=True)
    windows = {j: far for j in MALWARE_CLASSES}
    assert get_confident_set(p, set(), windows, Metric.CONFIDENCE_WINDOW) == \
        get_confident_set(p, set(), windows, Metric.CONFIDENCE)


def test_window_metric_keeps_in_window_positives():
    p = preds([1, 1, 0, 0, 0, 0, 0, 0], [0.6, 0.7, 0, 0, 0, 0, 0, 0])
    windows = {j: ConfidenceWindow((0.9, 0.95), (0.1, 0.2), True) for j in MALWARE_CLASSES}
    windows[M.CRYPTOMINER] = ConfidenceWindow((0.5, 0.65), (0.1, 0.2), True)
    assert get_confident_set(p, set(), windows, Metric.CONFIDENCE_WINDOW) == {M.CRYPTOMINER}
    # an unseparated window is ignored
    windows[M.CRYPTOMINER] = ConfidenceWindow((0.5, 0.65), (0.5, 0.6), False)
    assert get_confident_set(p, set(), windows, Metric.CONFIDENCE_WINDOW) == {M.BANKER}


def test_confident_set_requires_a_positive():
    with pytest.raises(ValueError):
        get_confident_set(preds([0] * 8, [0.1] * 8), set(), None, Metric.CONFIDENCE)


def test_risk_tie_break_backdoor_over_deceptor():
    assert most_risky({M.BACKDOOR, M.DECEPTOR}, {M.BACKDOOR: 0.5, M.DECEPTOR: 0.5}) is M.BACKDOOR
    e = [0.1] * 8
    e[MALWARE_CLASSES.index(M.BACKDOOR)] = 0.8
    e[MALWARE_CLASSES.index(M.DECEPTOR)] = 0.8
    votes = [int(j in (M.BACKDOOR, M.DECEPTOR)) for j in MALWARE_CLASSES]
    v = aggregate_model(preds(votes, e), set(), None, CS.LOGICAL_OR, Metric.CONFIDENCE)
    assert v.label is M.BACKDOOR and v.confidence == pytest.approx(0.8)


def test_same_risk_ties_go_to_confidence_then_order():
    assert most_risky({M.BACKDOOR, M.RANSOMWARE}, {M.BACKDOOR: 0.5, M.RANSOMWARE: 0.6}) is M.RANSOMWARE
    assert most_risky({M.BACKDOOR, M.RANSOMWARE}, {M.BACKDOOR: 0.6, M.RANSOMWARE: 0.6}) is M.BACKDOOR


def test_benign_consensus_confidence():
    # MostConfident probmalware is the mean estimate; 0.2 → benign at 0.8
    v = aggregate_model(preds([0] * 8, [0.2] * 8), set(), None, CS.MOST_CONFIDENT, Metric.CONFIDENCE)
    assert v.label is BENIGN and v.confidence == pytest.approx(0.8)


def test_singleton_positive():
    v = aggregate_model(single(M.PUA, 0.95), set(), None, CS.LOGICAL_OR, Metric.CONFIDENCE)
    assert v.label is M.PUA and v.confidence == pytest.approx(0.95)


def test_malware_without_positive_votes_uses_all_classes():
    e = [0.1] * 8
    e[MALWARE_CLASSES.index(M.SPYWARE)] = 0.9
    proba = np.zeros(9)
    proba[MALWARE_CLASSES.index(M.SPYWARE)] = 1.0
    v = aggregate_model(preds([0] * 8, e), set(), None, CS.BOOSTER, Metric.CONFIDENCE, proba=proba)
    assert v.label is M.SPYWARE


def test_learned_consensus_reads_benign_probability():
    proba = np.full(9, 0.0)
    proba[BENIGN_INDEX] = 0.7
    proba[0] = 0.3
    malware, prob = consensus_if_malware(single(M.PUA, 0.9), CS.MULTIPLEXER, proba=proba)
    assert not malware and prob == pytest.approx(0.3)
    with pytest.raises(ValueError):
        consensus_if_malware(single(M.PUA, 0.9), CS.BOOSTER)


def test_from_tuples_and_shape_check():
    t = [PredictionTuple(1, Statistics(0.7, 0.5))] + [PredictionTuple(0, Statistics(0.1, 0.0))] * 7
    p = ComponentPredictions.from_tuples(t)
    assert p.positives() == (M.CRYPTOMINER,)
    assert p.feature_vector()[:4].tolist() == [0.7, 0.5, 0.1, 0.0]
    with pytest.raises(ValueError):
        ComponentPredictions(np.zeros(3), np.zeros(3), np.zeros(3))


def test_aggregator_features_interleave():
    X = aggregator_features(np.array([[1.0] * 8]), np.array([[2.0] * 8]))
    assert X.shape == (1, 16)
    assert X[0, 0::2].tolist() == [1.0] * 8 and X[0, 1::2].tolist() == [2.0] * 8


def test_multiplexer_targets_equal_booster_with_perfect_specialists():
    truths = [M.PUA, BENIGN, M.RANSOMWARE]
    own = np.array([1, 0, 1])
    assert learned_targets(CS.BOOSTER, truths, own).tolist() == \
        learned_targets(CS.MULTIPLEXER, truths, own).tolist()
    own_miss = np.array([0, 0, 1])
    assert learned_targets(CS.MULTIPLEXER, truths, own_miss)[0] == BENIGN_INDEX


def test_benign_balanced_weights():
    y = np.array([BENIGN_INDEX, 0, 1, 2])
    w = benign_balanced_weights(y)
    assert w[0] == pytest.approx(w[1:].sum())
    assert w.mean() == pytest.approx(1.0)


def _toy_training(n=60, seed=0):
    rng = np.random.default_rng(seed)
    truths, votes, est = [], [], []
    for i in range(n):
        lab = BENIGN if i % 3 == 0 else MALWARE_CLASSES[i % 8]
        e = rng.uniform(0.0, 0.3, size=8)
        r = np.zeros(8, dtype=int)
        if lab is not BENIGN:
            e[MALWARE_CLASSES.index(lab)] = rng.uniform(0.7, 1.0)
            r[MALWARE_CLASSES.index(lab)] = 1
        truths.append(lab)
        votes.append(r)
        est.append(e)
    return np.array(votes), np.array(est), truths


def test_multiplexer_relays_specialists_on_training_data():
    votes, est, truths = _toy_training()
    agg = train_learned_aggregator(CS.MULTIPLEXER, Component.OS, votes, est, est, truths, seed=1)
    proba = agg.predict_proba(aggregator_features(est, est))
    relay = (proba[:, BENIGN_INDEX] < 0.5) == (votes.sum(axis=1) > 0)
    assert relay.mean() >= 0.95


def test_learned_aggregator_round_trip():
    votes, est, truths = _toy_training(30)
    agg = train_learned_aggregator(CS.BOOSTER, Component.NETWORK, votes, est, est, truths, seed=2)
    back = LearnedAggregator.from_dict(agg.to_dict())
    X = aggregator_features(est, est)
    assert np.array_equal(agg.predict_proba(X), back.predict_proba(X))
    with pytest.raises(ValueError):
        agg.predict_proba(np.zeros((1, 8)))
    with pytest.raises(ValueError):
        train_learned_aggregator(CS.MAJORITY, Component.OS, votes, est, est, truths)
