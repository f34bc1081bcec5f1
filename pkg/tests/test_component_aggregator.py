import pytest

from sundew.component_aggregator import (
    CONSENSUS_SOURCE,
    aggregate_components,
    max_probability_vote,
    measure_load,
)
from sundew.domain import BENIGN, CAStrategy as CA, Component, MalwareClass as M
from sundew.model_aggregator import ComponentVerdict as V

N, O, H = Component.NETWORK, Component.OS, Component.HARDWARE


def test_max_probability_selection_table_b():
    # per-component malware probabilities; the most certain view says benign at 0.80
    assert max_probability_vote({N: 0.73, O: 0.58, H: 0.20}) is False
    assert max_probability_vote({N: 0.93, O: 0.58, H: 0.20}) is True


def test_prior_known_tie_goes_to_higher_risk():
    verdicts = {N: V(M.BACKDOOR, 0.9), O: V(M.DECEPTOR, 0.9), H: V(BENIGN, 0.9)}
    strengths = {N: 0.95, O: 0.95, H: 0.5}
    out = aggregate_components(verdicts, strengths, load=0, strategy=CA.PRIOR_KNOWN)
    assert out.label is M.BACKDOOR and out.source is N


def test_high_load_returns_os_verdict():
    verdicts = {N: V(M.BACKDOOR, 0.99), O: V(BENIGN, 0.61), H: V(M.RANSOMWARE, 0.99)}
    strengths = {N: 1.0, O: 0.1, H: 1.0}
    for strategy in CA:
        out = aggregate_components(verdicts, strengths, load=50, strategy=strategy, tau=10)
        assert (out.label, out.confidence, out.source) == (BENIGN, 0.61, O)
    assert aggregate_components(verdicts, strengths, load=10, tau=10).source is O
    assert aggregate_components(verdicts, strengths, load=9, tau=10).source is not O


def test_most_confident_picks_highest_confidence():
    verdicts = {N: V(M.PUA, 0.7), O: V(BENIGN, 0.9), H: V(M.BANKER, 0.8)}
    out = aggregate_components(verdicts, {c: 0.5 for c in verdicts}, 0, CA.MOST_CONFIDENT)
    assert out.label is BENIGN and out.source is O


def test_majority_uses_shared_label():
    verdicts = {N: V(M.PUA, 0.7), O: V(M.PUA, 0.6), H: V(M.BANKER, 0.99)}
    out = aggregate_components(verdicts, {c: 0.5 for c in verdicts}, 0, CA.MAJORITY)
    assert out.label is M.PUA and out.confidence == 0.7 and out.source_name == CONSENSUS_SOURCE


def test_majority_without_agreement_falls_back_to_most_confident():
    verdicts = {N: V(M.PUA, 0.7), O: V(BENIGN, 0.6), H: V(M.BANKER, 0.99)}
    out = aggregate_components(verdicts, {c: 0.5 for c in verdicts}, 0, CA.MAJORITY)
    assert out.label is M.BANKER and out.source is H


def test_missing_component_and_negative_load():
    verdicts = {N: V(M.PUA, 0.7), O: V(BENIGN, 0.6)}
    with pytest.raises(ValueError):
        aggregate_components(verdicts, {N: 1, O: 1, H: 1}, 0)
    full = dict(verdicts, **{H: V(BENIGN, 0.5)})
    with pytest.raises(ValueError):
        aggregate_components(full, {N: 1, O: 1, H: 1}, -1)


def test_measure_load():
    assert measure_load(7) == 7
    assert measure_load() >= 1
    with pytest.raises(ValueError):
        measure_load(-3)
