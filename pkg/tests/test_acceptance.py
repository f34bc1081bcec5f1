"""End-to-end acceptance checks. Each test prints one PASS/FAIL line."""
import json
import time

import numpy as np
import pytest

from sundew import cli
from sundew.component_aggregator import max_probability_vote
from sundew.datagen import GeneratorSpec, generate_dataset, temporal_split
from sundew.domain import COMPONENTS, MALWARE_CLASSES, Component, ConsensusStrategy, EnsembleConfig
from sundew.ensemble import train_ensemble
from sundew.eval import Mode, ma_method_name, run_experiment
from sundew.model_aggregator import ComponentPredictions, consensus_if_malware
from sundew.predictor import threshold_label

import test_properties

SWEEP = [0, 10, 20, 30, 40, 50]


@pytest.fixture
def report_line(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok
    return emit


@pytest.fixture(scope="module")
def pipeline():
    spec = GeneratorSpec(programs_per_class=200, seed=42)
    train, validate, test = temporal_split(generate_dataset(spec))
    t0 = time.perf_counter()
    ens = train_ensemble(train.programs, validate.programs, EnsembleConfig(seed=42))
    train_s = time.perf_counter() - t0
    t0 = time.perf_counter()
    rep = run_experiment(ens, test, (Mode.BINARY, Mode.MULTI), SWEEP)
    return spec, ens, rep, train_s, time.perf_counter() - t0


def test_worked_examples(report_line):
    votes = np.array([1, 1, 0, 1, 0, 0, 0, 1])
    prob1 = np.array([0.47, 0.38, 0.33, 0.73, 0.33, 0.34, 0.19, 0.49])
    preds = ComponentPredictions(votes, prob1, prob1)
    mc = consensus_if_malware(preds, ConsensusStrategy.MOST_CONFIDENT)[0]
    lor = consensus_if_malware(preds, ConsensusStrategy.LOGICAL_OR)[0]
    mp = max_probability_vote({Component.NETWORK: 0.73, Component.OS: 0.58, Component.HARDWARE: 0.20})
    ok = (mc, lor, mp) == (False, True, False)
    assert report_line(1, ok, f"MostConfident={mc} LogicalOr={lor} max-probability={mp}")


def test_row_threshold(report_line):
    got = (threshold_label(0.45, 0.40), threshold_label(0.39, 0.40),
           threshold_label(0.30, 0.30), threshold_label(0.2999, 0.30))
    ok = got == (1, 0, 1, 0)
    assert report_line(2, ok, f"labels={got}")


def test_specialist_quality(pipeline, report_line):
    spec, ens, _, train_s, _ = pipeline
    strong = [(c, j) for c in COMPONENTS for j in MALWARE_CLASSES if spec.signal_strength[c][j] >= 0.8]
    low = {f"{c.value}/{j.value}": round(ens.prior[(c, j)], 3) for c, j in strong if ens.prior[(c, j)] < 0.95}
    ok = bool(strong) and not low and train_s < 600
    assert report_line(3, ok, f"{len(strong)} strong predictors, below 0.95: {low or 'none'}, train {train_s:.0f}s")


def test_aggregation_loss(pipeline, report_line):
    _, ens, rep, _, _ = pipeline
    ok = True
    parts = []
    for c in COMPONENTS:
        m = ens.config.confident_set_metric[c]
        b = rep.loss(ma_method_name(c, ConsensusStrategy.BOOSTER, m))
        x = rep.loss(ma_method_name(c, ConsensusStrategy.MULTIPLEXER, m))
        ok &= x <= 2.0 and b <= 2.0 and b <= x + 1.0
        parts.append(f"{c.value} booster={b:.2f} mux={x:.2f}")
    assert report_line(4, ok, "; ".join(parts))


def test_ensemble_boost(pipeline, report_line):
    _, _, rep, _, eval_s = pipeline
    comp = {c.value: rep.macro(f"specialist:{c.value}")[0] for c in COMPONENTS}
    ens_f1 = rep.sweep_curve("ensemble")[0]
    ok = ens_f1 >= max(comp.values()) - 0.02 and ens_f1 >= min(comp.values()) + 0.05
    detail = ", ".join(f"{k}={v:.4f}" for k, v in comp.items())
    assert report_line(5, ok, f"ensemble={ens_f1:.4f} vs {detail}")


def test_resilience(pipeline, report_line):
    _, _, rep, _, eval_s = pipeline
    os_curve = rep.sweep_curve("specialist:OS")
    net = rep.sweep_curve("specialist:Network")
    hw = rep.sweep_curve("specialist:Hardware")
    ens = rep.sweep_curve("ensemble")
    spread = max(os_curve.values()) - min(os_curve.values())
    ok = (spread <= 0.03 and net[50] <= net[0] and hw[50] <= hw[0]
          and abs(ens[50] - os_curve[50]) <= 0.05 and eval_s < 900)
    assert report_line(6, ok, f"OS spread={spread:.4f} net {net[0]:.3f}->{net[50]:.3f} "
                              f"hw {hw[0]:.3f}->{hw[50]:.3f} ensemble@50={ens[50]:.3f} OS@50={os_curve[50]:.3f}")


def test_property_suites(report_line):
    suites = [getattr(test_properties, n) for n in dir(test_properties) if n.startswith("test_")]
    t0 = time.perf_counter()
    failed = []
    for fn in suites:
        try:
            fn()
        except Exception as exc:  # report every suite, then fail
            failed.append(f"{fn.__name__}: {type(exc).__name__}")
    elapsed = time.perf_counter() - t0
    ok = not failed and len(suites) >= 7 and elapsed < 120
    assert report_line(7, ok, f"{len(suites)} suites x 1000 cases in {elapsed:.0f}s, failed: {failed or 'none'}")


def _train_and_eval(root, spec_path):
    data, model, out = root / "data", root / "model", root / "reports"
    assert cli.main(["gen", "--spec", str(spec_path), "--out", str(data)]) == 0
    assert cli.main(["train", "--data", str(data), "--out", str(model), "--seed", "11"]) == 0
    assert cli.main(["eval", "--model", str(model), "--data", str(data), "--out", str(out),
                     "--sweep", "0,50"]) == 0
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


def test_determinism(tmp_path, report_line):
    spec = GeneratorSpec(programs_per_class=40, seed=11)
    for c in COMPONENTS:
        spec.rows_per_program[c] = (20, 40)
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(spec.to_dict()))
    a = _train_and_eval(tmp_path / "run1", spec_path)
    b = _train_and_eval(tmp_path / "run2", spec_path)
    ok = bool(a) and a == b
    assert report_line(8, ok, f"{len(a)} report files, identical={a == b}")
