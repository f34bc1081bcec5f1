"""Scoring, aggregation loss, experiment harness and load sweep."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .datagen import Dataset, inject_load_noise
from .domain import (
    BENIGN,
    COMPONENTS,
    MALWARE_CLASSES,
    CAStrategy,
    Component,
    ConfidentSetMetric,
    ConsensusStrategy,
    EnsembleConfig,
    Label,
    MalwareClass,
    RiskTable,
    risk_rank,
)
from .ensemble import BatchOutputs, Ensemble

log = logging.getLogger(__name__)


class Mode(str, Enum):
    BINARY = "binary"
    MULTI = "multi"


def risk_correct(predicted: Label, truth: Label, risks: Optional[RiskTable] = None) -> bool:
    if truth is BENIGN:
        return predicted is BENIGN
    if predicted is BENIGN:
        return False
    return risk_rank(predicted, risks) >= risk_rank(truth, risks)


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    return 2 * tp / (2 * tp + fp + fn) if tp else 0.0


def fpr_from_counts(fp: int, tn: int) -> float:
    return fp / (fp + tn) if fp + tn else 0.0


def aggregation_loss(baseline_f1: float, method_f1: float) -> float:
    """Percentage points lost by a method against its baseline; negative means a gain."""
    return (baseline_f1 - method_f1) * 100.0


@dataclass(frozen=True)
class Scores:
    f1: Dict[MalwareClass, float]
    fpr: Dict[MalwareClass, float]

    @property
    def macro_f1(self) -> float:
        return float(np.mean(list(self.f1.values()))) if self.f1 else float("nan")

    @property
    def macro_fpr(self) -> float:
        return float(np.mean(list(self.fpr.values()))) if self.fpr else float("nan")


def _class_counts(hit, flagged, truths, j):
    """Counts for class ``j`` over class-j and benign programs."""
    tp = fp = fn = tn = 0
    for h, f, t in zip(hit, flagged, truths):
        if t is j:
            if h:
                tp += 1
            else:
                fn += 1
        elif t is BENIGN:
            if f:
                fp += 1
            else:
                tn += 1
    return tp, fp, fn, tn


def score_predictions(
    predicted: Sequence[Label],
    truths: Sequence[Label],
    mode: Mode = Mode.BINARY,
    risks: Optional[RiskTable] = None,
) -> Scores:
    """Per-class F1 and FPR of final labels.

    Class ``j`` is scored on class-j and benign programs. Binary mode counts any
    malware label on a class-j program as a hit; multi mode requires the label to
    be risk-correct. Classes with no programs are left out of the macro means.
    """
    if len(predicted) != len(truths):
        raise ValueError("predictions and truths are not aligned")
    if not truths:
        raise ValueError("nothing to score")
    flagged = [p is not BENIGN for p in predicted]
    if mode is Mode.BINARY:
        hit = flagged
    else:
        hit = [risk_correct(p, t, risks) for p, t in zip(predicted, truths)]
    f1, fpr = {}, {}
    for j in MALWARE_CLASSES:
        if not any(t is j for t in truths):
            continue
        tp, fp, fn, tn = _class_counts(hit, flagged, truths, j)
        f1[j] = f1_from_counts(tp, fp, fn)
        fpr[j] = fpr_from_counts(fp, tn)
    return Scores(f1, fpr)


def score_binary(predicted: Sequence[Label], truths: Sequence[Label]) -> Scores:
    return score_predictions(predicted, truths, Mode.BINARY)


def specialist_scores(labels: np.ndarray, truths: Sequence[Label]) -> Scores:
    """Each specialist judged on its own class: ``labels`` is ``(n_programs, n_classes)``."""
    f1, fpr = {}, {}
    for ji, j in enumerate(MALWARE_CLASSES):
        if not any(t is j for t in truths):
            continue
        vote = labels[:, ji] == 1
        tp, fp, fn, tn = _class_counts(vote, vote, truths, j)
        f1[j] = f1_from_counts(tp, fp, fn)
        fpr[j] = fpr_from_counts(fp, tn)
    return Scores(f1, fpr)


def best_specialist_scores(per_component: Dict[Component, Scores]) -> Scores:
    """Per class, the best component's specialist."""
    f1, fpr = {}, {}
    for j in MALWARE_CLASSES:
        cands = [(s.f1[j], -s.fpr[j], c) for c, s in per_component.items() if j in s.f1]
        if not cands:
            continue
        _, neg_fpr, _ = max(cands, key=lambda t: (t[0], t[1]))
        f1[j] = max(t[0] for t in cands)
        fpr[j] = -neg_fpr
    return Scores(f1, fpr)


def config_hash(cfg: EnsembleConfig) -> str:
    return hashlib.sha256(cfg.to_json().encode()).hexdigest()[:12]


@dataclass
class EvalReport:
    config_hash: str
    seed: int
    modes: Tuple[Mode, ...]
    scores: List[dict] = field(default_factory=list)
    losses: List[dict] = field(default_factory=list)
    sweep: List[dict] = field(default_factory=list)

    SCORE_COLUMNS = ("method", "level", "component", "mode", "class", "f1", "fpr")
    LOSS_COLUMNS = ("level", "component", "method", "mode", "baseline_f1", "method_f1", "loss_pp")
    SWEEP_COLUMNS = ("load", "subject", "mode", "macro_f1", "macro_fpr")

    def add_scores(self, method: str, level: str, component: str, mode: Mode, s: Scores):
        for j in MALWARE_CLASSES:
            if j in s.f1:
                self.scores.append(dict(method=method, level=level, component=component,
                                        mode=mode.value, **{"class": j.value},
                                        f1=s.f1[j], fpr=s.fpr[j]))
        self.scores.append(dict(method=method, level=level, component=component,
                                mode=mode.value, **{"class": "macro"},
                                f1=s.macro_f1, fpr=s.macro_fpr))

    def macro(self, method: str, mode: Mode = Mode.BINARY) -> Tuple[float, float]:
        for r in self.scores:
            if r["method"] == method and r["mode"] == mode.value and r["class"] == "macro":
                return r["f1"], r["fpr"]
        raise KeyError(f"no macro scores for {method} ({mode.value})")

    def loss(self, method: str, mode: Mode = Mode.BINARY) -> float:
        for r in self.losses:
            if r["method"] == method and r["mode"] == mode.value:
                return r["loss_pp"]
        raise KeyError(f"no loss for {method} ({mode.value})")

    def sweep_curve(self, subject: str, mode: Mode = Mode.BINARY) -> Dict[int, float]:
        return {r["load"]: r["macro_f1"] for r in self.sweep
                if r["subject"] == subject and r["mode"] == mode.value}

    # -- output ------------------------------------------------------------------

    @staticmethod
    def _csv(rows: List[dict], columns: Sequence[str]) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
        return buf.getvalue()

    def tables(self) -> Dict[str, str]:
        return {
            "scores": self._csv(self.scores, self.SCORE_COLUMNS),
            "losses": self._csv(self.losses, self.LOSS_COLUMNS),
            "sweep": self._csv(self.sweep, self.SWEEP_COLUMNS),
        }

    def summary(self) -> str:
        lines = [f"config {self.config_hash}  seed {self.seed}", ""]
        for mode in self.modes:
            lines.append(f"[{mode.value}] macro F1 / FPR")
            for r in self.scores:
                if r["mode"] == mode.value and r["class"] == "macro":
                    lines.append(f"  {r['method']:<42} {r['f1']:.4f}  {r['fpr']:.4f}")
            lines.append("")
        lines.append("aggregation loss (percentage points vs specialists)")
        for r in self.losses:
            lines.append(f"  {r['method']:<42} {r['mode']:<6} {r['loss_pp']:+.2f}")
        if self.sweep:
            lines.append("")
            lines.append("load sweep, macro F1")
            loads = sorted({r["load"] for r in self.sweep})
            for mode in self.modes:
                subjects = []
                for r in self.sweep:
                    if r["mode"] == mode.value and r["subject"] not in subjects:
                        subjects.append(r["subject"])
                lines.append(f"  [{mode.value}] load " + " ".join(f"{v:>7d}" for v in loads))
                for s in subjects:
                    curve = self.sweep_curve(s, mode)
                    lines.append(f"  {s:<14} " + " ".join(f"{curve[v]:7.4f}" for v in loads))
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> Dict[str, Path]:
        root = Path(out_dir)
        root.mkdir(parents=True, exist_ok=True)
        stem = f"report_{self.config_hash}_seed{self.seed}"
        paths = {}
        for name, text in self.tables().items():
            paths[name] = root / f"{stem}_{name}.csv"
            paths[name].write_text(text)
        paths["summary"] = root / f"{stem}_summary.txt"
        paths["summary"].write_text(self.summary())
        return paths


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.6f}"
    return str(v)


def ma_method_name(c: Component, s: ConsensusStrategy, m: ConfidentSetMetric) -> str:
    return f"ma:{c.value}:{s.value}/{m.value}"


def ma_variants(cfg: EnsembleConfig, c: Component) -> List[Tuple[ConsensusStrategy, ConfidentSetMetric]]:
    """Every consensus strategy under the configured metric, and every metric under
    the configured consensus strategy."""
    out = [(s, cfg.confident_set_metric[c]) for s in ConsensusStrategy]
    out += [(cfg.consensus_strategy[c], m) for m in ConfidentSetMetric
            if (cfg.consensus_strategy[c], m) not in out]
    return out


def _component_rows(
    ens: Ensemble, outputs: BatchOutputs, truths, modes, report: EvalReport, risks
):
    cfg = ens.config
    spec = {}
    for c in COMPONENTS:
        spec[c] = specialist_scores(outputs[c].labels, truths)
        for mode in modes:
            report.add_scores(f"specialist:{c.value}", "specialist", c.value, mode, spec[c])
    configured = {}
    for c in COMPONENTS:
        for s, m in ma_variants(cfg, c):
            verdicts = ens.model_verdicts(outputs, c, s, m)
            if s is cfg.consensus_strategy[c] and m is cfg.confident_set_metric[c]:
                configured[c] = verdicts
            labels = [v.label for v in verdicts]
            for mode in modes:
                sc = score_predictions(labels, truths, mode, risks)
                name = ma_method_name(c, s, m)
                report.add_scores(name, "model", c.value, mode, sc)
                report.losses.append(dict(
                    level="model", component=c.value, method=name, mode=mode.value,
                    baseline_f1=spec[c].macro_f1, method_f1=sc.macro_f1,
                    loss_pp=aggregation_loss(spec[c].macro_f1, sc.macro_f1),
                ))
    return spec, configured


def run_experiment(
    ens: Ensemble,
    test: Dataset,
    modes: Sequence[Mode] = (Mode.BINARY, Mode.MULTI),
    sweep_loads: Optional[Sequence[int]] = None,
    noise_seed: Optional[int] = None,
) -> EvalReport:
    """Score specialists, every model-aggregator variant, every component-aggregator
    strategy and the configured ensemble on ``test``; optionally sweep system load."""
    cfg = ens.config
    risks = cfg.risks
    modes = tuple(modes)
    report = EvalReport(config_hash(cfg), cfg.seed, modes)
    programs = list(test.programs)
    truths = [p.true_class for p in programs]
    outputs = ens.outputs(programs)

    spec, configured = _component_rows(ens, outputs, truths, modes, report, risks)
    best = best_specialist_scores(spec)
    loads = [p.load_at_collection for p in programs]
    for strategy in CAStrategy:
        final = ens.final_verdicts(configured, loads, strategy)
        labels = [v.label for v in final]
        names = [f"ca:{strategy.value}"]
        if strategy is cfg.ca_strategy:
            names.append("ensemble")
        for mode in modes:
            sc = score_predictions(labels, truths, mode, risks)
            for name in names:
                report.add_scores(name, "component", "all", mode, sc)
                report.losses.append(dict(
                    level="component", component="all", method=name, mode=mode.value,
                    baseline_f1=best.macro_f1, method_f1=sc.macro_f1,
                    loss_pp=aggregation_loss(best.macro_f1, sc.macro_f1),
                ))

    if sweep_loads:
        report.sweep = load_sweep(ens, test, sweep_loads, modes, noise_seed)
    return report


def load_sweep(
    ens: Ensemble,
    test: Dataset,
    loads: Sequence[int],
    modes: Sequence[Mode] = (Mode.BINARY,),
    noise_seed: Optional[int] = None,
) -> List[dict]:
    """Perturb the test trails at each load and score components and the ensemble.

    Component curves use each component's configured model aggregator; the
    ensemble sees the swept load as the system load.
    """
    if not loads:
        raise ValueError("no load values to sweep")
    cfg = ens.config
    seed = cfg.seed if noise_seed is None else noise_seed
    truths = [p.true_class for p in test.programs]
    rows = []
    for load in sorted(set(int(v) for v in loads)):
        noisy = inject_load_noise(test, load, seed=seed)
        programs = list(noisy.programs)
        outputs = ens.outputs(programs)
        verdicts = {c: ens.model_verdicts(outputs, c) for c in COMPONENTS}
        final = ens.final_verdicts(verdicts, [load] * len(programs))
        subjects = [(c.value, [v.label for v in verdicts[c]]) for c in COMPONENTS]
        subjects.append(("ensemble", [v.label for v in final]))
        for mode in modes:
            for name, labels in subjects:
                sc = score_predictions(labels, truths, mode, cfg.risks)
                rows.append(dict(load=load, subject=name, mode=mode.value,
                                 macro_f1=sc.macro_f1, macro_fpr=sc.macro_fpr))
            for c in COMPONENTS:
                sc = specialist_scores(outputs[c].labels, truths)
                rows.append(dict(load=load, subject=f"specialist:{c.value}", mode=mode.value,
                                 macro_f1=sc.macro_f1, macro_fpr=sc.macro_fpr))
    return rows
