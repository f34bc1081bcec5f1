"""End-to-end flow: specialists per (component, class), knowledge, learned
aggregators, and two-level aggregation into a final verdict."""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .component_aggregator import FinalVerdict, aggregate_components
from .domain import (
    BENIGN,
    COMPONENTS,
    LEARNED_STRATEGIES,
    MALWARE_CLASSES,
    N_CLASSES,
    CAStrategy,
    Component,
    ConfidentSetMetric,
    ConsensusStrategy,
    EnsembleConfig,
    MalwareClass,
    Program,
    requirement_of,
)
from .knowledge import (
    PriorKnowledgeTable,
    compute_confidence_windows,
    expert_set,
    f1_score,
    strengths_for_predictions,
    windows_from_dict,
    windows_to_dict,
)
from .model_aggregator import (
    ComponentPredictions,
    ComponentVerdict,
    LearnedAggregator,
    aggregate_model,
    aggregator_features,
    train_learned_aggregator,
)
from .predictor import (
    SchemaMismatchError,
    SpecializedPredictor,
    TrainingError,
    out_of_fold_outputs,
    predict_batch,
    schema_hash,
    train_specialized,
)

log = logging.getLogger(__name__)

ENSEMBLE_FORMAT = "sundew-ensemble"
ENSEMBLE_VERSION = 1
THREADS_ENV = "SUNDEW_THREADS"

PredictorKey = Tuple[Component, MalwareClass]


def worker_count() -> int:
    """Parallelism cap from the environment; defaults to one worker."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        log.warning("ignoring non-integer %s=%r", THREADS_ENV, raw)
        return 1
    return max(1, min(n, os.cpu_count() or 1))


def predictor_seed(base: int, c: Component, j: MalwareClass) -> int:
    return base * 100 + COMPONENTS.index(c) * N_CLASSES + MALWARE_CLASSES.index(j)


@dataclass(frozen=True)
class ComponentOutputs:
    """Outputs of all specialists of one component on a batch: ``(n_programs, n_classes)``."""

    labels: np.ndarray
    probability_estimate: np.ndarray
    malicious_row_percentage: np.ndarray

    def __len__(self) -> int:
        return self.labels.shape[0]

    def row(self, i: int) -> ComponentPredictions:
        return ComponentPredictions(
            self.labels[i], self.probability_estimate[i], self.malicious_row_percentage[i]
        )

    def features(self) -> np.ndarray:
        return aggregator_features(self.probability_estimate, self.malicious_row_percentage)


BatchOutputs = Dict[Component, ComponentOutputs]


def _train_one(args):
    train, validate, c, j, cfg = args
    seed = predictor_seed(cfg.seed, c, j)
    try:
        p = train_specialized(
            train, validate, c, j, requirement_of(j, cfg.risks), cfg.predictor, seed=seed
        )
    except (TrainingError, ValueError) as exc:
        raise TrainingError(f"predictor ({c.value}, {j.value}) failed: {exc}") from exc
    return p, out_of_fold_outputs(p, train, cfg.predictor.stacking_folds, cfg.predictor, seed)


def train_predictors(
    train: Sequence[Program],
    validate: Sequence[Program],
    cfg: EnsembleConfig,
    workers: Optional[int] = None,
) -> Tuple[Dict[PredictorKey, SpecializedPredictor], BatchOutputs]:
    """Train all 24 specialists.

    Also returns their outputs on the training programs, out-of-fold where a
    specialist was fit on the program (see ``PredictorParams.stacking_folds``).
    """
    workers = worker_count() if workers is None else workers
    keys = [(c, j) for c in COMPONENTS for j in MALWARE_CLASSES]
    jobs = [(list(train), list(validate), c, j, cfg) for c, j in keys]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_one, jobs))
    else:
        results = []
        for c, j in keys:
            log.info("training predictor (%s, %s)", c.value, j.value)
            results.append(_train_one((train, validate, c, j, cfg)))
    predictors = {k: r[0] for k, r in zip(keys, results)}
    train_out = {}
    for c in COMPONENTS:
        cols = [results[keys.index((c, j))][1] for j in MALWARE_CLASSES]
        train_out[c] = ComponentOutputs(
            np.stack([b.labels for b in cols], axis=1),
            np.stack([b.probability_estimate for b in cols], axis=1),
            np.stack([b.malicious_row_percentage for b in cols], axis=1),
        )
    return predictors, train_out


def component_outputs(
    predictors: Dict[PredictorKey, SpecializedPredictor],
    programs: Sequence[Program],
) -> BatchOutputs:
    out = {}
    for c in COMPONENTS:
        mats = [p.data[c] for p in programs]
        cols = [predict_batch(predictors[(c, j)], mats) for j in MALWARE_CLASSES]
        out[c] = ComponentOutputs(
            np.stack([b.labels for b in cols], axis=1),
            np.stack([b.probability_estimate for b in cols], axis=1),
            np.stack([b.malicious_row_percentage for b in cols], axis=1),
        )
    return out


def validation_f1_table(
    outputs: BatchOutputs, programs: Sequence[Program]
) -> PriorKnowledgeTable:
    """Per-predictor F1 on its own class vs benign, from cached outputs."""
    labels = [p.true_class for p in programs]
    table = {}
    for c in COMPONENTS:
        table[c] = {}
        for ji, j in enumerate(MALWARE_CLASSES):
            mask = np.array([lab is j or lab is BENIGN for lab in labels])
            truth = np.array([lab is j for lab in labels])[mask]
            table[c][j] = f1_score(outputs[c].labels[mask, ji], truth) if mask.any() else 0.0
    return PriorKnowledgeTable(table)


def _concat(a: ComponentOutputs, b: ComponentOutputs) -> ComponentOutputs:
    return ComponentOutputs(
        np.concatenate([a.labels, b.labels]),
        np.concatenate([a.probability_estimate, b.probability_estimate]),
        np.concatenate([a.malicious_row_percentage, b.malicious_row_percentage]),
    )


@dataclass
class Ensemble:
    config: EnsembleConfig
    predictors: Dict[PredictorKey, SpecializedPredictor]
    prior: PriorKnowledgeTable
    windows: Dict[Component, Dict[MalwareClass, object]]
    learned: Dict[Tuple[Component, ConsensusStrategy], LearnedAggregator]
    schema: Dict[Component, Tuple[str, ...]]

    # -- inference ---------------------------------------------------------------

    def check_schema(self, programs: Sequence[Program]) -> None:
        for p in programs:
            for c in COMPONENTS:
                if p.data[c].columns != self.schema[c]:
                    raise SchemaMismatchError(
                        f"program {p.id}: {c.value} columns do not match the trained schema"
                    )

    def outputs(self, programs: Sequence[Program]) -> BatchOutputs:
        self.check_schema(programs)
        return component_outputs(self.predictors, programs)

    def model_verdicts(
        self,
        outputs: BatchOutputs,
        component: Component,
        strategy: Optional[ConsensusStrategy] = None,
        metric: Optional[ConfidentSetMetric] = None,
    ) -> List[ComponentVerdict]:
        cfg = self.config
        strategy = strategy or cfg.consensus_strategy[component]
        metric = metric or cfg.confident_set_metric[component]
        out = outputs[component]
        learned = None
        proba = None
        if strategy in LEARNED_STRATEGIES:
            learned = self.learned[(component, strategy)]
            proba = learned.predict_proba(out.features())
        experts = expert_set(self.prior, component, cfg.eta)
        windows = self.windows[component]
        return [
            aggregate_model(
                out.row(i), experts, windows, strategy, metric, learned, cfg.risks,
                cfg.majority_tie_malware, None if proba is None else proba[i],
            )
            for i in range(len(out))
        ]

    def final_verdicts(
        self,
        verdicts: Dict[Component, List[ComponentVerdict]],
        loads: Sequence[int],
        strategy: Optional[CAStrategy] = None,
    ) -> List[FinalVerdict]:
        cfg = self.config
        strategy = strategy or cfg.ca_strategy
        result = []
        for i, load in enumerate(loads):
            per = {c: verdicts[c][i] for c in COMPONENTS}
            strengths = strengths_for_predictions(self.prior, {c: v.label for c, v in per.items()})
            result.append(aggregate_components(per, strengths, load, strategy, cfg.tau, cfg.risks))
        return result

    def detect(
        self, programs: Sequence[Program], load: Optional[int] = None
    ) -> List[FinalVerdict]:
        """Final verdict per program. ``load`` overrides each program's recorded load."""
        outputs = self.outputs(programs)
        verdicts = {c: self.model_verdicts(outputs, c) for c in COMPONENTS}
        loads = [p.load_at_collection if load is None else load for p in programs]
        return self.final_verdicts(verdicts, loads)

    # -- persistence -------------------------------------------------------------

    def save(self, out_dir) -> Path:
        root = Path(out_dir)
        (root / "predictors").mkdir(parents=True, exist_ok=True)
        (root / "aggregators").mkdir(parents=True, exist_ok=True)
        files = {"predictors": {}, "aggregators": {}}
        for (c, j), p in sorted(self.predictors.items(), key=lambda kv: _key_order(kv[0])):
            name = f"predictors/{c.value}_{j.value}.json"
            _write_json(root / name, p.to_dict())
            files["predictors"][f"{c.value}/{j.value}"] = name
        for (c, kind), agg in sorted(
            self.learned.items(), key=lambda kv: (COMPONENTS.index(kv[0][0]), kv[0][1].value)
        ):
            name = f"aggregators/{c.value}_{kind.value}.json"
            _write_json(root / name, agg.to_dict())
            files["aggregators"][f"{c.value}/{kind.value}"] = name
        _write_json(root / "knowledge.json", {
            "prior_f1": self.prior.to_dict(),
            "windows": windows_to_dict(self.windows),
        })
        manifest = {
            "format": ENSEMBLE_FORMAT,
            "version": ENSEMBLE_VERSION,
            "config": self.config.to_dict(),
            "schema": {
                c.value: {"columns": list(self.schema[c]), "hash": schema_hash(c, self.schema[c])}
                for c in COMPONENTS
            },
            "files": files,
        }
        _write_json(root / "manifest.json", manifest)
        return root

    @classmethod
    def load(cls, path) -> "Ensemble":
        root = Path(path)
        manifest_path = root / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no ensemble manifest in {root}")
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("format") != ENSEMBLE_FORMAT or manifest.get("version") != ENSEMBLE_VERSION:
            raise ValueError("not a supported ensemble document")
        cfg = EnsembleConfig.from_dict(manifest["config"])
        schema = {}
        for c in COMPONENTS:
            entry = manifest["schema"][c.value]
            cols = tuple(entry["columns"])
            if schema_hash(c, cols) != entry["hash"]:
                raise SchemaMismatchError(f"{c.value} schema hash does not match its columns")
            schema[c] = cols
        predictors = {}
        for key, name in manifest["files"]["predictors"].items():
            c, j = key.split("/")
            p = SpecializedPredictor.from_dict(json.loads((root / name).read_text()))
            if p.row_classifier.schema_hash != manifest["schema"][c]["hash"]:
                raise SchemaMismatchError(f"predictor {key} was trained on a different schema")
            predictors[(Component(c), MalwareClass(j))] = p
        learned = {}
        for key, name in manifest["files"]["aggregators"].items():
            c, kind = key.split("/")
            learned[(Component(c), ConsensusStrategy(kind))] = LearnedAggregator.from_dict(
                json.loads((root / name).read_text())
            )
        knowledge = json.loads((root / "knowledge.json").read_text())
        return cls(
            config=cfg,
            predictors=predictors,
            prior=PriorKnowledgeTable.from_dict(knowledge["prior_f1"]),
            windows=windows_from_dict(knowledge["windows"]),
            learned=learned,
            schema=schema,
        )


def _key_order(key: PredictorKey):
    return COMPONENTS.index(key[0]), MALWARE_CLASSES.index(key[1])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def train_ensemble(
    train: Sequence[Program],
    validate: Sequence[Program],
    cfg: Optional[EnsembleConfig] = None,
    workers: Optional[int] = None,
) -> Ensemble:
    """Train every specialist, derive knowledge from validation, fit learned aggregators.

    Learned aggregators are fit on specialist outputs over train and validate
    programs together (out-of-fold on the training programs each specialist was
    fit on); both kinds are fit for every component so any consensus
    strategy can be selected later without retraining.
    """
    cfg = cfg or EnsembleConfig()
    train, validate = list(train), list(validate)
    if not train or not validate:
        raise TrainingError("train and validate splits must be nonempty")
    schema = {c: train[0].data[c].columns for c in COMPONENTS}
    predictors, train_out = train_predictors(train, validate, cfg, workers)

    val_out = component_outputs(predictors, validate)
    prior = validation_f1_table(val_out, validate)
    windows = compute_confidence_windows(
        predictors, validate, cfg.gamma,
        estimates={c: val_out[c].probability_estimate for c in COMPONENTS},
    )

    labels = [p.true_class for p in train] + [p.true_class for p in validate]
    learned = {}
    for ci, c in enumerate(COMPONENTS):
        both = _concat(train_out[c], val_out[c])
        for kind in LEARNED_STRATEGIES:
            learned[(c, kind)] = train_learned_aggregator(
                kind, c, both.labels, both.probability_estimate,
                both.malicious_row_percentage, labels, cfg.predictor,
                seed=cfg.seed * 100 + 50 + ci,
            )
    return Ensemble(cfg, predictors, prior, windows, learned, schema)
