"""Core vocabulary: malware classes, risk levels, components, programs, predictions, config."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum, IntEnum
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np


class MalwareClass(str, Enum):
    CRYPTOMINER = "Cryptominer"
    BANKER = "Banker"
    SPYWARE = "Spyware"
    BACKDOOR = "Backdoor"
    RANSOMWARE = "Ransomware"
    PUA = "PUA"
    DOWNLOADER = "Downloader"
    DECEPTOR = "Deceptor"

    def __str__(self) -> str:
        return self.value


MALWARE_CLASSES: Tuple[MalwareClass, ...] = tuple(MalwareClass)
N_CLASSES = len(MALWARE_CLASSES)


class _BenignLabel:
    """Singleton sentinel for the benign label. Deliberately not a MalwareClass."""

    _instance: Optional["_BenignLabel"] = None
    value = "Benign"

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "BENIGN"

    def __str__(self) -> str:
        return "Benign"

    def __reduce__(self):
        return (_BenignLabel, ())


BENIGN = _BenignLabel()

Label = Union[MalwareClass, _BenignLabel]

# label order used by multi-class models: the 8 classes, then Benign
ALL_LABELS: Tuple[Label, ...] = MALWARE_CLASSES + (BENIGN,)


def parse_label(text: Union[str, Label]) -> Label:
    if isinstance(text, (MalwareClass, _BenignLabel)):
        return text
    if text.strip().lower() == "benign":
        return BENIGN
    for cls in MALWARE_CLASSES:
        if cls.value.lower() == text.strip().lower():
            return cls
    raise ValueError(f"unknown label: {text!r}")


def is_malware(label: Label) -> bool:
    return label is not BENIGN


class RiskLevel(IntEnum):
    LOW = 0
    MEDIUM = 1
    HIGH = 2
    VERY_HIGH = 3


class Requirement(str, Enum):
    HIGH_TPR = "HighTPR"
    LOW_FPR = "LowFPR"


DEFAULT_RISK_TABLE: Dict[MalwareClass, Tuple[RiskLevel, Requirement]] = {
    MalwareClass.CRYPTOMINER: (RiskLevel.HIGH, Requirement.HIGH_TPR),
    MalwareClass.BANKER: (RiskLevel.HIGH, Requirement.HIGH_TPR),
    MalwareClass.SPYWARE: (RiskLevel.MEDIUM, Requirement.LOW_FPR),
    MalwareClass.BACKDOOR: (RiskLevel.VERY_HIGH, Requirement.HIGH_TPR),
    MalwareClass.RANSOMWARE: (RiskLevel.VERY_HIGH, Requirement.HIGH_TPR),
    MalwareClass.PUA: (RiskLevel.LOW, Requirement.LOW_FPR),
    MalwareClass.DOWNLOADER: (RiskLevel.LOW, Requirement.LOW_FPR),
    MalwareClass.DECEPTOR: (RiskLevel.LOW, Requirement.LOW_FPR),
}

RiskTable = Mapping[MalwareClass, Tuple[RiskLevel, Requirement]]


def risk_rank(label: Label, table: Optional[RiskTable] = None) -> int:
    """Integer rank of a label's risk; Benign sits one below Low."""
    if label is BENIGN:
        return -1
    return int((table or DEFAULT_RISK_TABLE)[label][0])


def requirement_of(cls: MalwareClass, table: Optional[RiskTable] = None) -> Requirement:
    return (table or DEFAULT_RISK_TABLE)[cls][1]


def compare_risk(a: Label, b: Label, table: Optional[RiskTable] = None) -> int:
    """Return -1, 0 or 1 as the risk of ``a`` is below, equal to, or above ``b``.

    Classes sharing a risk level compare as a tie; breaking it is up to the caller.
    """
    ra, rb = risk_rank(a, table), risk_rank(b, table)
    return (ra > rb) - (ra < rb)


def label_order(label: Label) -> int:
    """Fixed declaration order, used as the last tie-break."""
    return ALL_LABELS.index(label)


class Component(str, Enum):
    NETWORK = "Network"
    OS = "OS"
    HARDWARE = "Hardware"

    def __str__(self) -> str:
        return self.value


COMPONENTS: Tuple[Component, ...] = tuple(Component)

DEFAULT_FEATURE_COUNTS: Dict[Component, int] = {
    Component.NETWORK: 58,
    Component.OS: 11,
    Component.HARDWARE: 54,
}


@dataclass(frozen=True)
class SnapshotMatrix:
    """Per-program, per-component feature matrix (rows are snapshots)."""

    features: np.ndarray
    columns: Tuple[str, ...]
    component: Component

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError("snapshot matrix must be 2-D")
        if feats.shape[0] < 1:
            raise ValueError("snapshot matrix needs at least one row")
        if feats.shape[1] != len(self.columns):
            raise ValueError(
                f"{feats.shape[1]} feature columns but {len(self.columns)} names"
            )
        if not np.all(np.isfinite(feats)):
            raise ValueError("snapshot matrix contains missing or non-finite values")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "columns", tuple(self.columns))

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class Program:
    id: str
    true_class: Label
    collected_at: float
    load_at_collection: int
    data: Mapping[Component, SnapshotMatrix]

    def __post_init__(self):
        missing = [c for c in COMPONENTS if c not in self.data]
        if missing:
            raise ValueError(f"program {self.id} lacks data for {missing}")
        if self.load_at_collection < 0:
            raise ValueError("load must be nonnegative")


@dataclass(frozen=True)
class Statistics:
    probability_estimate: float
    malicious_row_percentage: float

    def __post_init__(self):
        for name in ("probability_estimate", "malicious_row_percentage"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass(frozen=True)
class PredictionTuple:
    label: int
    stats: Statistics

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError("prediction label must be 0 or 1")


class ConsensusStrategy(str, Enum):
    LOGICAL_OR = "LogicalOr"
    MAJORITY = "Majority"
    MOST_CONFIDENT = "MostConfident"
    BOOSTER = "Booster"
    MULTIPLEXER = "Multiplexer"


LEARNED_STRATEGIES = (ConsensusStrategy.BOOSTER, ConsensusStrategy.MULTIPLEXER)


class ConfidentSetMetric(str, Enum):
    CONFIDENCE = "Confidence"
    PRIOR_KNOWLEDGE = "PriorKnowledge"
    CONFIDENCE_WINDOW = "ConfidenceWindow"


class CAStrategy(str, Enum):
    MOST_CONFIDENT = "MostConfident"
    PRIOR_KNOWN = "PriorKnown"
    MAJORITY = "Majority"


@dataclass
class PredictorParams:
    """Row-classifier hyperparameters and threshold-calibration knobs."""

    rounds: int = 50
    max_depth: int = 3
    learning_rate: float = 0.1
    max_bins: int = 64
    top_n_features: Optional[int] = None
    high_tpr_fpr_cap: float = 0.15
    low_fpr_fpr_cap: float = 0.05
    degenerate_alpha: float = 0.01
    # folds for out-of-fold specialist outputs that train the learned aggregators
    stacking_folds: int = 3
    # the aggregators see 16 features and few hundred programs: shallower trees
    aggregator_max_depth: int = 2
    aggregator_min_child_weight: float = 1.0


def _default_consensus() -> Dict[Component, ConsensusStrategy]:
    return {c: ConsensusStrategy.BOOSTER for c in COMPONENTS}


def _default_metric() -> Dict[Component, ConfidentSetMetric]:
    return {
        Component.NETWORK: ConfidentSetMetric.CONFIDENCE,
        Component.OS: ConfidentSetMetric.PRIOR_KNOWLEDGE,
        Component.HARDWARE: ConfidentSetMetric.CONFIDENCE_WINDOW,
    }


@dataclass
class EnsembleConfig:
    """Every knob that determines a run. Serializes to a JSON-compatible tree."""

    consensus_strategy: Dict[Component, ConsensusStrategy] = field(
        default_factory=_default_consensus
    )
    confident_set_metric: Dict[Component, ConfidentSetMetric] = field(
        default_factory=_default_metric
    )
    ca_strategy: CAStrategy = CAStrategy.PRIOR_KNOWN
    eta: float = 0.85
    tau: int = 10
    gamma: float = 0.05
    seed: int = 42
    risk_table: Optional[Dict[MalwareClass, Tuple[RiskLevel, Requirement]]] = None
    majority_tie_malware: bool = True
    predictor: PredictorParams = field(default_factory=PredictorParams)
    sweep_loads: Tuple[int, ...] = (0, 10, 20, 30, 40, 50)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta={self.eta} outside [0, 1]")
        if self.tau < 0 or int(self.tau) != self.tau:
            raise ValueError(f"tau={self.tau} must be a nonnegative integer")
        if self.gamma < 0:
            raise ValueError(f"gamma={self.gamma} must be >= 0")
        for c in COMPONENTS:
            if c not in self.consensus_strategy or c not in self.confident_set_metric:
                raise ValueError(f"strategy missing for component {c}")
        if any(load < 0 for load in self.sweep_loads):
            raise ValueError("sweep loads must be nonnegative")

    @property
    def risks(self) -> RiskTable:
        return self.risk_table or DEFAULT_RISK_TABLE

    def to_dict(self) -> dict:
        return {
            "consensus_strategy": {c.value: s.value for c, s in self.consensus_strategy.items()},
            "confident_set_metric": {c.value: m.value for c, m in self.confident_set_metric.items()},
            "ca_strategy": self.ca_strategy.value,
            "eta": self.eta,
            "tau": self.tau,
            "gamma": self.gamma,
            "seed": self.seed,
            "risk_table": None
            if self.risk_table is None
            else {k.value: [v[0].name, v[1].value] for k, v in self.risk_table.items()},
            "majority_tie_malware": self.majority_tie_malware,
            "predictor": asdict(self.predictor),
            "sweep_loads": list(self.sweep_loads),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EnsembleConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        if "consensus_strategy" in d:
            # partial maps override the defaults component by component
            kw["consensus_strategy"] = _default_consensus()
            kw["consensus_strategy"].update(
                {Component(c): ConsensusStrategy(s) for c, s in d["consensus_strategy"].items()}
            )
        if "confident_set_metric" in d:
            kw["confident_set_metric"] = _default_metric()
            kw["confident_set_metric"].update(
                {Component(c): ConfidentSetMetric(m) for c, m in d["confident_set_metric"].items()}
            )
        if "ca_strategy" in d:
            kw["ca_strategy"] = CAStrategy(d["ca_strategy"])
        for key in ("eta", "gamma"):
            if key in d:
                kw[key] = float(d[key])
        for key in ("tau", "seed"):
            if key in d:
                kw[key] = int(d[key])
        if d.get("risk_table") is not None:
            kw["risk_table"] = {
                parse_label(k): (RiskLevel[v[0]], Requirement(v[1]))
                for k, v in d["risk_table"].items()
            }
        if "majority_tie_malware" in d:
            kw["majority_tie_malware"] = bool(d["majority_tie_malware"])
        if "predictor" in d:
            kw["predictor"] = PredictorParams(**d["predictor"])
        if "sweep_loads" in d:
            kw["sweep_loads"] = tuple(int(x) for x in d["sweep_loads"])
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EnsembleConfig":
        return cls.from_dict(json.loads(text))
