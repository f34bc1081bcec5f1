"""Multi-input malware detection ensemble with risk-aware conflict resolution."""
from .component_aggregator import FinalVerdict, aggregate_components, measure_load
from .datagen import (
    Dataset,
    GeneratorSpec,
    generate_dataset,
    inject_load_noise,
    load_dataset,
    temporal_split,
    write_dataset,
)
from .domain import (
    BENIGN,
    COMPONENTS,
    MALWARE_CLASSES,
    CAStrategy,
    Component,
    ConfidentSetMetric,
    ConsensusStrategy,
    EnsembleConfig,
    MalwareClass,
    Program,
    SnapshotMatrix,
)
from .ensemble import Ensemble, train_ensemble
from .eval import EvalReport, Mode, run_experiment

__version__ = "0.1.0"
