"""Synthetic behavioral trails, CSV persistence, temporal splitting and load noise.

Benign snapshots are unit-normal per feature around a per-program offset. A program
of class ``j`` has, in component ``k``, each row independently malicious with
probability ``rho[k][j]``; malicious rows shift a class-specific block of features by
``delta[k][j] * shift_scale`` standard deviations.
"""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .domain import (
    ALL_LABELS,
    BENIGN,
    COMPONENTS,
    DEFAULT_FEATURE_COUNTS,
    MALWARE_CLASSES,
    Component,
    Label,
    MalwareClass,
    Program,
    SnapshotMatrix,
    parse_label,
)

log = logging.getLogger(__name__)

DATASET_FORMAT = "sundew-dataset"
DATASET_VERSION = 1
META_COLUMNS = ("program_id", "class", "collected_at", "load")


class DatasetError(ValueError):
    pass


class SchemaError(DatasetError):
    pass


class MissingComponentError(DatasetError):
    pass


N, O, H = Component.NETWORK, Component.OS, Component.HARDWARE
C = MalwareClass

# Ordinal shape only: network separates banker/backdoor/deceptor, OS
# ransomware/spyware, hardware ransomware/cryptominer. Weak cells sit well above
# the noise floor; component weakness comes from silent programs instead.
DEFAULT_SIGNAL_STRENGTH: Dict[Component, Dict[MalwareClass, float]] = {
    N: {C.CRYPTOMINER: 0.6, C.BANKER: 0.9, C.SPYWARE: 0.7, C.BACKDOOR: 0.95,
        C.RANSOMWARE: 0.6, C.PUA: 0.7, C.DOWNLOADER: 0.75, C.DECEPTOR: 0.85},
    O: {C.CRYPTOMINER: 0.65, C.BANKER: 0.65, C.SPYWARE: 0.9, C.BACKDOOR: 0.65,
        C.RANSOMWARE: 0.9, C.PUA: 0.7, C.DOWNLOADER: 0.7, C.DECEPTOR: 0.7},
    H: {C.CRYPTOMINER: 0.95, C.BANKER: 0.6, C.SPYWARE: 0.7, C.BACKDOOR: 0.6,
        C.RANSOMWARE: 0.9, C.PUA: 0.7, C.DOWNLOADER: 0.7, C.DECEPTOR: 0.7},
}

DEFAULT_MALICIOUS_ROW_FRACTION: Dict[Component, Dict[MalwareClass, float]] = {
    N: {C.CRYPTOMINER: 0.35, C.BANKER: 0.5, C.SPYWARE: 0.4, C.BACKDOOR: 0.6,
        C.RANSOMWARE: 0.35, C.PUA: 0.45, C.DOWNLOADER: 0.5, C.DECEPTOR: 0.55},
    O: {C.CRYPTOMINER: 0.4, C.BANKER: 0.45, C.SPYWARE: 0.55, C.BACKDOOR: 0.4,
        C.RANSOMWARE: 0.6, C.PUA: 0.4, C.DOWNLOADER: 0.45, C.DECEPTOR: 0.35},
    H: {C.CRYPTOMINER: 0.65, C.BANKER: 0.3, C.SPYWARE: 0.35, C.BACKDOOR: 0.3,
        C.RANSOMWARE: 0.6, C.PUA: 0.4, C.DOWNLOADER: 0.35, C.DECEPTOR: 0.3},
}


# Share of a class's programs whose trail in a component shows nothing malicious.
DEFAULT_SILENT_FRACTION: Dict[Component, Dict[MalwareClass, float]] = {
    c: {j: 0.0 for j in MALWARE_CLASSES} for c in (N, O, H)
}
DEFAULT_SILENT_FRACTION[N][C.SPYWARE] = 0.3
DEFAULT_SILENT_FRACTION[O].update({C.PUA: 0.3, C.DOWNLOADER: 0.2, C.DECEPTOR: 0.3})
DEFAULT_SILENT_FRACTION[H].update(
    {C.SPYWARE: 0.4, C.PUA: 0.3, C.DOWNLOADER: 0.4, C.DECEPTOR: 0.4}
)


def _nested_copy(table):
    return {k: dict(v) for k, v in table.items()}


@dataclass
class GeneratorSpec:
    programs_per_class: int = 200
    benign_programs: Optional[int] = None
    rows_per_program: Dict[Component, Tuple[int, int]] = field(
        default_factory=lambda: {c: (50, 200) for c in COMPONENTS}
    )
    feature_counts: Dict[Component, int] = field(
        default_factory=lambda: dict(DEFAULT_FEATURE_COUNTS)
    )
    signal_strength: Dict[Component, Dict[MalwareClass, float]] = field(
        default_factory=lambda: _nested_copy(DEFAULT_SIGNAL_STRENGTH)
    )
    malicious_row_fraction: Dict[Component, Dict[MalwareClass, float]] = field(
        default_factory=lambda: _nested_copy(DEFAULT_MALICIOUS_ROW_FRACTION)
    )
    silent_fraction: Dict[Component, Dict[MalwareClass, float]] = field(
        default_factory=lambda: _nested_copy(DEFAULT_SILENT_FRACTION)
    )
    signal_feature_count: Dict[Component, int] = field(
        default_factory=lambda: {N: 5, O: 3, H: 5}
    )
    shift_scale: float = 2.0
    program_jitter: float = 0.1
    noise_sigma0: float = 0.5
    seed: int = 42

    def validate(self) -> None:
        if self.programs_per_class < 1:
            raise ValueError("programs_per_class must be positive")
        if self.benign_programs is not None and self.benign_programs < 1:
            raise ValueError("benign_programs must be positive")
        for c in COMPONENTS:
            lo, hi = self.rows_per_program[c]
            if not 1 <= lo <= hi:
                raise ValueError(f"bad row range {lo, hi} for {c}")
            if self.feature_counts[c] < 1:
                raise ValueError(f"feature count for {c} must be positive")
            if not 1 <= self.signal_feature_count[c] <= self.feature_counts[c]:
                raise ValueError(f"signal_feature_count for {c} out of range")
            for j in MALWARE_CLASSES:
                d = self.signal_strength[c][j]
                r = self.malicious_row_fraction[c][j]
                if not 0.0 <= d <= 1.0:
                    raise ValueError(f"signal strength {d} for ({c}, {j}) outside [0, 1]")
                if not 0.0 < r <= 1.0:
                    raise ValueError(f"malicious row fraction {r} for ({c}, {j}) outside (0, 1]")
                q = self.silent_fraction[c][j]
                if not 0.0 <= q <= 1.0:
                    raise ValueError(f"silent fraction {q} for ({c}, {j}) outside [0, 1]")
        if self.shift_scale < 0 or self.program_jitter < 0 or self.noise_sigma0 < 0:
            raise ValueError("scales must be nonnegative")

    @property
    def n_benign(self) -> int:
        return self.programs_per_class if self.benign_programs is None else self.benign_programs

    def to_dict(self) -> dict:
        return {
            "programs_per_class": self.programs_per_class,
            "benign_programs": self.benign_programs,
            "rows_per_program": {c.value: list(v) for c, v in self.rows_per_program.items()},
            "feature_counts": {c.value: v for c, v in self.feature_counts.items()},
            "signal_strength": {
                c.value: {j.value: v for j, v in t.items()} for c, t in self.signal_strength.items()
            },
            "malicious_row_fraction": {
                c.value: {j.value: v for j, v in t.items()}
                for c, t in self.malicious_row_fraction.items()
            },
            "silent_fraction": {
                c.value: {j.value: v for j, v in t.items()} for c, t in self.silent_fraction.items()
            },
            "signal_feature_count": {c.value: v for c, v in self.signal_feature_count.items()},
            "shift_scale": self.shift_scale,
            "program_jitter": self.program_jitter,
            "noise_sigma0": self.noise_sigma0,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GeneratorSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown generator keys: {sorted(unknown)}")
        spec = cls()
        for key in ("programs_per_class", "benign_programs", "seed"):
            if key in d:
                setattr(spec, key, None if d[key] is None else int(d[key]))
        for key in ("shift_scale", "program_jitter", "noise_sigma0"):
            if key in d:
                setattr(spec, key, float(d[key]))
        for key in ("rows_per_program", "feature_counts", "signal_feature_count"):
            for c, v in d.get(key, {}).items():
                getattr(spec, key)[Component(c)] = tuple(v) if key == "rows_per_program" else int(v)
        for key in ("signal_strength", "malicious_row_fraction", "silent_fraction"):
            for c, t in d.get(key, {}).items():
                for j, v in t.items():
                    getattr(spec, key)[Component(c)][parse_label(j)] = float(v)
        return spec

    def with_uniform_signal(self, delta: float) -> "GeneratorSpec":
        """Copy with every (component, class) separability set to ``delta``."""
        spec = GeneratorSpec.from_dict(self.to_dict())
        for c in COMPONENTS:
            for j in MALWARE_CLASSES:
                spec.signal_strength[c][j] = delta
        return spec


@dataclass(frozen=True)
class Dataset:
    programs: Tuple[Program, ...]
    schema: Mapping[Component, Tuple[str, ...]]
    noise_sigma0: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "programs", tuple(self.programs))
        for p in self.programs:
            for c in COMPONENTS:
                if p.data[c].columns != tuple(self.schema[c]):
                    raise SchemaError(f"program {p.id} has a non-conforming {c} schema")

    def __len__(self) -> int:
        return len(self.programs)

    @property
    def class_distribution(self) -> Dict[Label, int]:
        counts = Counter(p.true_class for p in self.programs)
        return {lab: counts[lab] for lab in ALL_LABELS if counts[lab]}

    def subset(self, programs: Iterable[Program]) -> "Dataset":
        return Dataset(tuple(programs), self.schema, self.noise_sigma0)

    def of_labels(self, labels: Sequence[Label]) -> "Dataset":
        wanted = set(labels)
        return self.subset(p for p in self.programs if p.true_class in wanted)


def feature_columns(component: Component, count: int) -> Tuple[str, ...]:
    return tuple(f"f_{i}" for i in range(count))


def signal_features(spec: GeneratorSpec) -> Dict[Component, Dict[MalwareClass, np.ndarray]]:
    """Class-specific feature blocks; disjoint when the component has room, else wrapping."""
    out = {}
    for ci, c in enumerate(COMPONENTS):
        rng = np.random.default_rng([spec.seed, 1000 + ci])
        m, s = spec.feature_counts[c], spec.signal_feature_count[c]
        perm = rng.permutation(m)
        out[c] = {
            j: perm[(ji * s + np.arange(s)) % m] for ji, j in enumerate(MALWARE_CLASSES)
        }
    return out


def _shift_signs(spec: GeneratorSpec) -> Dict[Component, Dict[MalwareClass, np.ndarray]]:
    out = {}
    for ci, c in enumerate(COMPONENTS):
        rng = np.random.default_rng([spec.seed, 2000 + ci])
        s = spec.signal_feature_count[c]
        out[c] = {j: rng.choice([-1.0, 1.0], size=s) for j in MALWARE_CLASSES}
    return out


def silent_programs(
    spec: GeneratorSpec, labels: Sequence[Label]
) -> Dict[Component, set]:
    """Indices (into ``labels``) of programs that carry no signal in each component.

    Exactly ``round(share * count)`` programs of each class are chosen per component.
    """
    out = {}
    for ci, c in enumerate(COMPONENTS):
        chosen = set()
        for ji, j in enumerate(MALWARE_CLASSES):
            members = [i for i, lab in enumerate(labels) if lab is j]
            k = int(round(spec.silent_fraction[c][j] * len(members)))
            if k:
                rng = np.random.default_rng([spec.seed, 3000 + ci, ji])
                chosen.update(members[i] for i in rng.choice(len(members), size=k, replace=False))
        out[c] = chosen
    return out


def generate_dataset(spec: GeneratorSpec) -> Dataset:
    spec.validate()
    labels: List[Label] = [j for j in MALWARE_CLASSES for _ in range(spec.programs_per_class)]
    labels += [BENIGN] * spec.n_benign
    root = np.random.SeedSequence(spec.seed)
    order_rng = np.random.default_rng(root.spawn(1)[0])
    order = order_rng.permutation(len(labels))
    blocks = signal_features(spec)
    signs = _shift_signs(spec)
    schema = {c: feature_columns(c, spec.feature_counts[c]) for c in COMPONENTS}
    child_seeds = root.spawn(len(labels) + 1)[1:]
    ordered_labels = [labels[li] for li in order]
    silent = silent_programs(spec, ordered_labels)

    programs = []
    for i, li in enumerate(order):
        label = labels[li]
        rng = np.random.default_rng(child_seeds[i])
        data = {}
        for c in COMPONENTS:
            lo, hi = spec.rows_per_program[c]
            n_rows = int(rng.integers(lo, hi + 1))
            m = spec.feature_counts[c]
            offset = rng.normal(0.0, spec.program_jitter, size=m)
            X = rng.normal(size=(n_rows, m)) + offset
            if label is not BENIGN and i not in silent[c]:
                rho = spec.malicious_row_fraction[c][label]
                shift = spec.signal_strength[c][label] * spec.shift_scale
                mal = rng.permutation(n_rows)[: int(round(rho * n_rows))]
                X[np.ix_(mal, blocks[c][label])] += shift * signs[c][label]
            data[c] = SnapshotMatrix(X, schema[c], c)
        programs.append(
            Program(
                id=f"p{i:05d}",
                true_class=label,
                collected_at=float(i),
                load_at_collection=0,
                data=data,
            )
        )
    return Dataset(tuple(programs), schema, spec.noise_sigma0)


# -- persistence ---------------------------------------------------------------

def _component_file(c: Component) -> str:
    return f"{c.value.lower()}.csv"


def write_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "noise_sigma0": ds.noise_sigma0,
        "components": {},
    }
    for c in COMPONENTS:
        frames = []
        for p in ds.programs:
            mat = p.data[c]
            df = pd.DataFrame(mat.features, columns=list(mat.columns))
            df.insert(0, "load", p.load_at_collection)
            df.insert(0, "collected_at", p.collected_at)
            df.insert(0, "class", str(p.true_class))
            df.insert(0, "program_id", p.id)
            frames.append(df)
        table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(
            columns=list(META_COLUMNS) + list(ds.schema[c])
        )
        table.to_csv(out / _component_file(c), index=False, float_format="%.17g")
        manifest["components"][c.value] = {
            "file": _component_file(c),
            "columns": list(ds.schema[c]),
        }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_dataset(path, require_all_components: bool = True) -> Dataset:
    """Read a dataset directory written by :func:`write_dataset`."""
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"no manifest.json in {root}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != DATASET_FORMAT or manifest.get("version") != DATASET_VERSION:
        raise SchemaError("manifest is not a supported dataset format")
    schema, per_component = {}, {}
    for c in COMPONENTS:
        entry = manifest.get("components", {}).get(c.value)
        if entry is None or not (root / entry["file"]).exists():
            raise MissingComponentError(f"component file for {c} is missing")
        cols = tuple(entry["columns"])
        schema[c] = cols
        df = pd.read_csv(
            root / entry["file"], dtype={"program_id": str, "class": str}, float_precision="round_trip"
        )
        expected = list(META_COLUMNS) + list(cols)
        if list(df.columns) != expected:
            raise SchemaError(f"{entry['file']}: columns do not match the manifest schema")
        try:
            feats = df[list(cols)].apply(pd.to_numeric, errors="raise").to_numpy(np.float64)
            times = pd.to_numeric(df["collected_at"], errors="raise").to_numpy(np.float64)
            loads = pd.to_numeric(df["load"], errors="raise").to_numpy()
        except (ValueError, TypeError) as exc:
            raise SchemaError(f"{entry['file']}: non-numeric cell ({exc})") from exc
        if not np.all(np.isfinite(feats)):
            raise SchemaError(f"{entry['file']}: missing or non-finite feature values")
        groups = {}
        classes = df["class"].to_numpy()
        for pid, idx in df.groupby("program_id", sort=False).indices.items():
            groups[pid] = (
                parse_label(classes[idx[0]]),
                float(times[idx[0]]),
                int(loads[idx[0]]),
                feats[idx],
            )
        per_component[c] = groups

    order = list(per_component[COMPONENTS[0]])
    for c in COMPONENTS[1:]:
        for pid in per_component[c]:
            if pid not in per_component[COMPONENTS[0]]:
                order.append(pid)
    programs = []
    for pid in order:
        present = [c for c in COMPONENTS if pid in per_component[c]]
        if len(present) != len(COMPONENTS):
            missing = [c.value for c in COMPONENTS if c not in present]
            if require_all_components:
                raise MissingComponentError(f"program {pid} has no rows for {missing}")
            continue
        label, t, load, _ = per_component[present[0]][pid]
        for c in present[1:]:
            other = per_component[c][pid]
            if other[0] != label or other[1] != t:
                raise SchemaError(f"program {pid}: class/timestamp disagree across components")
        data = {c: SnapshotMatrix(per_component[c][pid][3], schema[c], c) for c in COMPONENTS}
        programs.append(Program(pid, label, t, load, data))
    return Dataset(tuple(programs), schema, float(manifest.get("noise_sigma0", 0.5)))


# -- splitting -----------------------------------------------------------------

def temporal_split(
    ds: Dataset,
    ratios: Tuple[float, float, float] = (0.70, 0.15, 0.15),
    balance: bool = True,
) -> Tuple[Dataset, Dataset, Dataset]:
    """Chronological train/validate/test partition.

    No training program is collected after any validate/test program. With
    ``balance`` the training part is downsampled to the smallest label count,
    keeping each label's most recent programs.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios {ratios} must be three nonnegative numbers summing to 1")
    counts = ds.class_distribution
    if balance and (not counts or min(counts.values()) < 3):
        raise ValueError("too few programs per label to build a balanced training split")
    order = sorted(range(len(ds)), key=lambda i: (ds.programs[i].collected_at, i))
    n = len(order)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_val = min(n_val, n - n_train)
    ordered = [ds.programs[i] for i in order]
    train = ordered[:n_train]
    val = ordered[n_train:n_train + n_val]
    test = ordered[n_train + n_val:]
    if balance:
        train_counts = Counter(p.true_class for p in train)
        labels_present = [lab for lab in ALL_LABELS if counts.get(lab)]
        smallest = min(train_counts.get(lab, 0) for lab in labels_present)
        if smallest == 0:
            raise ValueError("a label is absent from the training split; cannot balance")
        keep = set()
        for lab in labels_present:
            members = [i for i, p in enumerate(train) if p.true_class == lab]
            keep.update(members[-smallest:])
        train = [p for i, p in enumerate(train) if i in keep]
    return ds.subset(train), ds.subset(val), ds.subset(test)


# -- load noise ----------------------------------------------------------------

NOISY_COMPONENTS = (Component.NETWORK, Component.HARDWARE)


def replaced_row_fraction(load: int) -> float:
    return min(0.05 * (load / 10.0), 0.5)


def inject_load_noise(
    ds: Dataset, load: int, sigma0: Optional[float] = None, seed: int = 0
) -> Dataset:
    """Perturb network and hardware trails as if ``load`` processes shared the host.

    Noise draws are shared across load values (only their scale and the number of
    substituted rows change), so perturbations are nested as ``load`` grows. OS
    matrices are passed through untouched.
    """
    if load < 0:
        raise ValueError("load must be nonnegative")
    sigma0 = ds.noise_sigma0 if sigma0 is None else sigma0
    scale = sigma0 * (load / 10.0)
    frac = replaced_row_fraction(load)
    programs = []
    for pi, p in enumerate(ds.programs):
        data = dict(p.data)
        if load > 0:
            for ci, c in enumerate(COMPONENTS):
                if c not in NOISY_COMPONENTS:
                    continue
                X = p.data[c].features
                rng = np.random.default_rng([seed, pi, ci])
                n_rows, m = X.shape
                additive = rng.normal(size=(n_rows, m))
                substitute = rng.normal(size=(n_rows, m))
                rank = rng.permutation(n_rows)
                Xn = X + scale * additive
                n_sub = int(round(frac * n_rows))
                if n_sub:
                    rows = rank[:n_sub]
                    Xn[rows] = substitute[rows]
                data[c] = SnapshotMatrix(Xn, p.data[c].columns, c)
        programs.append(
            Program(p.id, p.true_class, p.collected_at, int(load), data)
        )
    return ds.subset(programs)
