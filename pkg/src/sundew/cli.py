"""Command-line entry point: gen, train, eval, predict."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

from .component_aggregator import measure_load
from .datagen import (
    DatasetError,
    GeneratorSpec,
    MissingComponentError,
    generate_dataset,
    load_dataset,
    temporal_split,
    write_dataset,
)
from .domain import (
    COMPONENTS,
    CAStrategy,
    Component,
    ConfidentSetMetric,
    ConsensusStrategy,
    EnsembleConfig,
)
from .ensemble import Ensemble, train_ensemble
from .eval import Mode, run_experiment
from .predictor import SchemaMismatchError, TrainingError

log = logging.getLogger("sundew")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_TRAINING = 3
EXIT_SCHEMA = 4
EXIT_MISSING = 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _read_json(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_INVALID, f"cannot read {path}: {exc}") from exc


def apply_overrides(cfg: EnsembleConfig, overrides: Sequence[str]) -> EnsembleConfig:
    """Apply ``KEY=VALUE`` strategy overrides.

    Keys: ``ca``, ``consensus``, ``metric`` (all components) or
    ``consensus.<Component>`` / ``metric.<Component>``, plus ``eta``, ``tau``, ``gamma``.
    """
    consensus = dict(cfg.consensus_strategy)
    metric = dict(cfg.confident_set_metric)
    kw = {}
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not KEY=VALUE")
        head, _, comp = key.partition(".")
        targets = [Component(comp)] if comp else list(COMPONENTS)
        if head == "ca":
            kw["ca_strategy"] = CAStrategy(value)
        elif head == "consensus":
            for c in targets:
                consensus[c] = ConsensusStrategy(value)
        elif head == "metric":
            for c in targets:
                metric[c] = ConfidentSetMetric(value)
        elif head in ("eta", "gamma"):
            kw[head] = float(value)
        elif head == "tau":
            kw[head] = int(value)
        else:
            raise ValueError(f"unknown override key {key!r}")
    out = replace(cfg, consensus_strategy=consensus, confident_set_metric=metric, **kw)
    out.validate()
    return out


def _header(command: str, payload: dict) -> None:
    print(f"# sundew {command}")
    print("# effective config: " + json.dumps(payload, sort_keys=True, separators=(",", ":")))
    sys.stdout.flush()


def _load_config(args) -> EnsembleConfig:
    try:
        cfg = EnsembleConfig.from_dict(_read_json(args.config))
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        return apply_overrides(cfg, args.strategy or [])
    except (ValueError, TypeError, KeyError) as exc:
        raise CliError(EXIT_INVALID, f"invalid config: {exc}") from exc


def _load_data(path: str):
    try:
        return load_dataset(path)
    except MissingComponentError as exc:
        raise CliError(EXIT_MISSING, str(exc)) from exc
    except (DatasetError, FileNotFoundError, ValueError) as exc:
        raise CliError(EXIT_INVALID, f"cannot load dataset {path}: {exc}") from exc


def _load_model(path: str) -> Ensemble:
    try:
        return Ensemble.load(path)
    except SchemaMismatchError as exc:
        raise CliError(EXIT_SCHEMA, str(exc)) from exc
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(EXIT_INVALID, f"cannot load model {path}: {exc}") from exc


def parse_sweep(text: Optional[str]) -> Optional[List[int]]:
    if text is None:
        return None
    try:
        loads = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise CliError(EXIT_INVALID, f"bad --sweep value {text!r}") from exc
    if not loads or any(v < 0 for v in loads):
        raise CliError(EXIT_INVALID, "--sweep needs nonnegative integers")
    return loads


# -- commands --------------------------------------------------------------------

def cmd_gen(args) -> int:
    try:
        spec = GeneratorSpec.from_dict(_read_json(args.spec))
        if args.seed is not None:
            spec.seed = args.seed
        if args.programs_per_class is not None:
            spec.programs_per_class = args.programs_per_class
        spec.validate()
    except (ValueError, TypeError, KeyError) as exc:
        raise CliError(EXIT_INVALID, f"invalid generator spec: {exc}") from exc
    _header("gen", spec.to_dict())
    ds = generate_dataset(spec)
    root = write_dataset(ds, args.out)
    print(f"wrote {len(ds)} programs to {root}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    _header("train", cfg.to_dict())
    ds = _load_data(args.data)
    try:
        train, validate, _ = temporal_split(ds)
    except ValueError as exc:
        raise CliError(EXIT_INVALID, f"cannot split dataset: {exc}") from exc
    try:
        ens = train_ensemble(train.programs, validate.programs, cfg)
    except TrainingError as exc:
        raise CliError(EXIT_TRAINING, str(exc)) from exc
    root = ens.save(args.out)
    flagged = [f"{c.value}/{j.value}:{','.join(p.flags)}" for (c, j), p in ens.predictors.items() if p.flags]
    if flagged:
        print("flagged predictors: " + " ".join(flagged))
    print(f"saved ensemble to {root}")
    return EXIT_OK


def _eval_config(ens: Ensemble, args) -> EnsembleConfig:
    """The stored config, with aggregation settings replaced by ``--config`` if given."""
    cfg = ens.config
    if args.config:
        new = _load_config(args)
        cfg = replace(new, predictor=ens.config.predictor)
    else:
        try:
            if args.seed is not None:
                cfg = replace(cfg, seed=args.seed)
            cfg = apply_overrides(cfg, args.strategy or [])
        except ValueError as exc:
            raise CliError(EXIT_INVALID, f"invalid override: {exc}") from exc
    return cfg


def cmd_eval(args) -> int:
    ens = _load_model(args.model)
    ens.config = _eval_config(ens, args)
    sweep = parse_sweep(args.sweep)
    _header("eval", ens.config.to_dict())
    ds = _load_data(args.data)
    if args.split == "test":
        _, _, test = temporal_split(ds)
    else:
        test = ds
    modes = (Mode.BINARY, Mode.MULTI) if args.mode == "both" else (Mode(args.mode),)
    try:
        report = run_experiment(ens, test, modes, sweep)
    except SchemaMismatchError as exc:
        raise CliError(EXIT_SCHEMA, str(exc)) from exc
    paths = report.write(args.out)
    for name in sorted(paths):
        print(f"{name}: {paths[name]}")
    print(report.summary(), end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    ens = _load_model(args.model)
    ens.config = _eval_config(ens, args)
    load = measure_load(args.load)
    _header("predict", dict(ens.config.to_dict(), load=load))
    ds = _load_data(args.data)
    programs = list(ds.programs)
    if args.program:
        wanted = set(args.program)
        programs = [p for p in programs if p.id in wanted]
        missing = wanted - {p.id for p in programs}
        if missing:
            raise CliError(EXIT_MISSING, f"no data for programs {sorted(missing)}")
    try:
        verdicts = ens.detect(programs, load=load)
    except SchemaMismatchError as exc:
        raise CliError(EXIT_SCHEMA, str(exc)) from exc
    print("program_id,label,confidence,source")
    for p, v in zip(programs, verdicts):
        print(f"{p.id},{v.label},{v.confidence:.6f},{v.source_name}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sundew", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--seed", type=int, default=None, help="override the seed")
        if config:
            p.add_argument("--config", default=None, help="ensemble config JSON")
            p.add_argument("--strategy", action="append", metavar="KEY=VALUE",
                           help="strategy override, e.g. ca=Majority or consensus.OS=Multiplexer")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--spec", default=None, help="generator spec JSON")
    p.add_argument("--programs-per-class", type=int, default=None)
    p.add_argument("--out", required=True)
    common(p, config=False)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train an ensemble on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained ensemble")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["binary", "multi", "both"], default="both")
    p.add_argument("--sweep", default=None, help='comma-separated loads, e.g. "0,10,20,30,40,50"')
    p.add_argument("--split", choices=["test", "all"], default="test",
                   help="score the temporal test split or every program")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="final verdict per program")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="dataset directory with all three components")
    p.add_argument("--load", type=int, default=None, help="system load; default reads the host")
    p.add_argument("--program", action="append", help="restrict to these program ids")
    common(p)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.ERROR,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
