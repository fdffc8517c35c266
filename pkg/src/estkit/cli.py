"""Operator entry point: batch commands over a JSON job config and CSV data.

The CLI is a thin adapter: it builds a canned estimator and CSV-backed input
functions from the config and calls the corresponding library method. Config
and schema problems exit 2 with a field-level message; training divergence
exits 3. Metrics land on stdout as exactly one JSON object.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import feature_columns as fc
from .canned import CANNED_TYPES
from .errors import ConfigError, TrainingDivergedError
from .estimator import RunConfig
from .experiment import (RUN_CONFIG_ENV, Experiment, benchmark_scaling,
                         run_config_from_env)

BENCHMARK_HEADER = "workers,steps_per_sec,speedup_vs_1"

_RUN_FIELDS = ("model_dir", "save_checkpoints_steps", "keep_checkpoint_max",
               "seed", "task", "cluster")
_COMMON_FIELDS = ("label_name", "weight_column")
_MODEL_FIELDS = {
    "linear_classifier": _COMMON_FIELDS + ("n_classes", "optimizer"),
    "linear_regressor": _COMMON_FIELDS + ("label_dim", "optimizer"),
    "dnn_classifier": _COMMON_FIELDS + ("n_classes", "activation", "dropout",
                                        "optimizer"),
    "dnn_regressor": _COMMON_FIELDS + ("label_dim", "activation", "dropout",
                                       "optimizer"),
    "dnn_linear_combined_classifier": _COMMON_FIELDS + (
        "n_classes", "activation", "dropout", "linear_optimizer",
        "dnn_optimizer"),
}
_STRUCTURE_FIELDS = ("estimator_type", "feature_spec", "linear_feature_spec",
                     "dnn_feature_spec", "hidden_units", "data", "run",
                     "train_steps", "export_dir")


class CsvDataset:
    """CSV rows typed by the job's feature columns.

    Columns the feature spec declares dense parse as one float per row;
    categorical columns parse as strings, split into multiple values on "|"
    (an empty cell is an empty value list). Iteration order is the file
    order unless a shuffle seed is configured.
    """

    def __init__(self, path, feature_types: Dict[str, str],
                 label_column: Optional[str] = None, label_kind: str = "float",
                 batch_size: int = 32, shuffle_seed: Optional[int] = None):
        if batch_size < 1:
            raise ConfigError(f"data.batch_size must be >= 1, got {batch_size}")
        self.path = Path(path)
        self.label_column = label_column
        if not self.path.exists():
            raise ConfigError(f"data: csv file not found: {self.path}")
        with open(self.path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ConfigError(f"data: csv file {self.path} is empty")
            needed = dict(feature_types)
            if label_column is not None:
                needed.setdefault(label_column, "label")
            for name in sorted(needed):
                if name not in header:
                    raise ConfigError(
                        f"data: csv file {self.path} has no column {name!r}")
            rows = []
            for line_number, cells in enumerate(reader, start=2):
                if not cells:
                    continue  # blank trailing line
                if len(cells) != len(header):
                    raise ConfigError(
                        f"data: {self.path} line {line_number}: expected "
                        f"{len(header)} values, got {len(cells)}")
                rows.append(self._parse_row(header, cells, needed, label_kind,
                                            line_number))
        if shuffle_seed is not None:
            order = np.random.default_rng(shuffle_seed).permutation(len(rows))
            rows = [rows[i] for i in order]
        self._rows = rows
        self.batch_size = batch_size
        self._feature_types = feature_types
        self._label_kind = label_kind

    def _parse_row(self, header, cells, needed, label_kind, line_number):
        row = {}
        for name, cell in zip(header, cells):
            kind = needed.get(name)
            if kind is None:
                continue  # unreferenced column: ignored
            if kind == "dense":
                row[name] = self._parse_number(name, cell, float, line_number)
            elif kind == "label":
                parser = int if label_kind == "int" else float
                row[name] = self._parse_number(name, cell, parser, line_number)
            else:
                row[name] = cell.split("|") if cell else []
        return row

    def _parse_number(self, name, cell, parser, line_number):
        try:
            return parser(cell)
        except ValueError:
            raise ConfigError(
                f"data: {self.path} line {line_number}: column {name!r} "
                f"is not a number: {cell!r}")

    def __len__(self):
        return len(self._rows)

    def _batch(self, rows: List[dict]):
        features = {}
        for name, kind in self._feature_types.items():
            if kind == "dense":
                features[name] = np.asarray([r[name] for r in rows])
            else:
                features[name] = [r[name] for r in rows]
        if self.label_column is None:
            return features
        dtype = np.int64 if self._label_kind == "int" else np.float64
        labels = {"label": np.asarray([r[self.label_column] for r in rows],
                                      dtype=dtype)}
        return features, labels

    def batches(self, repeat: bool = False):
        while True:
            for start in range(0, len(self._rows), self.batch_size):
                yield self._batch(self._rows[start:start + self.batch_size])
            if not repeat:
                return

    def input_fn(self, repeat: bool = False):
        return lambda: self.batches(repeat=repeat)


# ---------------------------------------------------------------------------
# Job config
# ---------------------------------------------------------------------------

def _load_job_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        parsed = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(parsed, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return parsed


def _run_config(job: dict, env: dict) -> RunConfig:
    run = dict(job.get("run", {}))
    unknown = set(run) - set(_RUN_FIELDS)
    if unknown:
        raise ConfigError(f"run: unknown fields {sorted(unknown)}")
    if env.get(RUN_CONFIG_ENV) is not None:
        return run_config_from_env(env)
    if "model_dir" not in run:
        raise ConfigError("run.model_dir is required")
    return RunConfig(**run)


def _columns(job: dict, field: str):
    spec = job.get(field)
    if not spec:
        raise ConfigError(f"{field} must be a non-empty list of column specs")
    try:
        return fc.columns_from_spec(spec)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{field}: {exc}")


def build_estimator(job: dict, env: Optional[dict] = None):
    env = os.environ if env is None else env
    estimator_type = job.get("estimator_type")
    if estimator_type not in CANNED_TYPES:
        raise ConfigError(
            f"estimator_type must be one of {sorted(CANNED_TYPES)}, got "
            f"{estimator_type!r}")
    allowed = _MODEL_FIELDS[estimator_type]
    unknown = set(job) - set(allowed) - set(_STRUCTURE_FIELDS)
    if unknown:
        raise ConfigError(
            f"unknown fields for {estimator_type}: {sorted(unknown)}")
    config = _run_config(job, env)
    kwargs = {name: job[name] for name in allowed if name in job}
    cls = CANNED_TYPES[estimator_type]
    needs_hidden = estimator_type.startswith("dnn")
    hidden = job.get("hidden_units")
    if needs_hidden and hidden is None:
        raise ConfigError(f"hidden_units is required for {estimator_type}")
    if not needs_hidden and hidden is not None:
        raise ConfigError(f"hidden_units is not a {estimator_type} field")
    if estimator_type == "dnn_linear_combined_classifier":
        return cls(_columns(job, "linear_feature_spec"),
                   _columns(job, "dnn_feature_spec"), hidden,
                   config=config, **kwargs)
    columns = _columns(job, "feature_spec")
    if needs_hidden:
        return cls(hidden, columns, config=config, **kwargs)
    return cls(columns, config=config, **kwargs)


def _feature_types(estimator) -> Dict[str, str]:
    columns = fc.columns_from_spec(estimator.export_metadata["feature_spec"])
    try:
        return fc.referenced_feature_names(columns)
    except ValueError as exc:
        raise ConfigError(str(exc))


def _dataset(job: dict, estimator, csv_field: str, with_labels: bool,
             path_override=None) -> CsvDataset:
    data = job.get("data", {})
    path = path_override if path_override is not None else data.get(csv_field)
    if path is None:
        raise ConfigError(f"data.{csv_field} is required for this command")
    label_column = data.get("label_column") if with_labels else None
    if with_labels and label_column is None:
        raise ConfigError("data.label_column is required for train/evaluate")
    task = estimator.export_metadata["model"]["task"]
    return CsvDataset(path, _feature_types(estimator),
                      label_column=label_column,
                      label_kind="int" if task == "classify" else "float",
                      batch_size=data.get("batch_size", 32),
                      shuffle_seed=data.get("shuffle_seed"))


def _train_steps(job: dict) -> int:
    steps = job.get("train_steps")
    if steps is None or steps < 0:
        raise ConfigError(f"train_steps must be an int >= 0, got {steps!r}")
    return steps


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(job: dict, args, env: dict) -> int:
    estimator = build_estimator(job, env)
    dataset = _dataset(job, estimator, "train_csv", with_labels=True)
    final = estimator.train(dataset.input_fn(repeat=True),
                            max_steps=_train_steps(job))
    _emit({"global_step": final})
    return 0


def cmd_evaluate(job: dict, args, env: dict) -> int:
    estimator = build_estimator(job, env)
    dataset = _dataset(job, estimator, "eval_csv", with_labels=True)
    metrics = estimator.evaluate(dataset.input_fn())
    _emit(metrics)
    return 0


def cmd_predict(job: dict, args, env: dict) -> int:
    estimator = build_estimator(job, env)
    dataset = _dataset(job, estimator, "eval_csv", with_labels=False,
                       path_override=args.input)
    rows = estimator.predict(dataset.input_fn())
    records = [json.dumps({k: _jsonable(v) for k, v in row.items()},
                          sort_keys=True)
               for row in rows]
    text = "\n".join(records) + ("\n" if records else "")
    if args.output in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(args.output).write_text(text)
        _emit({"predictions": len(records), "output": str(args.output)})
    return 0


def cmd_export(job: dict, args, env: dict) -> int:
    estimator = build_estimator(job, env)
    base = args.output_dir or job.get("export_dir") or (
        Path(estimator.model_dir) / "export")
    export_dir = estimator.export_savedmodel(base)
    _emit({"export_dir": str(export_dir)})
    return 0


def cmd_benchmark_scaling(job: dict, args, env: dict) -> int:
    worker_counts = [int(c) for c in args.workers.split(",") if c]
    if not worker_counts:
        raise ConfigError("benchmark: --workers must name at least one count")
    base_job = dict(job)
    base_run = dict(job.get("run", {}))

    def factory(count):
        run = dict(base_run)
        run["model_dir"] = str(Path(run.get("model_dir", "bench")).with_name(
            Path(run.get("model_dir", "bench")).name + f"-w{count}"))
        bench_job = dict(base_job)
        bench_job["run"] = run
        estimator = build_estimator(bench_job, env={})
        dataset = _dataset(bench_job, estimator, "train_csv", with_labels=True)
        return Experiment(estimator=estimator,
                          train_input_fn=dataset.input_fn(repeat=True),
                          eval_input_fn=dataset.input_fn(),
                          train_steps=10 ** 9)

    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - library ships as a dependency
        rows = benchmark_scaling(factory, worker_counts, duration=args.duration)
    else:
        # One BLAS thread per worker keeps the scaling measurement about
        # workers, not library-internal parallelism.
        with threadpool_limits(limits=1):
            rows = benchmark_scaling(factory, worker_counts,
                                     duration=args.duration)
    print(BENCHMARK_HEADER)
    for row in rows:
        print(f"{row['workers']},{row['steps_per_sec']:.6g},"
              f"{row['speedup_vs_1']:.6g}")
    print("workers,ideal_linear_speedup", file=sys.stderr)
    for row, count in zip(rows, worker_counts):
        print(f"{count},{count / worker_counts[0]:.6g}", file=sys.stderr)
    return 0


_COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "export": cmd_export,
    "benchmark-scaling": cmd_benchmark_scaling,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="estkit",
        description="Train, evaluate, and serve canned estimators from a "
                    "JSON job config.")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "evaluate"):
        sub = subparsers.add_parser(name)
        sub.add_argument("--config", required=True)
    predict = subparsers.add_parser("predict")
    predict.add_argument("--config", required=True)
    predict.add_argument("--input", default=None,
                         help="csv of rows to predict (default: data.eval_csv)")
    predict.add_argument("--output", default="-",
                         help="JSONL destination ('-' for stdout)")
    export = subparsers.add_parser("export")
    export.add_argument("--config", required=True)
    export.add_argument("--output-dir", default=None)
    bench = subparsers.add_parser("benchmark-scaling")
    bench.add_argument("--config", required=True)
    bench.add_argument("--workers", default="1",
                       help="comma-separated worker counts, e.g. 1,2,4")
    bench.add_argument("--duration", type=float, default=5.0,
                       help="seconds of training measured per worker count")
    return parser


def main(argv: Optional[Sequence[str]] = None,
         env: Optional[dict] = None) -> int:
    env = os.environ if env is None else env
    args = _build_parser().parse_args(argv)
    try:
        job = _load_job_config(args.config)
        return _COMMANDS[args.command](job, args, env)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        # The exception message already says "training diverged: ...".
        print(str(exc), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
