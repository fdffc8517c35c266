"""The training harness: four public methods over a model_fn callback.

Every public method builds a fresh graph, calls the model_fn exactly once
with the matching mode, restores the latest checkpoint when one exists, and
runs its loop. The Estimator object itself holds no graph state between
calls; the model_dir is the only memory.
"""
from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional

from .checkpoint import (CheckpointStore, restore_checkpoint, restore_into_graph)
from .errors import ConfigError, NoCheckpointError, TrainingDivergedError
from .execution import Executor
from .graph import Graph
from .heads import EstimatorSpec
from .hooks import CheckpointSaverHook, RunContext, StopAtStepHook, run_loop_with_hooks
from .inputs import InputPlumbing, peek_iterator, split_batch
from .modes import Mode

EVAL_RECORDS_FILE = "eval_records.jsonl"
TASK_TYPES = ("local", "worker", "ps", "evaluator")


@dataclass
class RunConfig:
    """Everything about the environment, nothing about the model."""

    model_dir: str
    save_checkpoints_steps: int = 100
    keep_checkpoint_max: int = 5
    seed: int = 0
    task: dict = field(default_factory=lambda: {"type": "local", "index": 0})
    cluster: dict = field(default_factory=lambda: {"num_ps": 0, "num_workers": 0})

    def __post_init__(self):
        if not self.model_dir:
            raise ConfigError("run config: model_dir must be a non-empty path")
        if self.save_checkpoints_steps < 1:
            raise ConfigError(
                f"run config: save_checkpoints_steps must be >= 1, got "
                f"{self.save_checkpoints_steps}")
        if self.keep_checkpoint_max < 1:
            raise ConfigError(
                f"run config: keep_checkpoint_max must be >= 1, got "
                f"{self.keep_checkpoint_max}")
        self.task = dict(self.task)
        self.cluster = dict(self.cluster)
        task_type = self.task.setdefault("type", "local")
        index = self.task.setdefault("index", 0)
        if task_type not in TASK_TYPES:
            raise ConfigError(
                f"run config: task.type must be one of {TASK_TYPES}, got {task_type!r}")
        if not isinstance(index, int) or index < 0:
            raise ConfigError(
                f"run config: task.index must be a non-negative int, got {index!r}")
        num_ps = self.cluster.setdefault("num_ps", 0)
        num_workers = self.cluster.setdefault("num_workers", 0)
        if num_ps < 0 or num_workers < 0:
            raise ConfigError("run config: cluster sizes must be >= 0")
        if task_type == "worker" and index >= max(num_workers, 1):
            raise ConfigError(
                f"run config: worker index {index} out of range for "
                f"{num_workers} workers")
        if task_type == "ps" and index >= max(num_ps, 1):
            raise ConfigError(
                f"run config: ps index {index} out of range for {num_ps} shards")
        if task_type in ("local", "evaluator") and index != 0:
            raise ConfigError(f"run config: {task_type} task must have index 0")

    @property
    def writer_id(self) -> str:
        return f"{self.task['type']}-{self.task['index']}"


class Estimator:
    """Train/evaluate/predict/export around a model_fn(features, labels, mode, params)."""

    def __init__(self, model_fn: Callable, params: Optional[dict] = None,
                 config: Optional[RunConfig] = None):
        if config is None:
            raise ConfigError("an Estimator requires a RunConfig (model_dir at minimum)")
        self.model_fn = model_fn
        self.params = params if params is not None else {}
        self.config = config
        self.export_metadata: Optional[dict] = None  # canned constructors fill this
        self._store = CheckpointStore(config.model_dir, config.keep_checkpoint_max)

    @property
    def model_dir(self) -> Path:
        return Path(self.config.model_dir)

    # -- shared plumbing -----------------------------------------------------

    def _build(self, input_fn: Callable, mode: Mode):
        graph = Graph(seed=self.config.seed)
        with graph.as_default():
            graph.create_global_step()
            first, batches = peek_iterator(input_fn())
            features_raw, labels_raw = split_batch(first)
            if mode == Mode.PREDICT:
                labels_raw = None
            plumbing = InputPlumbing(graph, features_raw, labels_raw)
            spec = self.model_fn(plumbing.features, plumbing.labels, mode, self.params)
            if not isinstance(spec, EstimatorSpec):
                raise TypeError(
                    f"model_fn must return an EstimatorSpec, got "
                    f"{type(spec).__name__}")
            if spec.mode != mode:
                raise ValueError(
                    f"model_fn was called with mode {mode.value} but returned a "
                    f"spec for {spec.mode.value}")
        return graph, plumbing, spec, batches

    def _restore(self, graph: Graph, checkpoint_path=None, required: bool = True):
        if checkpoint_path is not None:
            ckpt = restore_checkpoint(checkpoint_path)
        else:
            latest = self._store.latest_path()
            if latest is None:
                if required:
                    raise NoCheckpointError(
                        f"no trained model in {self.model_dir}")
                return None
            ckpt = restore_checkpoint(latest)
        restore_into_graph(graph, ckpt)
        return ckpt

    def _save(self, graph: Graph) -> None:
        self._store.save({name: var.value for name, var in graph.variables.items()},
                         graph.global_step)

    # -- public methods --------------------------------------------------------

    def train(self, input_fn: Callable, steps: Optional[int] = None,
              max_steps: Optional[int] = None, hooks=()) -> int:
        """Run the training loop; returns the final global step."""
        if steps is not None and max_steps is not None:
            raise ValueError("train: pass at most one of steps and max_steps")
        if steps is not None and steps < 0:
            raise ValueError(f"train: steps must be >= 0, got {steps}")
        if max_steps is not None and max_steps < 0:
            raise ValueError(f"train: max_steps must be >= 0, got {max_steps}")
        graph, plumbing, spec, batches = self._build(input_fn, Mode.TRAIN)
        self._restore(graph, required=False)
        self._store.claim_writer(self.config.writer_id)
        target = max_steps if max_steps is not None else (
            graph.global_step + steps if steps is not None else None)
        executor = Executor(graph)
        context = RunContext(graph, model_dir=self.model_dir,
                             save_fn=lambda: self._save(graph))

        def step_fn(batch, extra_fetches):
            features, labels = split_batch(batch)
            feed = plumbing.feed_for_batch(features, labels)
            results = executor.run([spec.loss, spec.train_op] + list(extra_fetches),
                                   feed=feed)
            loss = float(results[0])
            if math.isnan(loss):
                raise TrainingDivergedError(
                    f"training diverged: loss is NaN at global step "
                    f"{graph.global_step}")
            return loss, results[2:]

        run_hooks = list(hooks)
        run_hooks.append(CheckpointSaverHook(self.config.save_checkpoints_steps))
        if target is not None:
            run_hooks.append(StopAtStepHook(target))
        run_loop_with_hooks(context, run_hooks, batches, step_fn)
        return graph.global_step

    def evaluate(self, input_fn: Callable, steps: Optional[int] = None,
                 hooks=(), checkpoint_path=None) -> dict:
        """Stream metrics over the input; returns {metric: value, "global_step"}."""
        graph, plumbing, spec, batches = self._build(input_fn, Mode.EVAL)
        self._restore(graph, checkpoint_path, required=True)
        executor = Executor(graph)
        context = RunContext(graph, model_dir=self.model_dir)
        updates = [pair.update for pair in spec.eval_metrics.values()]
        if steps is not None:
            batches = itertools.islice(batches, steps)

        def step_fn(batch, extra_fetches):
            features, labels = split_batch(batch)
            feed = plumbing.feed_for_batch(features, labels)
            results = executor.run([spec.loss] + updates + list(extra_fetches),
                                   feed=feed)
            return float(results[0]), results[1 + len(updates):]

        run_loop_with_hooks(context, list(hooks), batches, step_fn)
        values = {name: float(executor.run(pair.value))
                  for name, pair in spec.eval_metrics.items()}
        result = dict(values)
        result["global_step"] = graph.global_step
        self._append_eval_record(graph.global_step, values)
        return result

    def predict(self, input_fn: Callable, checkpoint_path=None) -> Iterator[dict]:
        """Yield one prediction map per input example, in input order."""
        graph, plumbing, spec, batches = self._build(input_fn, Mode.PREDICT)
        self._restore(graph, checkpoint_path, required=True)
        executor = Executor(graph)
        names = list(spec.predictions)
        tensors = [spec.predictions[name] for name in names]

        def generate():
            for batch in batches:
                features, _ = split_batch(batch)
                feed = plumbing.feed_for_batch(features)
                outputs = executor.run(tensors, feed=feed)
                for row in range(len(outputs[0])):
                    yield {name: outputs[col][row]
                           for col, name in enumerate(names)}

        return generate()

    def export_savedmodel(self, export_dir_base, serving_feature_spec=None) -> Path:
        """Write a self-contained serving directory; returns its path."""
        from .export import export_saved_model

        return export_saved_model(self, export_dir_base, serving_feature_spec)

    # -- model_dir records ------------------------------------------------------

    def _append_eval_record(self, global_step: int, metrics: dict) -> None:
        self.model_dir.mkdir(parents=True, exist_ok=True)
        record = {"wall_time": time.time(), "global_step": int(global_step),
                  "metrics": metrics}
        with open(self.model_dir / EVAL_RECORDS_FILE, "a") as fh:
            fh.write(json.dumps(record) + "\n")

    def latest_checkpoint(self) -> Optional[Path]:
        return self._store.latest_path()
