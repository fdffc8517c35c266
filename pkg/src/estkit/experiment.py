"""Simulated distributed training: parameter-server shards, async workers,
a leader that owns checkpoints, and a continuously polling evaluator.

The cluster runs in one process. Shards are shared-state services with
per-variable mutual exclusion; workers and the evaluator are threads that
communicate only through the shards and the filesystem. Nothing here relies
on being in-process except the transport: a real RPC layer would slot in
behind the shard interface.
"""
from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .checkpoint import CheckpointStore, CorruptCheckpointError, restore_checkpoint
from .errors import ConfigError, NoCheckpointError
from .estimator import Estimator, RunConfig
from .execution import Executor
from .hooks import RunContext
from .inputs import split_batch
from .modes import Mode

RUN_CONFIG_ENV = "ESTIMATOR_RUN_CONFIG"
CHECKSUM_VARIABLE = "experiment/param_checksum"
LEADER_WRITER_ID = "worker-0"


class ChecksumMismatchError(RuntimeError):
    """A loaded checkpoint's parameters do not match its stored checksum."""


@dataclass(frozen=True)
class ClusterSpec:
    """Shape of the simulated cluster; sizes are fixed for a run."""

    num_ps: int = 1
    num_workers: int = 1
    evaluator: bool = False

    def __post_init__(self):
        if self.num_ps < 1:
            raise ConfigError(f"cluster: num_ps must be >= 1, got {self.num_ps}")
        if self.num_workers < 1:
            raise ConfigError(
                f"cluster: num_workers must be >= 1, got {self.num_workers}")


@dataclass
class Experiment:
    """An estimator paired with its two input functions and a step budget."""

    estimator: Estimator
    train_input_fn: Callable
    eval_input_fn: Callable
    train_steps: int
    eval_every: float = 0.1  # evaluator poll interval, seconds

    def __post_init__(self):
        if self.estimator is None:
            raise ConfigError("experiment: an estimator is required")
        if self.train_input_fn is None or self.eval_input_fn is None:
            raise ConfigError(
                "experiment: both train_input_fn and eval_input_fn are required")
        if self.train_steps < 0:
            raise ConfigError(
                f"experiment: train_steps must be >= 0, got {self.train_steps}")
        if self.eval_every <= 0:
            raise ConfigError(
                f"experiment: eval_every must be > 0, got {self.eval_every}")


class ParameterServerShard:
    """One shard of the variable store: atomic per-variable reads and updates.

    There is deliberately no cross-variable transaction; workers see each
    variable's latest committed value independently, which is the staleness
    the asynchronous design admits.
    """

    def __init__(self, index: int):
        self.index = index
        self._values: Dict[str, np.ndarray] = {}
        self._locks: Dict[str, threading.Lock] = {}
        self._registry = threading.Lock()

    def _lock_for(self, name: str) -> threading.Lock:
        with self._registry:
            lock = self._locks.get(name)
            if lock is None:
                raise KeyError(f"shard {self.index}: unknown variable {name!r}")
            return lock

    def owned(self) -> List[str]:
        with self._registry:
            return list(self._values)

    def publish(self, name: str, value: np.ndarray) -> None:
        """Create or reset a variable on this shard."""
        arr = np.array(value, copy=True)
        with self._registry:
            self._locks.setdefault(name, threading.Lock())
        with self._locks[name]:
            self._values[name] = arr

    def pull(self, name: str) -> np.ndarray:
        with self._lock_for(name):
            return np.array(self._values[name], copy=True)

    def apply_update(self, name: str, pulled: np.ndarray,
                     new: np.ndarray) -> np.ndarray:
        """Commit a worker's local step: new value relative to what it pulled.

        Uncontended (the stored value is still bit-identical to what the
        worker pulled), the new value is stored exactly, so a 1-worker run
        reproduces local training bit for bit. Under contention the worker's
        delta is added to the current value, never overwriting concurrent
        progress.
        """
        with self._lock_for(name):
            current = self._values[name]
            if current.tobytes() == np.asarray(pulled).tobytes():
                result = np.array(new, copy=True)
            else:
                result = current + (np.asarray(new) - np.asarray(pulled))
            self._values[name] = result
            return np.array(result, copy=True)


def assign_variables(names_in_creation_order: Sequence[str],
                     num_ps: int) -> Dict[str, int]:
    """Round-robin placement by creation order; identical on every worker."""
    if num_ps < 1:
        raise ConfigError(f"assign_variables: num_ps must be >= 1, got {num_ps}")
    return {name: i % num_ps
            for i, name in enumerate(names_in_creation_order)}


class ClusterRuntime:
    """In-process shared state of one cluster run: shards, events, signals."""

    def __init__(self, spec: ClusterSpec):
        self.spec = spec
        self.shards = [ParameterServerShard(i) for i in range(spec.num_ps)]
        self.initialized = threading.Event()  # set once the leader published
        self.training_done = threading.Event()
        self.shutdown = threading.Event()
        self.abort = threading.Event()  # a worker raised; peers wind down
        self.kill_switches = {i: threading.Event()
                              for i in range(spec.num_workers)}

    def pull(self, placement: Dict[str, int], name: str) -> np.ndarray:
        return self.shards[placement[name]].pull(name)

    def global_step(self) -> int:
        # global_step is always the first variable created, hence shard 0.
        return int(self.shards[0].pull("global_step"))


def _parameter_checksum(values: Dict[str, np.ndarray]) -> float:
    """Sum of all parameter sums in sorted-name order; bit-reproducible."""
    total = 0.0
    for name in sorted(values):
        if name in (CHECKSUM_VARIABLE, "global_step"):
            continue
        total += float(np.sum(values[name]))
    return total


def _snapshot_from_shards(runtime: ClusterRuntime,
                          placement: Dict[str, int]) -> Dict[str, np.ndarray]:
    return {name: runtime.pull(placement, name) for name in placement}


def _leader_save(store: CheckpointStore, runtime: ClusterRuntime,
                 placement: Dict[str, int]) -> int:
    """Pull a snapshot, stamp it with its checksum, and write a checkpoint."""
    snapshot = _snapshot_from_shards(runtime, placement)
    step = int(snapshot["global_step"])
    snapshot[CHECKSUM_VARIABLE] = np.asarray(_parameter_checksum(snapshot))
    store.save(snapshot, step)
    return step


def verify_checksum(variables: Dict[str, np.ndarray]) -> None:
    """Recompute the stored parameter checksum; raise on any difference."""
    if CHECKSUM_VARIABLE not in variables:
        return
    stored = float(variables[CHECKSUM_VARIABLE])
    recomputed = _parameter_checksum(variables)
    if stored != recomputed:
        raise ChecksumMismatchError(
            f"parameter checksum mismatch: checkpoint says {stored!r}, "
            f"loaded parameters sum to {recomputed!r}")


def run_worker(worker_index: int, experiment: Experiment,
               runtime: ClusterRuntime) -> int:
    """One worker's between-graph training loop; returns batches processed.

    Worker 0 is the leader: it publishes initial values (resuming from the
    latest checkpoint when one exists) before anyone else starts, and it is
    the only task that ever writes checkpoints.
    """
    if not 0 <= worker_index < runtime.spec.num_workers:
        raise ConfigError(
            f"worker index {worker_index} out of range for "
            f"{runtime.spec.num_workers} workers")
    estimator = experiment.estimator
    graph, plumbing, spec, _ = estimator._build(experiment.train_input_fn,
                                                Mode.TRAIN)
    placement = assign_variables(list(graph.variables), runtime.spec.num_ps)

    store = None
    if worker_index == 0:
        estimator._restore(graph, required=False)
        store = CheckpointStore(estimator.config.model_dir,
                                estimator.config.keep_checkpoint_max)
        store.claim_writer(LEADER_WRITER_ID)
        for name, variable in graph.variables.items():
            runtime.shards[placement[name]].publish(name, variable.value)
        runtime.initialized.set()

    executor = Executor(graph)
    kill = runtime.kill_switches[worker_index]
    while not runtime.initialized.wait(0.02):
        if kill.is_set() or runtime.abort.is_set():
            return 0  # the leader never came up; nothing to resume from
    save_every = estimator.config.save_checkpoints_steps
    last_saved = graph.global_step  # resumed runs restart the save cadence
    processed = 0
    batches = iter(experiment.train_input_fn())

    while not (kill.is_set() or runtime.abort.is_set()):
        pulled = {name: runtime.pull(placement, name) for name in placement}
        if int(pulled["global_step"]) >= experiment.train_steps:
            break
        for name, value in pulled.items():
            graph.variables[name].assign(value)
        try:
            batch = next(batches)
        except StopIteration:
            batches = iter(experiment.train_input_fn())
            try:
                batch = next(batches)
            except StopIteration:
                raise ValueError("experiment: train_input_fn yielded no batches")
        features, labels = split_batch(batch)
        feed = plumbing.feed_for_batch(features, labels)
        executor.run([spec.loss, spec.train_op], feed=feed)
        processed += 1
        committed_step = 0
        for name in placement:
            result = runtime.shards[placement[name]].apply_update(
                name, pulled[name], graph.variables[name].value)
            if name == "global_step":
                committed_step = int(result)
        if store is not None and committed_step // save_every > last_saved // save_every:
            last_saved = _leader_save(store, runtime, placement)
    return processed


def run_evaluator(experiment: Experiment, runtime: ClusterRuntime) -> Optional[dict]:
    """Poll for new checkpoints and evaluate each at most once.

    Every evaluation loads one complete checkpoint file, verifies its
    parameter checksum, and appends an eval record tagged with that
    checkpoint's global step. Corrupt or partial files are skipped and the
    poll continues. Returns the metrics of the last evaluation.
    """
    estimator = experiment.estimator
    store = CheckpointStore(estimator.config.model_dir)
    seen = set()
    last_result = None
    while True:
        stopping = runtime.training_done.is_set()
        path = store.latest_path()
        if path is not None:
            try:
                checkpoint = restore_checkpoint(path)
            except CorruptCheckpointError:
                checkpoint = None  # partial write or damage: skip, re-poll
            if checkpoint is not None and checkpoint.global_step not in seen:
                verify_checksum(checkpoint.variables)
                result = estimator.evaluate(experiment.eval_input_fn,
                                            checkpoint_path=path)
                seen.add(checkpoint.global_step)
                last_result = result
        if stopping:
            return last_result
        runtime.training_done.wait(experiment.eval_every)


def train_and_evaluate(experiment: Experiment, cluster_spec: ClusterSpec,
                       runtime: Optional[ClusterRuntime] = None) -> dict:
    """Run the whole cluster in-process and return the final eval metrics.

    Parameter-server shards live as shared services; each worker and the
    evaluator run as a concurrent task. Returns once the global step budget
    is reached and the final checkpoint has been evaluated. The first worker
    failure propagates after the remaining tasks shut down cleanly.
    """
    runtime = runtime or ClusterRuntime(cluster_spec)
    errors: Dict[str, BaseException] = {}
    eval_result: Dict[str, Optional[dict]] = {"metrics": None}

    def worker_target(index):
        try:
            run_worker(index, experiment, runtime)
        except BaseException as exc:  # noqa: BLE001 - reported after join
            errors.setdefault(f"worker-{index}", exc)
            runtime.abort.set()  # peers shut down cleanly, then we re-raise

    def evaluator_target():
        try:
            eval_result["metrics"] = run_evaluator(experiment, runtime)
        except BaseException as exc:  # noqa: BLE001 - reported after join
            errors.setdefault("evaluator", exc)

    workers = [threading.Thread(target=worker_target, args=(i,),
                                name=f"worker-{i}")
               for i in range(cluster_spec.num_workers)]
    evaluator = (threading.Thread(target=evaluator_target, name="evaluator")
                 if cluster_spec.evaluator else None)
    for thread in workers:
        thread.start()
    if evaluator is not None:
        evaluator.start()
    for thread in workers:
        thread.join()

    worker_errors = [errors[key] for key in sorted(errors) if key.startswith("worker")]
    if not worker_errors:
        # The leader's final save reflects the cluster's terminal state.
        placement = {name: shard.index
                     for shard in runtime.shards for name in shard.owned()}
        store = CheckpointStore(experiment.estimator.config.model_dir,
                                experiment.estimator.config.keep_checkpoint_max)
        store.claim_writer(LEADER_WRITER_ID)
        _leader_save(store, runtime, placement)
    runtime.training_done.set()
    if evaluator is not None:
        evaluator.join()
    if worker_errors:
        raise worker_errors[0]
    if "evaluator" in errors:
        raise errors["evaluator"]
    if cluster_spec.evaluator:
        return eval_result["metrics"] or {}
    return experiment.estimator.evaluate(experiment.eval_input_fn)


# ---------------------------------------------------------------------------
# Runner: one binary, role picked by environment
# ---------------------------------------------------------------------------

def run_config_from_env(env: Optional[dict] = None) -> RunConfig:
    """Build a RunConfig from the ESTIMATOR_RUN_CONFIG JSON variable."""
    env = os.environ if env is None else env
    raw = env.get(RUN_CONFIG_ENV)
    if raw is None:
        raise ConfigError(f"{RUN_CONFIG_ENV} not set")
    try:
        parsed = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{RUN_CONFIG_ENV} is not valid JSON: {exc}") from exc
    if not isinstance(parsed, dict):
        raise ConfigError(f"{RUN_CONFIG_ENV} must be a JSON object")
    cluster = parsed.get("cluster", {})
    task = parsed.get("task", {})
    kwargs = {
        "model_dir": parsed.get("model_dir", ""),
        "task": {"type": task.get("type", "local"), "index": task.get("index", 0)},
        "cluster": {"num_ps": cluster.get("ps", 0),
                    "num_workers": cluster.get("worker", 0)},
    }
    if "save_checkpoints_steps" in parsed:
        kwargs["save_checkpoints_steps"] = parsed["save_checkpoints_steps"]
    if "seed" in parsed:
        kwargs["seed"] = parsed["seed"]
    return RunConfig(**kwargs)


def _serve_shard(config: RunConfig, experiment: Experiment,
                 runtime: ClusterRuntime):
    shard = runtime.shards[config.task["index"]]
    runtime.shutdown.wait()
    return shard


def runner(env: Optional[dict], experiment: Experiment,
           runtime: Optional[ClusterRuntime] = None,
           handlers: Optional[dict] = None):
    """Dispatch this task to its role, as named by ESTIMATOR_RUN_CONFIG.

    All roles share one binary; the environment variable decides whether
    this invocation trains, serves a shard, or evaluates. The in-process
    runtime carries the shared shards; every task of one cluster must be
    handed the same runtime object.
    """
    config = run_config_from_env(env)
    role = config.task["type"]
    if runtime is None:
        runtime = ClusterRuntime(ClusterSpec(
            num_ps=max(config.cluster["num_ps"], 1),
            num_workers=max(config.cluster["num_workers"], 1),
            evaluator=True))
    handler = (handlers or {}).get(role)
    if handler is not None:
        return handler(config, experiment, runtime)
    if role == "worker":
        return run_worker(config.task["index"], experiment, runtime)
    if role == "evaluator":
        return run_evaluator(experiment, runtime)
    if role == "ps":
        return _serve_shard(config, experiment, runtime)
    # local: plain single-task training plus one evaluation
    experiment.estimator.train(experiment.train_input_fn,
                               max_steps=experiment.train_steps)
    return experiment.estimator.evaluate(experiment.eval_input_fn)


# ---------------------------------------------------------------------------
# Scaling measurement
# ---------------------------------------------------------------------------

def measure_steps_per_sec(experiment: Experiment, num_workers: int,
                          duration: float, num_ps: int = 1) -> float:
    """Run the cluster for a wall-time budget; report global steps per second."""
    spec = ClusterSpec(num_ps=num_ps, num_workers=num_workers, evaluator=False)
    runtime = ClusterRuntime(spec)
    timer = threading.Timer(
        duration, lambda: [kill.set() for kill in runtime.kill_switches.values()])
    started = time.monotonic()
    timer.start()
    try:
        threads = [threading.Thread(target=run_worker,
                                    args=(i, experiment, runtime))
                   for i in range(num_workers)]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
    finally:
        timer.cancel()
    elapsed = time.monotonic() - started
    return runtime.global_step() / max(elapsed, 1e-9)


def benchmark_scaling(experiment_factory: Callable[[int], Experiment],
                      worker_counts: Sequence[int],
                      duration: float = 1.0, num_ps: int = 1) -> List[dict]:
    """Measure steps/sec per worker count; speedups are relative to the
    first measured count (conventionally 1)."""
    if not worker_counts:
        raise ConfigError("benchmark: worker_counts must be non-empty")
    rows = []
    base = None
    for count in worker_counts:
        rate = measure_steps_per_sec(experiment_factory(count), count,
                                     duration, num_ps)
        if base is None:
            base = rate
        rows.append({"workers": count, "steps_per_sec": rate,
                     "speedup_vs_1": rate / base if base else 0.0})
    return rows
