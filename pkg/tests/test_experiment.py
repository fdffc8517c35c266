"""Distributed simulation: shard atomicity, async workers, leader, evaluator."""
import json
import threading
import time

import numpy as np
import pytest

from estkit import feature_columns as fc
from estkit.canned import LinearRegressor
from estkit.checkpoint import CheckpointStore, restore_checkpoint
from estkit.errors import ConfigError
from estkit.estimator import EVAL_RECORDS_FILE, RunConfig
from estkit.experiment import (CHECKSUM_VARIABLE, LEADER_WRITER_ID,
                               ChecksumMismatchError, ClusterRuntime,
                               ClusterSpec, Experiment, ParameterServerShard,
                               assign_variables, benchmark_scaling,
                               measure_steps_per_sec, run_config_from_env,
                               run_evaluator, run_worker, runner,
                               train_and_evaluate, verify_checksum)
from estkit.hooks import Hook
from estkit.modes import Mode


def convex_batches(n_batches=40, batch_size=16, seed=21):
    """Noise-free least squares: y = 2 x0 - 3 x1 + 1."""
    rng = np.random.default_rng(seed)
    batches = []
    for _ in range(n_batches):
        x = rng.normal(size=(batch_size, 2))
        batches.append(({"x": x}, {"label": 2.0 * x[:, 0] - 3.0 * x[:, 1] + 1.0}))
    return batches


def convex_experiment(tmp_path, name, train_steps, batches=None,
                      eval_every=0.02, lr=0.1, **config_kwargs):
    batches = batches if batches is not None else convex_batches()
    estimator = LinearRegressor(
        [fc.numeric_column("x", dim=2)],
        config=RunConfig(model_dir=str(tmp_path / name), **config_kwargs),
        optimizer={"kind": "sgd", "learning_rate": lr})
    return Experiment(estimator=estimator,
                      train_input_fn=lambda: iter(list(batches)),
                      eval_input_fn=lambda: iter(list(batches[:5])),
                      train_steps=train_steps, eval_every=eval_every)


def checkpoint_payload(path, drop_checksum=True):
    variables = restore_checkpoint(path).variables
    return {name: arr.tobytes() for name, arr in variables.items()
            if not (drop_checksum and name == CHECKSUM_VARIABLE)}


def eval_record_steps(model_dir):
    path = model_dir / EVAL_RECORDS_FILE
    if not path.exists():
        return []
    return [json.loads(line)["global_step"]
            for line in path.read_text().strip().splitlines()]


# ---------------------------------------------------------------------------
# Placement and shard semantics
# ---------------------------------------------------------------------------

def test_round_robin_placement():
    assert assign_variables(["a", "b", "c", "d"], 2) == {
        "a": 0, "b": 1, "c": 0, "d": 1}
    assert assign_variables(["a", "b", "c"], 1) == {"a": 0, "b": 0, "c": 0}
    first = assign_variables(["g", "w", "b"], 3)
    second = assign_variables(["g", "w", "b"], 3)
    assert first == second


def test_placement_is_identical_across_worker_graphs(tmp_path):
    experiment = convex_experiment(tmp_path, "m", train_steps=1)
    placements = []
    for _ in range(2):
        graph, _, _, _ = experiment.estimator._build(
            experiment.train_input_fn, Mode.TRAIN)
        placements.append(assign_variables(list(graph.variables), 2))
    assert placements[0] == placements[1]
    assert placements[0]["global_step"] == 0  # first created, shard 0


def test_shard_pull_returns_an_isolated_copy():
    shard = ParameterServerShard(0)
    shard.publish("w", np.array([1.0, 2.0]))
    pulled = shard.pull("w")
    pulled[0] = 99.0
    assert shard.pull("w")[0] == 1.0


def test_shard_unknown_variable():
    shard = ParameterServerShard(0)
    with pytest.raises(KeyError, match="unknown variable"):
        shard.pull("w")


def test_apply_update_uncontended_stores_the_new_value_exactly():
    shard = ParameterServerShard(0)
    value = np.array([0.1, 0.2, 0.3])
    shard.publish("w", value)
    pulled = shard.pull("w")
    new = pulled * 1.37 + 0.011
    result = shard.apply_update("w", pulled, new)
    assert result.tobytes() == new.tobytes()
    assert shard.pull("w").tobytes() == new.tobytes()


def test_apply_update_contended_adds_the_delta():
    shard = ParameterServerShard(0)
    shard.publish("w", np.array([1.0, 1.0]))
    stale = shard.pull("w")
    shard.apply_update("w", stale, stale + 10.0)  # someone else moved first
    result = shard.apply_update("w", stale, stale + np.array([1.0, 2.0]))
    np.testing.assert_array_equal(result, [12.0, 13.0])


def test_concurrent_updates_preserve_per_variable_atomicity():
    # Every update adds 1 to every element; torn writes would desynchronize
    # the elements. A racing reader checks uniformity throughout.
    shard = ParameterServerShard(0)
    shard.publish("w", np.zeros(64))
    n_threads, n_updates = 8, 50
    torn = []
    stop = threading.Event()

    def reader():
        while not stop.is_set():
            value = shard.pull("w")
            if not np.all(value == value[0]):
                torn.append(value.copy())

    def writer():
        for _ in range(n_updates):
            pulled = shard.pull("w")
            shard.apply_update("w", pulled, pulled + 1.0)

    watcher = threading.Thread(target=reader)
    watcher.start()
    threads = [threading.Thread(target=writer) for _ in range(n_threads)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    stop.set()
    watcher.join()
    assert torn == []
    np.testing.assert_array_equal(shard.pull("w"),
                                  np.full(64, float(n_threads * n_updates)))


def test_checksum_round_trip_and_mismatch():
    values = {"a": np.array([1.0, 2.0]), "b": np.array([[3.0]]),
              "global_step": np.asarray(7.0)}
    from estkit.experiment import _parameter_checksum

    values[CHECKSUM_VARIABLE] = np.asarray(_parameter_checksum(values))
    verify_checksum(values)  # no raise
    values["a"] = values["a"] + 1e-9
    with pytest.raises(ChecksumMismatchError, match="checksum mismatch"):
        verify_checksum(values)
    verify_checksum({"a": np.zeros(2)})  # absent checksum: nothing to verify


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def test_cluster_spec_validation():
    with pytest.raises(ConfigError, match="num_ps"):
        ClusterSpec(num_ps=0)
    with pytest.raises(ConfigError, match="num_workers"):
        ClusterSpec(num_workers=0)


def test_experiment_validation(tmp_path):
    estimator = LinearRegressor([fc.numeric_column("x", dim=2)],
                                config=RunConfig(model_dir=str(tmp_path / "m")))
    input_fn = lambda: iter([])  # noqa: E731
    with pytest.raises(ConfigError, match="input_fn"):
        Experiment(estimator, None, input_fn, 1)
    with pytest.raises(ConfigError, match="train_steps"):
        Experiment(estimator, input_fn, input_fn, -1)
    with pytest.raises(ConfigError, match="eval_every"):
        Experiment(estimator, input_fn, input_fn, 1, eval_every=0)


# ---------------------------------------------------------------------------
# Workers
# ---------------------------------------------------------------------------

def test_one_worker_matches_local_training_bit_for_bit(tmp_path):
    steps = 12
    batches = convex_batches(n_batches=steps)

    local = convex_experiment(tmp_path, "local", steps, batches)
    local.estimator.train(local.train_input_fn, max_steps=steps)

    distributed = convex_experiment(tmp_path, "dist", steps, batches)
    train_and_evaluate(distributed, ClusterSpec(num_ps=1, num_workers=1))

    local_payload = checkpoint_payload(local.estimator.latest_checkpoint())
    dist_payload = checkpoint_payload(distributed.estimator.latest_checkpoint())
    assert dist_payload == local_payload


def test_final_global_step_counts_every_batch(tmp_path):
    experiment = convex_experiment(tmp_path, "m", train_steps=40, lr=0.01)
    spec = ClusterSpec(num_ps=2, num_workers=4)
    runtime = ClusterRuntime(spec)
    processed = {}

    def target(index):
        processed[index] = run_worker(index, experiment, runtime)

    threads = [threading.Thread(target=target, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    final = runtime.global_step()
    assert final == sum(processed.values())
    assert 40 <= final <= 43  # overshoot bounded by in-flight workers


def test_worker_index_out_of_range(tmp_path):
    experiment = convex_experiment(tmp_path, "m", train_steps=1)
    runtime = ClusterRuntime(ClusterSpec(num_ps=1, num_workers=2))
    with pytest.raises(ConfigError, match="out of range"):
        run_worker(5, experiment, runtime)


def test_worker_failure_propagates_after_clean_shutdown(tmp_path):
    experiment = convex_experiment(tmp_path, "m", train_steps=10_000)
    calls = {"n": 0}
    original_train = experiment.train_input_fn

    def flaky_input_fn():
        calls["n"] += 1
        if calls["n"] == 2:  # the second worker to start gets a broken input
            raise RuntimeError("input pipeline exploded")
        return original_train()

    experiment.train_input_fn = flaky_input_fn
    with pytest.raises(RuntimeError, match="input pipeline exploded"):
        train_and_evaluate(experiment, ClusterSpec(num_ps=1, num_workers=3))


# ---------------------------------------------------------------------------
# Leader
# ---------------------------------------------------------------------------

def test_leader_is_the_only_checkpoint_writer(tmp_path):
    experiment = convex_experiment(tmp_path, "m", train_steps=20,
                                   save_checkpoints_steps=10)
    train_and_evaluate(experiment, ClusterSpec(num_ps=1, num_workers=3))
    model_dir = experiment.estimator.model_dir
    marker = model_dir / "checkpoint_writer"
    assert marker.read_text().strip() == LEADER_WRITER_ID
    with pytest.raises(RuntimeError, match="checkpoint"):
        CheckpointStore(model_dir).claim_writer("worker-1")


def test_distributed_run_resumes_from_checkpoint(tmp_path):
    batches = convex_batches(n_batches=30)
    experiment = convex_experiment(tmp_path, "m", 10, batches)
    train_and_evaluate(experiment, ClusterSpec(num_ps=1, num_workers=1))
    assert restore_checkpoint(
        experiment.estimator.latest_checkpoint()).global_step == 10

    longer = convex_experiment(tmp_path, "m", 20, batches)
    train_and_evaluate(longer, ClusterSpec(num_ps=1, num_workers=1))
    assert restore_checkpoint(
        longer.estimator.latest_checkpoint()).global_step == 20


# ---------------------------------------------------------------------------
# Evaluator
# ---------------------------------------------------------------------------

def test_evaluator_records_a_subset_including_the_last(tmp_path):
    experiment = convex_experiment(tmp_path, "m", train_steps=100,
                                   save_checkpoints_steps=25,
                                   keep_checkpoint_max=10, eval_every=0.005)
    result = train_and_evaluate(experiment,
                                ClusterSpec(num_ps=1, num_workers=1,
                                            evaluator=True))
    steps = eval_record_steps(experiment.estimator.model_dir)
    assert steps, "evaluator never recorded anything"
    assert set(steps) <= {25, 50, 75, 100}
    assert steps[-1] == 100
    assert len(steps) == len(set(steps))  # no duplicate evaluations
    assert result["global_step"] == 100


def test_evaluator_skips_corrupt_checkpoints(tmp_path):
    experiment = convex_experiment(tmp_path, "m", train_steps=4, eval_every=0.005)
    estimator = experiment.estimator

    # Produce two checkpoints, then corrupt the newest on disk.
    estimator.train(experiment.train_input_fn, max_steps=4)
    store = CheckpointStore(estimator.model_dir, keep_max=10)
    graph, _, _, _ = estimator._build(experiment.train_input_fn, Mode.TRAIN)
    estimator._restore(graph, required=False)

    def snapshot_at(step):
        values = {n: v.value for n, v in graph.variables.items()}
        values["global_step"] = np.asarray(float(step))
        return values

    store.save(snapshot_at(9), 9)
    bad = estimator.model_dir / "model.ckpt-9.estckpt"
    raw = bytearray(bad.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    bad.write_bytes(bytes(raw))

    runtime = ClusterRuntime(ClusterSpec(num_ps=1, num_workers=1, evaluator=True))
    holder = {}

    def evaluate():
        holder["result"] = run_evaluator(experiment, runtime)

    thread = threading.Thread(target=evaluate)
    thread.start()
    time.sleep(0.08)  # several polls: the corrupt step 9 must be skipped
    store.save(snapshot_at(10), 10)
    runtime.training_done.set()
    thread.join(timeout=10)
    assert not thread.is_alive()
    steps = eval_record_steps(estimator.model_dir)
    assert 9 not in steps
    assert steps[-1] == 10
    assert holder["result"]["global_step"] == 10


def test_checksums_hold_under_worker_churn(tmp_path):
    experiment = convex_experiment(tmp_path, "m", train_steps=120,
                                   save_checkpoints_steps=20,
                                   keep_checkpoint_max=20,
                                   eval_every=0.002, lr=0.02)
    spec = ClusterSpec(num_ps=2, num_workers=4, evaluator=True)
    runtime = ClusterRuntime(spec)

    def killer():
        schedule = [(30, 1), (60, 2), (90, 3)]
        while schedule and not runtime.training_done.is_set():
            if runtime.initialized.is_set() and (
                    runtime.global_step() >= schedule[0][0]):
                runtime.kill_switches[schedule.pop(0)[1]].set()
            time.sleep(0.001)

    chaos = threading.Thread(target=killer)
    chaos.start()
    result = train_and_evaluate(experiment, spec, runtime=runtime)
    chaos.join()
    assert result["global_step"] >= 120

    # Every retained checkpoint passes its own checksum, bit for bit.
    store = CheckpointStore(experiment.estimator.model_dir)
    for step in store.retained_steps():
        path = experiment.estimator.model_dir / f"model.ckpt-{step}.estckpt"
        verify_checksum(restore_checkpoint(path).variables)


def test_zero_train_steps_evaluates_the_initial_checkpoint(tmp_path):
    experiment = convex_experiment(tmp_path, "m", train_steps=0)
    result = train_and_evaluate(experiment,
                                ClusterSpec(num_ps=1, num_workers=2,
                                            evaluator=True))
    assert result["global_step"] == 0
    assert eval_record_steps(experiment.estimator.model_dir) == [0]


# ---------------------------------------------------------------------------
# Convergence
# ---------------------------------------------------------------------------

def test_single_worker_cluster_converges(tmp_path):
    experiment = convex_experiment(tmp_path, "m", train_steps=300)
    result = train_and_evaluate(experiment,
                                ClusterSpec(num_ps=1, num_workers=1,
                                            evaluator=True))
    assert result["average_loss"] < 1e-3


def test_killed_worker_does_not_derail_convergence(tmp_path):
    steps = 300
    baseline = convex_experiment(tmp_path, "baseline", steps)
    smooth = train_and_evaluate(baseline, ClusterSpec(num_ps=1, num_workers=4))

    churned = convex_experiment(tmp_path, "churned", steps)
    spec = ClusterSpec(num_ps=1, num_workers=4)
    runtime = ClusterRuntime(spec)

    def kill_at_half():
        while not runtime.initialized.wait(0.001):
            pass
        while runtime.global_step() < steps // 2:
            time.sleep(0.001)
        runtime.kill_switches[2].set()

    chaos = threading.Thread(target=kill_at_half)
    chaos.start()
    rough = train_and_evaluate(churned, spec, runtime=runtime)
    chaos.join()

    # Thread scheduling makes the exact step split nondeterministic, so the
    # two losses land at different depths of "numerically zero"; the floor
    # is the convergence threshold for this noise-free problem, and a run
    # the churn actually derailed would sit orders of magnitude above it.
    a, b = smooth["average_loss"], rough["average_loss"]
    assert abs(a - b) <= 0.1 * max(a, b) + 1e-6


def test_async_staleness_costs_at_most_2x_the_serial_budget(tmp_path):
    batches = convex_batches(n_batches=400)

    class LossTrace(Hook):
        def __init__(self):
            self.history = []

        def after_run(self, run_context, results):
            self.history.append((run_context.global_step, run_context.last_loss))

    serial = convex_experiment(tmp_path, "serial", 400, batches, lr=0.05)
    trace = LossTrace()
    serial.estimator.train(serial.train_input_fn, max_steps=400, hooks=[trace])
    serial_budget = next(step for step, loss in trace.history if loss < 1e-2)

    asynchronous = convex_experiment(tmp_path, "async", 2 * serial_budget,
                                     batches, lr=0.05)
    result = train_and_evaluate(asynchronous, ClusterSpec(num_ps=2, num_workers=4))
    assert result["average_loss"] < 1e-2


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------

def test_run_config_from_env_parses_every_field():
    env = {"ESTIMATOR_RUN_CONFIG": json.dumps({
        "cluster": {"ps": 2, "worker": 3},
        "task": {"type": "worker", "index": 1},
        "model_dir": "/tmp/m", "save_checkpoints_steps": 50, "seed": 9})}
    config = run_config_from_env(env)
    assert config.model_dir == "/tmp/m"
    assert config.save_checkpoints_steps == 50
    assert config.seed == 9
    assert config.task == {"type": "worker", "index": 1}
    assert config.cluster == {"num_ps": 2, "num_workers": 3}


def test_run_config_from_env_errors():
    with pytest.raises(ConfigError, match="ESTIMATOR_RUN_CONFIG not set"):
        run_config_from_env({})
    with pytest.raises(ConfigError, match="not valid JSON"):
        run_config_from_env({"ESTIMATOR_RUN_CONFIG": "{nope"})
    out_of_range = json.dumps({"cluster": {"ps": 1, "worker": 2},
                               "task": {"type": "worker", "index": 5},
                               "model_dir": "/tmp/m"})
    with pytest.raises(ConfigError, match="out of range"):
        run_config_from_env({"ESTIMATOR_RUN_CONFIG": out_of_range})


def runner_env(task_type, index, model_dir, ps=1, worker=1):
    return {"ESTIMATOR_RUN_CONFIG": json.dumps({
        "cluster": {"ps": ps, "worker": worker},
        "task": {"type": task_type, "index": index},
        "model_dir": str(model_dir)})}


def test_runner_dispatches_worker_role(tmp_path):
    experiment = convex_experiment(tmp_path, "m", train_steps=5)
    runtime = ClusterRuntime(ClusterSpec(num_ps=1, num_workers=1))
    env = runner_env("worker", 0, experiment.estimator.model_dir)
    processed = runner(env, experiment, runtime=runtime)
    assert processed == 5
    assert runtime.global_step() == 5


def test_runner_dispatches_evaluator_role(tmp_path):
    experiment = convex_experiment(tmp_path, "m", train_steps=6)
    experiment.estimator.train(experiment.train_input_fn, max_steps=6)
    runtime = ClusterRuntime(ClusterSpec(num_ps=1, num_workers=1, evaluator=True))
    runtime.training_done.set()  # one final sweep, then return
    env = runner_env("evaluator", 0, experiment.estimator.model_dir)
    result = runner(env, experiment, runtime=runtime)
    assert result["global_step"] == 6


def test_runner_ps_role_serves_until_shutdown(tmp_path):
    experiment = convex_experiment(tmp_path, "m", train_steps=1)
    runtime = ClusterRuntime(ClusterSpec(num_ps=2, num_workers=1))
    env = runner_env("ps", 1, experiment.estimator.model_dir, ps=2)
    holder = {}

    def serve():
        holder["shard"] = runner(env, experiment, runtime=runtime)

    thread = threading.Thread(target=serve)
    thread.start()
    time.sleep(0.05)
    assert thread.is_alive()  # still serving
    runtime.shutdown.set()
    thread.join(timeout=5)
    assert not thread.is_alive()
    assert holder["shard"].index == 1


def test_runner_handler_override(tmp_path):
    experiment = convex_experiment(tmp_path, "m", train_steps=1)
    seen = {}

    def spy(config, exp, runtime):
        seen["role"] = config.task["type"]
        return "spied"

    env = runner_env("evaluator", 0, experiment.estimator.model_dir)
    assert runner(env, experiment, handlers={"evaluator": spy}) == "spied"
    assert seen["role"] == "evaluator"


# ---------------------------------------------------------------------------
# Scaling measurement
# ---------------------------------------------------------------------------

def test_measure_steps_per_sec_is_positive(tmp_path):
    experiment = convex_experiment(tmp_path, "m", train_steps=10**9)
    rate = measure_steps_per_sec(experiment, num_workers=1, duration=0.2)
    assert rate > 0


def test_benchmark_scaling_baseline_speedup(tmp_path):
    def factory(count):
        return convex_experiment(tmp_path, f"bench-{count}", train_steps=10**9)

    rows = benchmark_scaling(factory, [1], duration=0.2)
    assert len(rows) == 1
    assert rows[0]["workers"] == 1
    assert rows[0]["speedup_vs_1"] == 1.0
    with pytest.raises(ConfigError, match="non-empty"):
        benchmark_scaling(factory, [])
