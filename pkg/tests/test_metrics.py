"""Streaming metrics: partition invariance and the accumulator contract."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from estkit import Executor, ExecutionError, Graph
from estkit import metrics


def build_metric(make):
    g = Graph(seed=0)
    with g.as_default():
        pair, feeds = make(g)
    return g, Executor(g), pair, feeds


def test_accuracy_across_two_batches():
    g = Graph(seed=0)
    with g.as_default():
        labels = g.placeholder("labels", (None,), dtype="int")
        scores = g.placeholder("scores", (None, 2))
        pair = metrics.accuracy(labels, scores)
    ex = Executor(g)
    # 1 of 2 correct, then 2 of 2 correct.
    ex.run(pair.update, feed={labels: [0, 1], scores: [[1.0, 0.0], [1.0, 0.0]]})
    ex.run(pair.update, feed={labels: [0, 1], scores: [[9.0, 0.0], [0.0, 9.0]]})
    assert float(ex.run(pair.value)) == 0.75


def test_mean_with_mask_weights():
    g = Graph(seed=0)
    with g.as_default():
        values = g.placeholder("values", (None,))
        weights = g.placeholder("weights", (None,))
        pair = metrics.mean(values, weights)
    ex = Executor(g)
    ex.run(pair.update, feed={values: [1.0, 3.0], weights: [1.0, 0.0]})
    assert float(ex.run(pair.value)) == 1.0


def test_value_before_any_update_errors():
    g = Graph(seed=0)
    with g.as_default():
        values = g.placeholder("values", (None,))
        pair = metrics.mean(values)
    with pytest.raises(ExecutionError, match="no data accumulated"):
        Executor(g).run(pair.value)


def test_streaming_equals_single_pass_over_random_batches():
    r = np.random.default_rng(5)
    batches = [r.normal(size=r.integers(1, 7)) for _ in range(10)]
    weights = [r.uniform(0.0, 2.0, size=len(b)) for b in batches]
    g = Graph(seed=0)
    with g.as_default():
        values_ph = g.placeholder("values", (None,))
        weights_ph = g.placeholder("weights", (None,))
        pair = metrics.mean(values_ph, weights_ph)
    ex = Executor(g)
    for b, w in zip(batches, weights):
        ex.run(pair.update, feed={values_ph: b, weights_ph: w})
    all_v = np.concatenate(batches)
    all_w = np.concatenate(weights)
    oracle = np.sum(all_v * all_w) / np.sum(all_w)
    assert abs(float(ex.run(pair.value)) - oracle) < 1e-12


def test_mse_metric_streaming_equals_single_pass():
    r = np.random.default_rng(6)
    g = Graph(seed=0)
    with g.as_default():
        labels = g.placeholder("labels", (None, 2))
        preds = g.placeholder("preds", (None, 2))
        pair = metrics.mean_squared_error(labels, preds)
    ex = Executor(g)
    all_l, all_p = [], []
    for _ in range(6):
        n = int(r.integers(1, 5))
        lb = r.normal(size=(n, 2))
        pd = r.normal(size=(n, 2))
        all_l.append(lb)
        all_p.append(pd)
        ex.run(pair.update, feed={labels: lb, preds: pd})
    lcat, pcat = np.concatenate(all_l), np.concatenate(all_p)
    oracle = np.mean(np.mean((pcat - lcat) ** 2, axis=1))
    assert abs(float(ex.run(pair.value)) - oracle) < 1e-12


def test_accuracy_rank1_binary_predictions():
    g = Graph(seed=0)
    with g.as_default():
        labels = g.placeholder("labels", (None,))
        preds = g.placeholder("preds", (None,))
        pair = metrics.accuracy(labels, preds)
    ex = Executor(g)
    ex.run(pair.update, feed={labels: [1.0, 0.0, 1.0], preds: [1.0, 1.0, 1.0]})
    assert float(ex.run(pair.value)) == pytest.approx(2.0 / 3.0)


def test_update_returns_no_value():
    g = Graph(seed=0)
    with g.as_default():
        values = g.placeholder("values", (None,))
        pair = metrics.mean(values)
    out = Executor(g).run(pair.update, feed={values: [1.0]})
    assert float(out) == 0.0  # dummy scalar, not the metric


def test_two_metrics_do_not_share_accumulators():
    g = Graph(seed=0)
    with g.as_default():
        values = g.placeholder("values", (None,))
        pair1 = metrics.mean(values)
        pair2 = metrics.mean(values)
    ex = Executor(g)
    ex.run(pair1.update, feed={values: [2.0]})
    ex.run(pair2.update, feed={values: [10.0]})
    assert float(ex.run(pair1.value)) == 2.0
    assert float(ex.run(pair2.value)) == 10.0


def test_metric_dispatcher():
    g = Graph(seed=0)
    with g.as_default():
        labels = g.placeholder("labels", (None,), dtype="int")
        scores = g.placeholder("scores", (None, 2))
        pair = metrics.metric("accuracy", labels, scores)
    ex = Executor(g)
    ex.run(pair.update, feed={labels: [1], scores: [[0.0, 1.0]]})
    assert float(ex.run(pair.value)) == 1.0
    with pytest.raises(ValueError, match="unknown metric kind"):
        with g.as_default():
            metrics.metric("f1", labels, scores)


@given(st.lists(st.floats(min_value=-100, max_value=100), min_size=1, max_size=20),
       st.data())
@settings(deadline=None, max_examples=50)
def test_partition_invariance(values, data):
    # Any split of the stream into batches yields the same final value.
    cuts = sorted(data.draw(st.lists(
        st.integers(1, max(1, len(values) - 1)), max_size=4, unique=True)))
    parts, prev = [], 0
    for c in cuts + [len(values)]:
        if c > prev:
            parts.append(values[prev:c])
            prev = c

    def run_stream(batches):
        g = Graph(seed=0)
        with g.as_default():
            ph = g.placeholder("values", (None,))
            pair = metrics.mean(ph)
        ex = Executor(g)
        for b in batches:
            ex.run(pair.update, feed={ph: np.asarray(b)})
        return float(ex.run(pair.value))

    assert run_stream(parts) == pytest.approx(run_stream([values]), abs=1e-9)
