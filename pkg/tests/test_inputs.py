"""Input plumbing: batch typing, placeholder creation, binding replay."""
import numpy as np
import pytest

from estkit import Executor, Graph
from estkit import feature_columns as fc
from estkit import inputs, ops
from estkit.errors import ExecutionError
from estkit.feature_columns import RawFeature


def test_split_batch_forms():
    features, labels = inputs.split_batch({"x": [1.0]})
    assert labels is None
    features, labels = inputs.split_batch(({"x": [1.0]}, {"label": [0]}))
    assert labels == {"label": [0]}
    with pytest.raises(ValueError, match="pairs"):
        inputs.split_batch(({}, {}, {}))
    with pytest.raises(TypeError, match="features must be a dict"):
        inputs.split_batch([1, 2])
    with pytest.raises(TypeError, match="labels must be a dict"):
        inputs.split_batch(({"x": [1.0]}, [0]))


@pytest.mark.parametrize("value,expected", [
    (np.array([1.0, 2.0]), "dense"),
    (np.array([1, 2]), "dense"),
    (np.array(["a", "b"]), "categorical"),
    ([1.0, 2.0], "dense"),
    ([[1.0], [2.0]], "categorical"),  # nested lists mean multi-valued categories
    (["a", "b"], "categorical"),
    ([["a"], ["b", "c"]], "categorical"),
    ([[], []], "categorical"),
])
def test_feature_classification(value, expected):
    assert inputs._classify("f", value) == expected


def test_dense_features_become_float_placeholders():
    g = Graph(seed=0)
    plumbing = inputs.InputPlumbing(g, {"x": np.array([1.0, 2.0]),
                                        "q": [["a"], ["b"]]})
    assert isinstance(plumbing.features["x"], type(g.placeholder("probe", (None, 1))))
    assert plumbing.features["x"].shape == (None, 1)
    assert isinstance(plumbing.features["q"], RawFeature)
    assert plumbing.labels is None


def test_label_placeholders_typed_by_dtype():
    g = Graph(seed=0)
    plumbing = inputs.InputPlumbing(
        g, {"x": np.array([1.0])},
        {"cls": np.array([3]), "target": np.array([0.5])})
    assert plumbing.labels["cls"].dtype == "int"
    assert plumbing.labels["target"].dtype == "float"


def test_feed_for_batch_replays_all_bindings():
    g = Graph(seed=0)
    with g.as_default():
        first_f = {"x": np.array([1.0, 2.0]), "q": [["a"], []]}
        first_l = {"label": np.array([0, 1])}
        plumbing = inputs.InputPlumbing(g, first_f, first_l)
        col = fc.indicator_column(fc.categorical_column_with_hash_bucket("q", 4))
        layer = fc.input_layer(plumbing.features, [col])
        doubled = ops.mul(plumbing.features["x"], 2.0)

        batch_f = {"x": np.array([5.0, 6.0]), "q": [["z"], ["z"]]}
        batch_l = {"label": np.array([1, 0])}
        feed = plumbing.feed_for_batch(batch_f, batch_l)
        got_layer, got_x, got_label = Executor(g).run(
            [layer, doubled, plumbing.labels["label"]], feed=feed)
    bucket = fc.hash_bucket("z", 4)
    assert got_layer[0, bucket] == 1.0 and got_layer[1, bucket] == 1.0
    np.testing.assert_array_equal(got_x, [[10.0], [12.0]])
    np.testing.assert_array_equal(got_label, [1, 0])
    assert got_label.dtype == np.int64


def test_one_dimensional_dense_features_gain_a_width_axis():
    g = Graph(seed=0)
    plumbing = inputs.InputPlumbing(g, {"x": [1.0, 2.0, 3.0]})
    feed = plumbing.feed_for_batch({"x": [4.0, 5.0]})
    np.testing.assert_array_equal(feed[plumbing.features["x"]], [[4.0], [5.0]])


def test_wide_dense_features_keep_their_width():
    g = Graph(seed=0)
    plumbing = inputs.InputPlumbing(g, {"x": np.zeros((3, 4))})
    assert plumbing.features["x"].shape == (None, 4)


def test_label_feature_name_collision_rejected():
    g = Graph(seed=0)
    with pytest.raises(ValueError, match="collide"):
        inputs.InputPlumbing(g, {"x": np.array([1.0])}, {"x": np.array([0])})


def test_missing_feature_at_feed_time():
    g = Graph(seed=0)
    plumbing = inputs.InputPlumbing(g, {"x": np.array([1.0])})
    with pytest.raises(ExecutionError, match="missing from input batch"):
        plumbing.feed_for_batch({"y": np.array([1.0])})


def test_missing_label_at_feed_time():
    g = Graph(seed=0)
    plumbing = inputs.InputPlumbing(g, {"x": np.array([1.0])},
                                    {"label": np.array([0])})
    with pytest.raises(ExecutionError, match="label 'label' missing"):
        plumbing.feed_for_batch({"x": np.array([2.0])})


def test_empty_labels_dict_rejected():
    g = Graph(seed=0)
    with pytest.raises(ValueError, match="empty"):
        inputs.InputPlumbing(g, {"x": np.array([1.0])}, {})


def test_peek_iterator_replays_first_batch():
    batches = [{"x": np.array([i])} for i in range(3)]
    first, replay = inputs.peek_iterator(iter(batches))
    assert first is batches[0]
    assert list(replay) == batches


def test_peek_iterator_empty_source():
    with pytest.raises(ValueError, match="no batches"):
        inputs.peek_iterator(iter([]))


def test_batch_size_of():
    assert inputs.batch_size_of({"x": np.zeros((7, 2))}) == 7
    assert inputs.batch_size_of({"q": [["a"], [], ["b"]]}) == 3
    with pytest.raises(ValueError):
        inputs.batch_size_of({})
