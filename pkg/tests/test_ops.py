"""Primitive op forward behavior and static shape inference."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from estkit import Executor, ExecutionError, Graph
from estkit import ops


def run_op(build, seed=0):
    g = Graph(seed=seed)
    with g.as_default():
        out = build(g)
    return Executor(g).run(out)


def test_matmul_identity():
    g = Graph(seed=0)
    with g.as_default():
        out = ops.matmul(g.constant([[1.0, 2.0], [3.0, 4.0]]),
                         g.constant([[1.0, 0.0], [0.0, 1.0]]))
    assert np.array_equal(Executor(g).run(out), [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_rank_error_names_shapes():
    g = Graph(seed=0)
    with g.as_default():
        with pytest.raises(ValueError, match=r"\(2,\).*\(2, 2\)"):
            ops.matmul(g.constant([1.0, 2.0]), g.constant([[1.0, 0.0], [0.0, 1.0]]))


def test_matmul_inner_dim_error():
    g = Graph(seed=0)
    with g.as_default():
        with pytest.raises(ValueError, match="inner dimensions"):
            ops.matmul(g.constant(np.zeros((2, 3))), g.constant(np.zeros((4, 2))))


def test_softmax_symmetric():
    out = run_op(lambda g: ops.softmax(g.constant([0.0, 0.0])))
    assert np.allclose(out, [0.5, 0.5])


# Logit spread bounded so the smallest probability stays representable above
# float64 rounding; beyond ~36 units the largest entry rounds to exactly 1.0.
@given(st.lists(st.floats(min_value=-15, max_value=15), min_size=2, max_size=6))
@settings(deadline=None)
def test_softmax_rows_sum_to_one(logits):
    out = run_op(lambda g: ops.softmax(g.constant([logits])))
    assert abs(out.sum() - 1.0) <= 1e-12
    assert np.all(out > 0) and np.all(out < 1)


def test_conv2d_ones_sums_to_nine():
    out = run_op(lambda g: ops.conv2d(g.constant(np.ones((1, 3, 3, 1))),
                                      g.constant(np.ones((3, 3, 1, 1)))))
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 9.0


def test_conv2d_matches_brute_force():
    # Oracle: direct 6-loop summation of the valid-padding definition.
    r = np.random.default_rng(3)
    x = r.normal(size=(2, 5, 6, 3))
    k = r.normal(size=(3, 2, 3, 4))
    out = run_op(lambda g: ops.conv2d(g.constant(x), g.constant(k)))
    oh, ow = 5 - 3 + 1, 6 - 2 + 1
    expect = np.zeros((2, oh, ow, 4))
    for b in range(2):
        for i in range(oh):
            for j in range(ow):
                for co in range(4):
                    expect[b, i, j, co] = np.sum(
                        x[b, i:i + 3, j:j + 2, :] * k[:, :, :, co])
    assert np.allclose(out, expect, atol=1e-12)


def test_conv2d_kernel_larger_than_input_errors():
    g = Graph(seed=0)
    with g.as_default():
        with pytest.raises(ValueError, match="smaller than"):
            ops.conv2d(g.constant(np.zeros((1, 2, 2, 1))),
                       g.constant(np.zeros((3, 3, 1, 1))))


def test_max_pool_simple():
    out = run_op(lambda g: ops.max_pool2d(
        g.constant(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)), 2))
    assert out.reshape(()) == 4.0


def test_max_pool_stride_one_shape():
    out = run_op(lambda g: ops.max_pool2d(g.constant(np.zeros((1, 8, 8, 4))), 2, 1))
    assert out.shape == (1, 7, 7, 4)


def test_broadcast_add_bias():
    out = run_op(lambda g: ops.add(g.constant(np.zeros((2, 3))),
                                   g.constant([1.0, 2.0, 3.0])))
    assert np.array_equal(out, [[1, 2, 3], [1, 2, 3]])


def test_broadcast_incompatible_errors():
    g = Graph(seed=0)
    with g.as_default():
        with pytest.raises(ValueError, match="not broadcast-compatible"):
            ops.add(g.constant(np.zeros((2, 3))), g.constant(np.zeros((2, 4))))


def test_one_hot():
    out = run_op(lambda g: ops.one_hot(g.constant([0, 2], dtype="int"), 3))
    assert np.array_equal(out, [[1, 0, 0], [0, 0, 1]])


def test_one_hot_out_of_range():
    g = Graph(seed=0)
    with g.as_default():
        out = ops.one_hot(g.constant([3], dtype="int"), 3)
    with pytest.raises(ExecutionError, match="out of range"):
        Executor(g).run(out)


def test_gather_rows():
    params = np.arange(12.0).reshape(4, 3)
    out = run_op(lambda g: ops.gather(g.constant(params),
                                      g.constant([2, 0], dtype="int")))
    assert np.array_equal(out, params[[2, 0]])


def test_gather_out_of_range():
    g = Graph(seed=0)
    with g.as_default():
        out = ops.gather(g.constant(np.zeros((2, 2))), g.constant([5], dtype="int"))
    with pytest.raises(ExecutionError, match="out of range"):
        Executor(g).run(out)


def test_reshape_and_flatten_shapes():
    g = Graph(seed=0)
    with g.as_default():
        x = g.placeholder("x", (None, 2, 3))
        y = ops.reshape(x, (-1, 6))
    assert y.shape == (None, 6)
    out = Executor(g).run(y, feed={x: np.arange(12.0).reshape(2, 2, 3)})
    assert out.shape == (2, 6)


def test_reshape_size_mismatch_errors():
    g = Graph(seed=0)
    with g.as_default():
        with pytest.raises(ValueError, match="does not match"):
            ops.reshape(g.constant(np.zeros((2, 3))), (4, 2))


def test_reduce_mean_axis():
    out = run_op(lambda g: ops.reduce_mean(g.constant([[1.0, 3.0], [5.0, 7.0]]), axis=1))
    assert np.array_equal(out, [2.0, 6.0])


def test_reduce_sum_all():
    out = run_op(lambda g: ops.reduce_sum(g.constant([[1.0, 2.0], [3.0, 4.0]])))
    assert out == 10.0


def test_concat_axis_widths():
    g = Graph(seed=0)
    with g.as_default():
        a = g.placeholder("a", (None, 2))
        b = g.placeholder("b", (None, 3))
        c = ops.concat([a, b], axis=1)
    assert c.shape == (None, 5)
    out = Executor(g).run(c, feed={a: np.ones((2, 2)), b: np.zeros((2, 3))})
    assert out.shape == (2, 5)


def test_concat_mismatch_errors():
    g = Graph(seed=0)
    with g.as_default():
        with pytest.raises(ValueError, match="disagree"):
            ops.concat([g.constant(np.zeros((2, 2))), g.constant(np.zeros((3, 2)))], axis=1)


def test_div_no_nan():
    out = run_op(lambda g: ops.div_no_nan(g.constant([1.0, 2.0]), g.constant([0.0, 4.0])))
    assert np.array_equal(out, [0.0, 0.5])


def test_argmax_ties_take_lowest_index():
    out = run_op(lambda g: ops.argmax(g.constant([[1.0, 5.0, 5.0]])))
    assert out[0] == 1


def test_placeholder_must_be_fed():
    g = Graph(seed=0)
    x = g.placeholder("x", (None, 2))
    with g.as_default():
        y = ops.neg(x)
    with pytest.raises(ExecutionError, match="'x' was not fed"):
        Executor(g).run(y)


def test_placeholder_shape_checked_at_feed():
    g = Graph(seed=0)
    x = g.placeholder("x", (None, 2))
    with g.as_default():
        y = ops.neg(x)
    with pytest.raises(ValueError, match="expects shape"):
        Executor(g).run(y, feed={x: np.zeros((4, 3))})


def test_fetches_share_one_execution():
    # Both fetches of a dropout output within one run see the same mask.
    g = Graph(seed=5)
    with g.as_default():
        x = g.placeholder("x", (None, 50))
        d = ops.dropout(x, 0.5, training=True)
    a, b = Executor(g).run([d, d], feed={x: np.ones((4, 50))})
    assert np.array_equal(a, b)


def test_dropout_eval_mode_is_identity():
    g = Graph(seed=5)
    with g.as_default():
        x = g.placeholder("x", (None, 10))
        d = ops.dropout(x, 0.9, training=False)
    val = np.random.default_rng(0).normal(size=(3, 10))
    assert np.array_equal(Executor(g).run(d, feed={x: val}), val)


def test_dropout_zero_fraction_near_rate():
    rate = 0.3
    g = Graph(seed=11)
    with g.as_default():
        x = g.placeholder("x", (None, 100))
        d = ops.dropout(x, rate, training=True)
    out = Executor(g).run(d, feed={x: np.ones((100, 100))})
    zero_fraction = np.mean(out == 0.0)
    assert abs(zero_fraction - rate) < 0.02
    # Surviving entries are scaled to keep the expectation.
    assert np.allclose(out[out != 0], 1.0 / (1.0 - rate))


def test_dropout_depends_on_global_step():
    g = Graph(seed=5)
    with g.as_default():
        x = g.placeholder("x", (None, 200))
        d = ops.dropout(x, 0.5, training=True)
    g.create_global_step()
    ex = Executor(g)
    ones = np.ones((1, 200))
    at_zero = ex.run(d, feed={x: ones})
    again_at_zero = ex.run(d, feed={x: ones})
    g.increment_global_step()
    at_one = ex.run(d, feed={x: ones})
    assert np.array_equal(at_zero, again_at_zero)
    assert not np.array_equal(at_zero, at_one)


def test_sigmoid_cross_entropy_stable_at_extremes():
    out = run_op(lambda g: ops.sigmoid_cross_entropy(
        g.constant([1000.0, -1000.0]), g.constant([1.0, 0.0])))
    assert np.all(np.isfinite(out))
    assert np.allclose(out, [0.0, 0.0], atol=1e-12)


def test_unary_math_values():
    x = np.array([-1.0, 0.5, 2.0])
    assert np.allclose(run_op(lambda g: ops.relu(g.constant(x))), [0, 0.5, 2.0])
    assert np.allclose(run_op(lambda g: ops.sigmoid(g.constant(x))), 1 / (1 + np.exp(-x)))
    assert np.allclose(run_op(lambda g: ops.tanh(g.constant(x))), np.tanh(x))
    assert np.allclose(run_op(lambda g: ops.exp(g.constant(x))), np.exp(x))
    y = np.array([0.5, 1.0, 3.0])
    assert np.allclose(run_op(lambda g: ops.log(g.constant(y))), np.log(y))
