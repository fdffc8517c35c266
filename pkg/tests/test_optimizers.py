"""Update rules: SGD, Adagrad, and joint training atomicity."""
import numpy as np
import pytest

from estkit import Executor, Graph, constant_initializer
from estkit import ops
from estkit.optimizers import Adagrad, Sgd, joint_train_op


def scalar_var(g, name, value):
    return g.get_variable(name, (), initializer=constant_initializer(value))


def test_sgd_single_step():
    g = Graph(seed=0)
    with g.as_default():
        v = g.get_variable("v", (1,), initializer=constant_initializer(1.0))
        loss = ops.reduce_sum(v.read())  # gradient is exactly [1.0]
        op = Sgd(0.1).minimize(loss)
    Executor(g).run(op)
    assert np.allclose(v.value, [0.9])


def test_sgd_converges_on_quadratic():
    # 100 steps on (v-3)^2 with lr 0.1 contracts the error by 0.8 per step.
    g = Graph(seed=0)
    with g.as_default():
        v = scalar_var(g, "v", 0.0)
        diff = ops.sub(v.read(), 3.0)
        loss = ops.mul(diff, diff)
        op = Sgd(0.1).minimize(loss)
    ex = Executor(g)
    for _ in range(100):
        ex.run(op)
    assert abs(float(v.value) - 3.0) < 1e-6
    assert g.global_step == 100


def test_global_step_increments_once_per_train_op():
    g = Graph(seed=0)
    with g.as_default():
        v = scalar_var(g, "v", 1.0)
        loss = ops.mul(v.read(), v.read())
        op = Sgd(0.01).minimize(loss)
    ex = Executor(g)
    ex.run(op)
    assert g.global_step == 1
    # Fetching the op twice in one run still executes it once.
    ex.run([op, op])
    assert g.global_step == 2


def test_adagrad_matches_manual_replay():
    lr, eps = 0.5, 1e-8
    g = Graph(seed=0)
    with g.as_default():
        v = g.get_variable("v", (2,), initializer=constant_initializer(1.0))
        target = g.constant([3.0, -1.0])
        diff = ops.sub(v.read(), target)
        loss = ops.reduce_sum(ops.mul(diff, diff))
        op = Adagrad(lr, eps=eps).minimize(loss)
    ex = Executor(g)

    expect = np.array([1.0, 1.0])
    acc = np.zeros(2)
    for _ in range(5):
        grad = 2.0 * (expect - np.array([3.0, -1.0]))
        acc = acc + grad * grad
        expect = expect - lr * grad / (np.sqrt(acc) + eps)
        ex.run(op)
        assert np.allclose(v.value, expect, atol=1e-12)


def test_adagrad_accumulators_are_checkpointable_variables():
    g = Graph(seed=0)
    with g.as_default():
        with g.variable_scope("model"):
            v = g.get_variable("v", (2,), initializer=constant_initializer(1.0))
        loss = ops.reduce_sum(ops.mul(v.read(), v.read()))
        Adagrad(0.1).minimize(loss)
    acc = g.variables.get("model/v/adagrad_acc")
    assert acc is not None
    assert not acc.trainable
    assert acc.shape == (2,)


def test_joint_train_uses_pre_update_values():
    # loss = a*b; both groups must see the other's value as of the run start.
    lr = 0.5
    g = Graph(seed=0)
    with g.as_default():
        a = scalar_var(g, "a", 2.0)
        b = scalar_var(g, "b", 3.0)
        loss = ops.mul(a.read(), b.read())
        op = joint_train_op(loss, [(Sgd(lr), [a]), (Sgd(lr), [b])])
    Executor(g).run(op)
    # d(loss)/da = b0 = 3, d(loss)/db = a0 = 2.
    assert float(a.value) == 2.0 - lr * 3.0
    assert float(b.value) == 3.0 - lr * 2.0
    assert g.global_step == 1


def test_joint_train_rejects_overlapping_groups():
    g = Graph(seed=0)
    with g.as_default():
        a = scalar_var(g, "a", 1.0)
        loss = ops.mul(a.read(), a.read())
        with pytest.raises(ValueError, match="two optimizers"):
            joint_train_op(loss, [(Sgd(0.1), [a]), (Sgd(0.2), [a])])


def test_minimize_without_trainables_errors():
    g = Graph(seed=0)
    with g.as_default():
        loss = g.constant(1.0)
        with pytest.raises(ValueError, match="no trainable variables"):
            Sgd(0.1).minimize(loss)


def test_gradients_see_pre_update_snapshot_within_one_run():
    # Fetching the loss alongside the train op returns the pre-update loss.
    g = Graph(seed=0)
    with g.as_default():
        v = scalar_var(g, "v", 4.0)
        loss = ops.mul(v.read(), v.read())
        op = Sgd(0.1).minimize(loss)
    loss_val, _ = Executor(g).run([loss, op])
    assert float(loss_val) == 16.0
    assert float(v.value) != 4.0


def test_same_seed_identical_trajectories():
    def run_once():
        g = Graph(seed=123)
        with g.as_default():
            v = g.get_variable("v", (3, 3))
            loss = ops.reduce_sum(ops.mul(v.read(), v.read()))
            op = Sgd(0.05).minimize(loss)
        ex = Executor(g)
        for _ in range(10):
            ex.run(op)
        return v.value.copy()

    assert np.array_equal(run_once(), run_once())


def test_invalid_hyperparameters_rejected():
    with pytest.raises(ValueError, match="learning_rate"):
        Sgd(0.0)
    with pytest.raises(ValueError, match="learning_rate"):
        Adagrad(-1.0)
    with pytest.raises(ValueError, match="eps"):
        Adagrad(0.1, eps=0.0)
