"""Gradients and parameter-update rules.

A train op is a single "train_step" node: executing it computes every gradient
first (against parameters as of the start of the run), then applies the update
rules, then increments the global step exactly once. Composing two rules over
disjoint variable sets (joint_train_op) therefore stays one atomic step.
"""
from __future__ import annotations

from typing import Optional, Sequence

from .graph import Tensor, Variable, constant_initializer


def gradients(loss: Tensor, variables: Sequence[Variable]) -> list:
    """Symbolic d(loss)/d(var) for each variable.

    Variables the loss does not depend on get zero gradients. The loss must be
    a scalar float tensor.
    """
    if loss.dtype != "float":
        raise TypeError(f"gradients: loss must be a float tensor, got {loss.dtype!r}")
    if loss.shape != ():
        raise ValueError(f"gradients: loss must be a scalar, got shape {loss.shape}")
    graph = loss.graph
    out = []
    for var in variables:
        if var.graph is not graph:
            raise ValueError(f"gradients: variable {var.name!r} belongs to a different graph")
        out.append(graph.add_node("grad", [loss], {"var": var.name}, shape=var.shape))
    return out


class Optimizer:
    """Base class: subclasses supply one update-rule application per call."""

    def _application(self, loss: Tensor, var_list: Sequence[Variable]):
        raise NotImplementedError

    def minimize(self, loss: Tensor, var_list: Optional[Sequence[Variable]] = None,
                 increment_step: bool = True) -> Tensor:
        graph = loss.graph
        if var_list is None:
            var_list = graph.trainable_variables()
        var_list = list(var_list)
        if not var_list:
            raise ValueError("minimize: no trainable variables to optimize")
        if increment_step:
            graph.create_global_step()
        app, grads = self._application(loss, var_list)
        return graph.add_node(
            "train_step", grads,
            {"applications": [app], "increment_step": increment_step}, shape=())


class Sgd(Optimizer):
    """v <- v - lr * g."""

    def __init__(self, learning_rate: float):
        if learning_rate <= 0:
            raise ValueError(f"Sgd: learning_rate must be positive, got {learning_rate}")
        self.learning_rate = float(learning_rate)

    def _application(self, loss, var_list):
        grads = gradients(loss, var_list)
        app = {"rule": "sgd", "lr": self.learning_rate,
               "var_names": [v.name for v in var_list]}
        return app, grads


class Adagrad(Optimizer):
    """acc <- acc + g^2; v <- v - lr * g / (sqrt(acc) + eps).

    Accumulators are ordinary non-trainable variables (one per parameter), so
    checkpoints carry them and an interrupted run resumes bit-exactly.
    """

    def __init__(self, learning_rate: float, eps: float = 1e-8,
                 initial_accumulator: float = 0.0):
        if learning_rate <= 0:
            raise ValueError(f"Adagrad: learning_rate must be positive, got {learning_rate}")
        if eps <= 0:
            raise ValueError(f"Adagrad: eps must be positive, got {eps}")
        if initial_accumulator < 0:
            raise ValueError(
                f"Adagrad: initial_accumulator must be >= 0, got {initial_accumulator}")
        self.learning_rate = float(learning_rate)
        self.eps = float(eps)
        self.initial_accumulator = float(initial_accumulator)

    def _application(self, loss, var_list):
        graph = loss.graph
        grads = gradients(loss, var_list)
        acc_names = []
        with graph.root_scope():
            for v in var_list:
                acc = graph.get_variable(
                    f"{v.name}/adagrad_acc", shape=v.shape,
                    initializer=constant_initializer(self.initial_accumulator),
                    trainable=False, reuse="auto")
                acc_names.append(acc.name)
        app = {"rule": "adagrad", "lr": self.learning_rate, "eps": self.eps,
               "var_names": [v.name for v in var_list], "acc_names": acc_names}
        return app, grads


def joint_train_op(loss: Tensor, assignments: Sequence, increment_step: bool = True) -> Tensor:
    """One train step applying several optimizers to disjoint variable groups.

    assignments: (optimizer, var_list) pairs. All gradients are computed before
    any group is updated, and the global step increments once for the whole
    node (the wide-and-deep joint-training pattern).
    """
    graph = loss.graph
    seen: set = set()
    apps = []
    all_grads: list = []
    for optimizer, var_list in assignments:
        var_list = list(var_list)
        if not var_list:
            continue
        for v in var_list:
            if v.name in seen:
                raise ValueError(
                    f"joint_train_op: variable {v.name!r} assigned to two optimizers")
            seen.add(v.name)
        app, grads = optimizer._application(loss, var_list)
        apps.append(app)
        all_grads.extend(grads)
    if not apps:
        raise ValueError("joint_train_op: no variables to optimize")
    if increment_step:
        graph.create_global_step()
    return graph.add_node(
        "train_step", all_grads,
        {"applications": apps, "increment_step": increment_step}, shape=())
