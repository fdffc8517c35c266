"""Shared test utilities: finite-difference gradient oracle and RNG helpers."""
from __future__ import annotations

import numpy as np

from estkit import Executor


def finite_difference_gradients(graph, loss, variables, feed=None, h=1e-5):
    """Central-difference d(loss)/d(var) for each variable, as a name->array map.

    Perturbs one component at a time and re-runs the graph, so it is an
    oracle fully independent of the backward pass.
    """
    ex = Executor(graph)
    feed = feed or {}
    out = {}
    for var in variables:
        base = var.value.copy()
        grad = np.zeros_like(base)
        for i in range(base.size):
            plus = base.copy()
            plus.flat[i] += h
            var.assign(plus)
            lp = float(ex.run(loss, feed=feed))
            minus = base.copy()
            minus.flat[i] -= h
            var.assign(minus)
            lm = float(ex.run(loss, feed=feed))
            grad.flat[i] = (lp - lm) / (2.0 * h)
        var.assign(base)
        out[var.name] = grad
    return out


def assert_gradients_match(graph, loss, variables, feed=None, h=1e-5, rtol=1e-5):
    """Analytic gradients vs central differences, rel. error < rtol."""
    from estkit.optimizers import gradients

    with graph.as_default():
        grad_tensors = gradients(loss, variables)
    ex = Executor(graph)
    analytic = ex.run(grad_tensors, feed=feed or {})
    numeric = finite_difference_gradients(graph, loss, variables, feed=feed, h=h)
    for var, a in zip(variables, analytic):
        n = numeric[var.name]
        denom = np.maximum(1.0, np.abs(n))
        err = np.max(np.abs(a - n) / denom) if a.size else 0.0
        assert err < rtol, (
            f"gradient mismatch for {var.name}: max rel err {err:.3e}\n"
            f"analytic={a}\nnumeric={n}")


def rng(seed=0):
    return np.random.default_rng(seed)
