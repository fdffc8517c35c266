"""Graph execution: memoized forward evaluation and reverse-mode gradients.

One Executor.run call is one atomic execution: every node is computed at most
once, so fetching several tensors together always yields a consistent snapshot
(the paper-style "same Session.run call" contract). Stateful kinds (variable
updates, the train step) mutate only when their node is computed, and pure
nodes they depend on are forced first, so gradients always see pre-update
parameter values.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .errors import ExecutionError
from .graph import Graph, Node, Tensor
from .ops import OPS, format_shape


def _feed_matches(static_shape, actual_shape) -> bool:
    if len(static_shape) != len(actual_shape):
        return False
    return all(s is None or s == a for s, a in zip(static_shape, actual_shape))


class _Run:
    """State for a single execution: value memo and per-loss gradient cache."""

    def __init__(self, graph: Graph, feed: dict):
        self.graph = graph
        self.values: dict[int, np.ndarray] = {}
        self.grad_cache: dict[int, dict[str, np.ndarray]] = {}
        self.feed = feed

    # -- forward -------------------------------------------------------------

    def evaluate(self, tensor: Tensor) -> np.ndarray:
        target = tensor.node_id
        if target in self.values:
            return self.values[target]
        stack = [target]
        while stack:
            nid = stack[-1]
            if nid in self.values:
                stack.pop()
                continue
            node = self.graph.nodes[nid]
            pending = [i for i in node.inputs if i not in self.values]
            if pending:
                stack.extend(pending)
                continue
            stack.pop()
            self.values[nid] = self._compute(node)
        return self.values[target]

    def _compute(self, node: Node) -> np.ndarray:
        kind = node.kind
        if kind == "placeholder":
            return self._feed_value(node)
        if kind == "constant":
            return node.attrs["value"]
        if kind == "read_variable":
            return self.graph.variables[node.attrs["name"]].value
        if kind == "grad":
            grads = self._backward(node.inputs[0])
            name = node.attrs["var"]
            got = grads.get(name)
            if got is None:
                return np.zeros(self.graph.variables[name].shape, dtype=np.float64)
            return got
        if kind == "assign_add":
            var = self.graph.variables[node.attrs["name"]]
            var.assign(var.value + self.values[node.inputs[0]])
            return var.value
        if kind == "group":
            return np.float64(0.0)
        if kind == "metric_value":
            count = self.values[node.inputs[1]]
            if float(count) == 0.0:
                raise ExecutionError(
                    f"metric {node.attrs['name']!r}: no data accumulated")
            return self.values[node.inputs[0]]
        if kind == "train_step":
            return self._train_step(node)
        opdef = OPS.get(kind)
        if opdef is None:
            raise ExecutionError(f"unknown node kind {kind!r}")
        vals = [self.values[i] for i in node.inputs]
        return np.asarray(opdef.forward(vals, node, self))

    def _feed_value(self, node: Node) -> np.ndarray:
        name = node.attrs["name"]
        if node.node_id not in self.feed:
            raise ExecutionError(f"placeholder {name!r} was not fed")
        dtype = np.int64 if node.dtype == "int" else np.float64
        arr = np.asarray(self.feed[node.node_id], dtype=dtype)
        if not _feed_matches(node.shape, arr.shape):
            raise ValueError(
                f"placeholder {name!r} expects shape {format_shape(node.shape)}, "
                f"got value of shape {tuple(arr.shape)}")
        return arr

    # -- train step ------------------------------------------------------------

    def _train_step(self, node: Node) -> np.ndarray:
        # All gradients were forced as node inputs before this point, so every
        # application below sees parameters as of the start of the run.
        grads = [self.values[i] for i in node.inputs]
        offset = 0
        for app in node.attrs["applications"]:
            names = app["var_names"]
            slice_ = grads[offset:offset + len(names)]
            offset += len(names)
            if app["rule"] == "sgd":
                for name, g in zip(names, slice_):
                    var = self.graph.variables[name]
                    var.assign(var.value - app["lr"] * g)
            elif app["rule"] == "adagrad":
                for name, acc_name, g in zip(names, app["acc_names"], slice_):
                    acc = self.graph.variables[acc_name]
                    acc.assign(acc.value + g * g)
                    var = self.graph.variables[name]
                    var.assign(var.value - app["lr"] * g / (np.sqrt(acc.value) + app["eps"]))
            else:
                raise ExecutionError(f"unknown update rule {app['rule']!r}")
        if node.attrs.get("increment_step", True):
            self.graph.increment_global_step()
        return np.float64(self.graph.global_step)

    # -- backward ------------------------------------------------------------

    def _backward(self, loss_id: int) -> dict[str, np.ndarray]:
        cached = self.grad_cache.get(loss_id)
        if cached is not None:
            return cached
        # Ancestors of the loss, ids ascending, is already a topological order.
        ancestors = self._ancestors(loss_id)
        node_grads: dict[int, np.ndarray] = {
            loss_id: np.ones(self.values[loss_id].shape, dtype=np.float64)}
        var_grads: dict[str, np.ndarray] = {}
        for nid in reversed(ancestors):
            g = node_grads.pop(nid, None)
            if g is None:
                continue
            node = self.graph.nodes[nid]
            if node.kind == "read_variable":
                name = node.attrs["name"]
                prev = var_grads.get(name)
                var_grads[name] = g if prev is None else prev + g
                continue
            opdef = OPS.get(node.kind)
            if opdef is None or opdef.backward is None:
                continue  # non-differentiable boundary: treated as constant
            vals = [self.values[i] for i in node.inputs]
            input_grads = opdef.backward(node, vals, self.values[nid], g, self)
            for inp_id, gi in zip(node.inputs, input_grads):
                if gi is None or self.graph.nodes[inp_id].dtype != "float":
                    continue
                prev = node_grads.get(inp_id)
                node_grads[inp_id] = gi if prev is None else prev + gi
        self.grad_cache[loss_id] = var_grads
        return var_grads

    def _ancestors(self, target: int) -> list:
        seen = {target}
        frontier = [target]
        while frontier:
            nid = frontier.pop()
            for i in self.graph.nodes[nid].inputs:
                if i not in seen:
                    seen.add(i)
                    frontier.append(i)
        return sorted(seen)


class Executor:
    """Runs fetches against a graph; each run() call is one atomic execution."""

    def __init__(self, graph: Graph):
        self.graph = graph

    def run(self, fetches, feed: Optional[dict] = None):
        """Evaluate fetches (a Tensor or a sequence of Tensors) in order.

        feed maps placeholder Tensors to array values. Returns one array for a
        single fetch, else a list in fetch order.
        """
        single = isinstance(fetches, Tensor)
        fetch_list: Sequence[Tensor] = [fetches] if single else list(fetches)
        feed_by_id = {}
        for key, value in (feed or {}).items():
            if not isinstance(key, Tensor) or key.kind != "placeholder":
                raise TypeError(f"feed keys must be placeholder tensors, got {key!r}")
            if key.graph is not self.graph:
                raise ValueError(f"feed key belongs to a different graph: {key!r}")
            feed_by_id[key.node_id] = value
        run = _Run(self.graph, feed_by_id)
        results = []
        for t in fetch_list:
            if not isinstance(t, Tensor):
                raise TypeError(f"fetches must be tensors, got {t!r}")
            if t.graph is not self.graph:
                raise ValueError(f"fetch belongs to a different graph: {t!r}")
            results.append(run.evaluate(t))
        return results[0] if single else results
