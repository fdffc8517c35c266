"""Build-then-execute computation graph: tensors, variables, scoped reuse.

A Graph is a DAG of primitive op nodes, built first and executed separately
(see execution.ExecutionContext). Node outputs are referred to through
Tensor handles; state lives in named Variables that ops read and mutate.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

StaticShape = tuple  # entries are int or None (unknown, e.g. the batch dim)

_default_graph_stack = threading.local()


class Tensor:
    """Symbolic handle to the output of one node in a Graph."""

    __slots__ = ("graph", "node_id")

    def __init__(self, graph: "Graph", node_id: int):
        self.graph = graph
        self.node_id = node_id

    @property
    def node(self) -> "Node":
        return self.graph.nodes[self.node_id]

    @property
    def shape(self) -> StaticShape:
        """Static shape; None entries are unknown until execution."""
        return self.node.shape

    @property
    def kind(self) -> str:
        return self.node.kind

    @property
    def dtype(self) -> str:
        return self.node.dtype

    def __repr__(self):
        return f"<Tensor #{self.node_id} {self.kind} shape={self.shape}>"

    # Arithmetic sugar delegates to the op builders (late import: ops builds
    # on graph).
    def __add__(self, other):
        from . import ops

        return ops.add(self, _wrap(self.graph, other))

    def __radd__(self, other):
        from . import ops

        return ops.add(_wrap(self.graph, other), self)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, _wrap(self.graph, other))

    def __rsub__(self, other):
        from . import ops

        return ops.sub(_wrap(self.graph, other), self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, _wrap(self.graph, other))

    def __rmul__(self, other):
        from . import ops

        return ops.mul(_wrap(self.graph, other), self)

    def __neg__(self):
        from . import ops

        return ops.neg(self)


def _wrap(graph: "Graph", value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if isinstance(value, Variable):
        return value.read()
    return graph.constant(value)


@dataclass
class Node:
    node_id: int
    kind: str
    inputs: tuple
    attrs: dict
    shape: StaticShape
    dtype: str = "float"


class Variable:
    """Named mutable tensor. Created through Graph.get_variable only."""

    def __init__(self, graph: "Graph", name: str, value: np.ndarray,
                 trainable: bool, creation_index: int):
        self.graph = graph
        self.name = name
        self._value = value
        self.trainable = trainable
        self.creation_index = creation_index
        self._read_node: Optional[Tensor] = None

    @property
    def shape(self) -> tuple:
        return self._value.shape

    @property
    def value(self) -> np.ndarray:
        return self._value

    def assign(self, value) -> None:
        arr = np.asarray(value, dtype=self._value.dtype)
        if arr.shape != self._value.shape:
            raise ValueError(
                f"variable {self.name!r} has shape {self._value.shape}, "
                f"cannot assign value of shape {arr.shape}")
        self._value = arr

    def read(self) -> Tensor:
        """Symbolic read of the current value (one cached node per variable)."""
        if self._read_node is None:
            self._read_node = self.graph.add_node(
                "read_variable", [], {"name": self.name},
                shape=self._value.shape, dtype=self.graph._var_dtype(self))
        return self._read_node

    def __repr__(self):
        return f"<Variable {self.name!r} shape={self.shape} trainable={self.trainable}>"


# --------------------------------------------------------------------------
# Initializers: callables (shape, rng) -> ndarray.

def zeros_initializer() -> Callable:
    return lambda shape, rng: np.zeros(shape, dtype=np.float64)


def constant_initializer(value) -> Callable:
    def init(shape, rng):
        out = np.empty(shape, dtype=np.float64)
        out[...] = value
        return out

    return init


def random_uniform_initializer(minval: float, maxval: float) -> Callable:
    return lambda shape, rng: rng.uniform(minval, maxval, size=shape)


def glorot_uniform_initializer() -> Callable:
    def init(shape, rng):
        if len(shape) < 2:
            return np.zeros(shape, dtype=np.float64)
        receptive = int(np.prod(shape[:-2], dtype=np.int64)) if len(shape) > 2 else 1
        fan_in = receptive * shape[-2]
        fan_out = receptive * shape[-1]
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)

    return init


def default_initializer(shape: Sequence[int]) -> Callable:
    """Glorot-uniform for rank >= 2, zeros otherwise (biases, scalars)."""
    if len(shape) >= 2:
        return glorot_uniform_initializer()
    return zeros_initializer()


GLOBAL_STEP_NAME = "global_step"


class Graph:
    """DAG of primitive ops plus the named variables they read and mutate.

    Nodes only reference earlier nodes, so node ids are already a topological
    order. The graph owns a PRNG seeded from the run configuration; variable
    initializers and dropout masks draw from it deterministically, which makes
    identical (seed, op sequence) builds produce bit-identical trajectories.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self.nodes: list[Node] = []
        self.variables: dict[str, Variable] = {}
        self._scope_parts: list[str] = []
        self._scope_reuse: list = []
        self._unique_counters: dict[str, int] = {}
        # Bindings from placeholder nodes to per-batch encoders; consumed by
        # the input plumbing when feeding raw batches.
        self.feed_bindings: list = []

    # -- node construction -------------------------------------------------

    def add_node(self, kind: str, inputs: Sequence[Tensor], attrs: dict,
                 shape: StaticShape, dtype: str = "float") -> Tensor:
        for t in inputs:
            if t.graph is not self:
                raise ValueError(
                    f"input tensor belongs to a different graph: {t!r}")
        node = Node(len(self.nodes), kind, tuple(t.node_id for t in inputs),
                    attrs, tuple(shape), dtype)
        self.nodes.append(node)
        return Tensor(self, node.node_id)

    def placeholder(self, name: str, shape: Sequence, dtype: str = "float") -> Tensor:
        return self.add_node("placeholder", [], {"name": name},
                             shape=tuple(shape), dtype=dtype)

    def constant(self, value, dtype: str = "float") -> Tensor:
        arr = np.asarray(value, dtype=np.int64 if dtype == "int" else np.float64)
        return self.add_node("constant", [], {"value": arr},
                             shape=arr.shape, dtype=dtype)

    def as_tensor(self, value, dtype: str = "float") -> Tensor:
        """Coerce a Tensor, Variable, or array-like into a Tensor of this graph."""
        if isinstance(value, Tensor):
            if value.graph is not self:
                raise ValueError(f"tensor belongs to a different graph: {value!r}")
            return value
        if isinstance(value, Variable):
            if value.graph is not self:
                raise ValueError(f"variable belongs to a different graph: {value!r}")
            return value.read()
        return self.constant(value, dtype=dtype)

    # -- variables and scopes ----------------------------------------------

    def _var_dtype(self, var: Variable) -> str:
        return "int" if var.value.dtype.kind in "iu" else "float"

    @contextlib.contextmanager
    def variable_scope(self, name: str, reuse=None):
        """Push a scope segment; reuse inherits from enclosing scopes."""
        self._scope_parts.append(name)
        self._scope_reuse.append(reuse)
        try:
            yield self
        finally:
            self._scope_parts.pop()
            self._scope_reuse.pop()

    def scoped_name(self, name: str) -> str:
        # Empty segments (reuse-only scopes) contribute no path component.
        return "/".join([p for p in self._scope_parts if p] + [name])

    def current_scope(self) -> str:
        return "/".join(p for p in self._scope_parts if p)

    def _effective_reuse(self, explicit):
        if explicit is not None:
            return explicit
        for flag in reversed(self._scope_reuse):
            if flag is not None:
                return flag
        return False

    @contextlib.contextmanager
    def root_scope(self):
        """Temporarily escape all enclosing variable scopes."""
        saved_parts, self._scope_parts = self._scope_parts, []
        saved_reuse, self._scope_reuse = self._scope_reuse, []
        try:
            yield self
        finally:
            self._scope_parts = saved_parts
            self._scope_reuse = saved_reuse

    def get_variable(self, name: str, shape: Sequence[int] = None,
                     initializer: Callable = None, trainable: bool = True,
                     reuse=None) -> Variable:
        """Create or look up a variable under the current scope.

        reuse=False creates (error if the name exists), reuse=True returns an
        existing variable (error if absent), reuse="auto" does whichever
        applies. Shape must match on reuse.
        """
        full = self.scoped_name(name)
        reuse = self._effective_reuse(reuse)
        existing = self.variables.get(full)
        if existing is not None:
            if reuse is False:
                raise ValueError(
                    f"variable {full!r} already exists; pass reuse=True to share it")
            if shape is not None and tuple(shape) != existing.shape:
                raise ValueError(
                    f"variable {full!r} has shape {existing.shape}, "
                    f"requested shape {tuple(shape)}")
            return existing
        if reuse is True:
            raise ValueError(f"variable {full!r} does not exist but reuse was requested")
        if shape is None:
            raise ValueError(f"creating variable {full!r} requires a shape")
        shape = tuple(int(d) for d in shape)
        if any(d < 0 for d in shape):
            raise ValueError(f"variable {full!r}: negative dimension in {shape}")
        if initializer is None:
            initializer = default_initializer(shape)
        value = np.asarray(initializer(shape, self.rng), dtype=np.float64)
        if value.shape != shape:
            raise ValueError(
                f"initializer for {full!r} produced shape {value.shape}, "
                f"expected {shape}")
        var = Variable(self, full, value, trainable, len(self.variables))
        self.variables[full] = var
        return var

    def trainable_variables(self, prefix: str = "") -> list:
        out = [v for v in self.variables.values()
               if v.trainable and v.name.startswith(prefix)]
        return sorted(out, key=lambda v: v.creation_index)

    def variables_in_creation_order(self) -> list:
        return sorted(self.variables.values(), key=lambda v: v.creation_index)

    def unique_name(self, base: str) -> str:
        """Deterministic unique name for auto-scoped constructs (metrics)."""
        n = self._unique_counters.get(base, 0)
        self._unique_counters[base] = n + 1
        return base if n == 0 else f"{base}_{n}"

    # -- global step ---------------------------------------------------------

    def create_global_step(self) -> Variable:
        if GLOBAL_STEP_NAME in self.variables:
            return self.variables[GLOBAL_STEP_NAME]
        with self.root_scope():
            return self.get_variable(GLOBAL_STEP_NAME, shape=(),
                                     initializer=zeros_initializer(),
                                     trainable=False)

    @property
    def global_step(self) -> int:
        var = self.variables.get(GLOBAL_STEP_NAME)
        return 0 if var is None else int(var.value)

    def increment_global_step(self) -> int:
        var = self.create_global_step()
        var.assign(np.asarray(float(int(var.value) + 1)))
        return int(var.value)

    # -- default graph stack -------------------------------------------------

    @contextlib.contextmanager
    def as_default(self):
        stack = _default_graph_stack.__dict__.setdefault("stack", [])
        stack.append(self)
        try:
            yield self
        finally:
            stack.pop()


def get_default_graph() -> Graph:
    stack = _default_graph_stack.__dict__.get("stack") or []
    if not stack:
        raise RuntimeError("no default graph; enter one with Graph.as_default()")
    return stack[-1]
