"""Primitive operations: static shape inference, forward evaluation, gradients.

Every differentiable or structural node kind in a graph is described by an
OpDef registered in OPS.  Builders below are the public surface; they validate
ranks and dimensions at construction time so shape errors surface where the
graph is built, not where it runs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ExecutionError
from .graph import Graph, Node, Tensor, get_default_graph

Shape = tuple


def format_shape(shape: Shape) -> str:
    inner = ", ".join("?" if d is None else str(d) for d in shape)
    if len(shape) == 1:
        inner += ","
    return f"({inner})"


def _dims_compatible(a, b) -> bool:
    return a is None or b is None or a == b


@dataclass(frozen=True)
class OpDef:
    """Behaviour of one node kind.

    forward: (input arrays, node, context) -> output array.
    backward: (node, input arrays, output array, output grad, context)
        -> per-input gradient arrays (None for non-differentiable inputs).
    """

    forward: Callable
    backward: Optional[Callable] = None


OPS: dict[str, OpDef] = {}


def _register(kind: str, forward: Callable, backward: Optional[Callable] = None) -> None:
    OPS[kind] = OpDef(forward=forward, backward=backward)


# ---------------------------------------------------------------------------
# Shape helpers
# ---------------------------------------------------------------------------

def broadcast_shapes(a: Shape, b: Shape, op_name: str) -> Shape:
    """NumPy-style broadcast of two static shapes; None dims stay unknown."""
    out = []
    ra, rb = len(a), len(b)
    for i in range(max(ra, rb)):
        da = a[ra - 1 - i] if i < ra else 1
        db = b[rb - 1 - i] if i < rb else 1
        if da is None and db is None:
            out.append(None)
        elif da is None:
            out.append(None if db == 1 else db)
        elif db is None:
            out.append(None if da == 1 else da)
        elif da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ValueError(
                f"{op_name}: shapes {format_shape(a)} and {format_shape(b)} "
                "are not broadcast-compatible"
            )
    return tuple(reversed(out))


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's actual shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _require_float(t: Tensor, op_name: str) -> None:
    if t.dtype != "float":
        raise TypeError(f"{op_name}: expected a float tensor, got dtype {t.dtype!r}")


def _require_int(t: Tensor, op_name: str) -> None:
    if t.dtype != "int":
        raise TypeError(f"{op_name}: expected an int tensor, got dtype {t.dtype!r}")


def _node(graph: Graph, kind: str, inputs, attrs, shape, dtype="float") -> Tensor:
    return graph.add_node(kind=kind, inputs=inputs, attrs=attrs, shape=shape, dtype=dtype)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Elementwise binary ops (broadcasting)
# ---------------------------------------------------------------------------

def _binary(op_name: str, a, b) -> Tensor:
    graph = get_default_graph()
    at = graph.as_tensor(a)
    bt = graph.as_tensor(b)
    _require_float(at, op_name)
    _require_float(bt, op_name)
    shape = broadcast_shapes(at.shape, bt.shape, op_name)
    return _node(graph, op_name, [at, bt], {}, shape)


def add(a, b) -> Tensor:
    return _binary("add", a, b)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b)


def div_no_nan(a, b) -> Tensor:
    """a / b elementwise, yielding 0 wherever b is 0."""
    return _binary("div_no_nan", a, b)


_register(
    "add",
    lambda vals, node, ctx: vals[0] + vals[1],
    lambda node, vals, out, g, ctx: [
        unbroadcast(g, vals[0].shape),
        unbroadcast(g, vals[1].shape),
    ],
)

_register(
    "sub",
    lambda vals, node, ctx: vals[0] - vals[1],
    lambda node, vals, out, g, ctx: [
        unbroadcast(g, vals[0].shape),
        unbroadcast(-g, vals[1].shape),
    ],
)

_register(
    "mul",
    lambda vals, node, ctx: vals[0] * vals[1],
    lambda node, vals, out, g, ctx: [
        unbroadcast(g * vals[1], vals[0].shape),
        unbroadcast(g * vals[0], vals[1].shape),
    ],
)


def _div_no_nan_forward(vals, node, ctx):
    a, b = np.broadcast_arrays(*vals)
    out = np.zeros(a.shape, dtype=np.float64)
    np.divide(a, b, out=out, where=(b != 0))
    return out


def _div_no_nan_backward(node, vals, out, g, ctx):
    a, b = np.broadcast_arrays(*vals)
    safe = b != 0
    ga = np.zeros(a.shape, dtype=np.float64)
    np.divide(g, b, out=ga, where=safe)
    gb = np.zeros(b.shape, dtype=np.float64)
    np.divide(-g * a, b * b, out=gb, where=safe)
    return [unbroadcast(ga, vals[0].shape), unbroadcast(gb, vals[1].shape)]


_register("div_no_nan", _div_no_nan_forward, _div_no_nan_backward)


# ---------------------------------------------------------------------------
# Elementwise unary ops
# ---------------------------------------------------------------------------

def _unary(op_name: str, x) -> Tensor:
    graph = get_default_graph()
    xt = graph.as_tensor(x)
    _require_float(xt, op_name)
    return _node(graph, op_name, [xt], {}, xt.shape)


def neg(x) -> Tensor:
    return _unary("neg", x)


def relu(x) -> Tensor:
    return _unary("relu", x)


def sigmoid(x) -> Tensor:
    return _unary("sigmoid", x)


def tanh(x) -> Tensor:
    return _unary("tanh", x)


def exp(x) -> Tensor:
    return _unary("exp", x)


def log(x) -> Tensor:
    return _unary("log", x)


_register(
    "neg",
    lambda vals, node, ctx: -vals[0],
    lambda node, vals, out, g, ctx: [-g],
)

_register(
    "relu",
    lambda vals, node, ctx: np.maximum(vals[0], 0.0),
    lambda node, vals, out, g, ctx: [g * (vals[0] > 0)],
)

_register(
    "sigmoid",
    lambda vals, node, ctx: _stable_sigmoid(vals[0]),
    lambda node, vals, out, g, ctx: [g * out * (1.0 - out)],
)

_register(
    "tanh",
    lambda vals, node, ctx: np.tanh(vals[0]),
    lambda node, vals, out, g, ctx: [g * (1.0 - out * out)],
)

_register(
    "exp",
    lambda vals, node, ctx: np.exp(vals[0]),
    lambda node, vals, out, g, ctx: [g * out],
)

_register(
    "log",
    lambda vals, node, ctx: np.log(vals[0]),
    lambda node, vals, out, g, ctx: [g / vals[0]],
)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    graph = get_default_graph()
    at = graph.as_tensor(a)
    bt = graph.as_tensor(b)
    _require_float(at, "matmul")
    _require_float(bt, "matmul")
    if len(at.shape) != 2 or len(bt.shape) != 2:
        raise ValueError(
            f"matmul: expected rank-2 operands, got {format_shape(at.shape)} "
            f"and {format_shape(bt.shape)}"
        )
    if not _dims_compatible(at.shape[1], bt.shape[0]):
        raise ValueError(
            f"matmul: inner dimensions disagree between {format_shape(at.shape)} "
            f"and {format_shape(bt.shape)}"
        )
    return _node(graph, "matmul", [at, bt], {}, (at.shape[0], bt.shape[1]))


_register(
    "matmul",
    lambda vals, node, ctx: vals[0] @ vals[1],
    lambda node, vals, out, g, ctx: [g @ vals[1].T, vals[0].T @ g],
)


# ---------------------------------------------------------------------------
# softmax / log_softmax (last axis)
# ---------------------------------------------------------------------------

def softmax(x) -> Tensor:
    graph = get_default_graph()
    xt = graph.as_tensor(x)
    _require_float(xt, "softmax")
    if len(xt.shape) < 1:
        raise ValueError("softmax: operand must have rank >= 1")
    return _node(graph, "softmax", [xt], {}, xt.shape)


def log_softmax(x) -> Tensor:
    graph = get_default_graph()
    xt = graph.as_tensor(x)
    _require_float(xt, "log_softmax")
    if len(xt.shape) < 1:
        raise ValueError("log_softmax: operand must have rank >= 1")
    return _node(graph, "log_softmax", [xt], {}, xt.shape)


def _softmax_forward(vals, node, ctx):
    x = vals[0]
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_backward(node, vals, out, g, ctx):
    dot = (g * out).sum(axis=-1, keepdims=True)
    return [out * (g - dot)]


def _log_softmax_forward(vals, node, ctx):
    x = vals[0]
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _log_softmax_backward(node, vals, out, g, ctx):
    softmax_val = np.exp(out)
    return [g - softmax_val * g.sum(axis=-1, keepdims=True)]


_register("softmax", _softmax_forward, _softmax_backward)
_register("log_softmax", _log_softmax_forward, _log_softmax_backward)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _reduce(op_name: str, x, axis: Optional[int]) -> Tensor:
    graph = get_default_graph()
    xt = graph.as_tensor(x)
    _require_float(xt, op_name)
    rank = len(xt.shape)
    if axis is None:
        shape: Shape = ()
    else:
        if not -rank <= axis < rank:
            raise ValueError(
                f"{op_name}: axis {axis} out of range for shape {format_shape(xt.shape)}"
            )
        axis = axis % rank
        shape = xt.shape[:axis] + xt.shape[axis + 1:]
    return _node(graph, op_name, [xt], {"axis": axis}, shape)


def reduce_sum(x, axis: Optional[int] = None) -> Tensor:
    return _reduce("reduce_sum", x, axis)


def reduce_mean(x, axis: Optional[int] = None) -> Tensor:
    return _reduce("reduce_mean", x, axis)


def _spread_reduce_grad(g, x, axis):
    if axis is None:
        return np.full(x.shape, g, dtype=np.float64)
    return np.broadcast_to(np.expand_dims(g, axis), x.shape).copy()


_register(
    "reduce_sum",
    lambda vals, node, ctx: np.sum(vals[0], axis=node.attrs["axis"]),
    lambda node, vals, out, g, ctx: [_spread_reduce_grad(g, vals[0], node.attrs["axis"])],
)


def _reduce_mean_backward(node, vals, out, g, ctx):
    axis = node.attrs["axis"]
    x = vals[0]
    count = x.size if axis is None else x.shape[axis]
    return [_spread_reduce_grad(g, x, axis) / count]


_register(
    "reduce_mean",
    lambda vals, node, ctx: np.mean(vals[0], axis=node.attrs["axis"]),
    _reduce_mean_backward,
)


# ---------------------------------------------------------------------------
# concat / reshape
# ---------------------------------------------------------------------------

def concat(parts: Sequence, axis: int) -> Tensor:
    graph = get_default_graph()
    tensors = [graph.as_tensor(p) for p in parts]
    if not tensors:
        raise ValueError("concat: needs at least one input")
    for t in tensors:
        _require_float(t, "concat")
    rank = len(tensors[0].shape)
    if any(len(t.shape) != rank for t in tensors):
        shapes = ", ".join(format_shape(t.shape) for t in tensors)
        raise ValueError(f"concat: inputs must share a rank, got {shapes}")
    if not -rank <= axis < rank:
        raise ValueError(f"concat: axis {axis} out of range for rank {rank}")
    axis = axis % rank
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        for d in range(rank):
            if d == axis:
                continue
            if not _dims_compatible(base[d], t.shape[d]):
                raise ValueError(
                    f"concat: shapes {format_shape(tuple(base))} and "
                    f"{format_shape(t.shape)} disagree outside axis {axis}"
                )
            if base[d] is None:
                base[d] = t.shape[d]
    axis_dims = [t.shape[axis] for t in tensors]
    base[axis] = None if any(d is None for d in axis_dims) else sum(axis_dims)
    return _node(graph, "concat", tensors, {"axis": axis}, tuple(base))


def _concat_backward(node, vals, out, g, ctx):
    axis = node.attrs["axis"]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return list(np.split(g, sizes, axis=axis))


_register(
    "concat",
    lambda vals, node, ctx: np.concatenate(vals, axis=node.attrs["axis"]),
    _concat_backward,
)


def reshape(x, target: Sequence[int]) -> Tensor:
    graph = get_default_graph()
    xt = graph.as_tensor(x)
    target = tuple(int(d) for d in target)
    if sum(1 for d in target if d == -1) > 1:
        raise ValueError(f"reshape: at most one -1 allowed in target {target}")
    for d in target:
        if d < -1 or d == 0:
            raise ValueError(f"reshape: invalid dimension {d} in target {target}")
    known_in = None
    if all(d is not None for d in xt.shape):
        known_in = int(np.prod(xt.shape)) if xt.shape else 1
    shape = []
    for d in target:
        if d == -1:
            rest = int(np.prod([t for t in target if t != -1])) if len(target) > 1 else 1
            if known_in is not None:
                if known_in % rest != 0:
                    raise ValueError(
                        f"reshape: cannot fit {format_shape(xt.shape)} into {target}"
                    )
                shape.append(known_in // rest)
            else:
                shape.append(None)
        else:
            shape.append(d)
    if known_in is not None and all(d is not None for d in shape):
        out_size = int(np.prod(shape)) if shape else 1
        if out_size != known_in:
            raise ValueError(
                f"reshape: size of {format_shape(xt.shape)} does not match target {target}"
            )
    return _node(graph, "reshape", [xt], {"target": target}, tuple(shape), dtype=xt.dtype)


_register(
    "reshape",
    lambda vals, node, ctx: vals[0].reshape(node.attrs["target"]),
    lambda node, vals, out, g, ctx: [g.reshape(vals[0].shape)],
)


# ---------------------------------------------------------------------------
# Integer-indexed ops: one_hot, gather, argmax, comparisons, casts
# ---------------------------------------------------------------------------

def one_hot(indices, depth: int) -> Tensor:
    graph = get_default_graph()
    it = graph.as_tensor(indices)
    _require_int(it, "one_hot")
    if depth < 1:
        raise ValueError(f"one_hot: depth must be positive, got {depth}")
    return _node(graph, "one_hot", [it], {"depth": depth}, it.shape + (depth,))


def _one_hot_forward(vals, node, ctx):
    idx = vals[0]
    depth = node.attrs["depth"]
    if idx.size and (idx.min() < 0 or idx.max() >= depth):
        bad = idx[(idx < 0) | (idx >= depth)].flat[0]
        raise ExecutionError(
            f"one_hot: index {int(bad)} out of range for depth {depth}"
        )
    return np.eye(depth, dtype=np.float64)[idx]


_register("one_hot", _one_hot_forward, None)


def gather(params, indices) -> Tensor:
    graph = get_default_graph()
    pt = graph.as_tensor(params)
    it = graph.as_tensor(indices)
    _require_float(pt, "gather")
    _require_int(it, "gather")
    if len(pt.shape) < 1:
        raise ValueError("gather: params must have rank >= 1")
    return _node(graph, "gather", [pt, it], {}, it.shape + pt.shape[1:])


def _gather_forward(vals, node, ctx):
    params, idx = vals
    n = params.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)].flat[0]
        raise ExecutionError(f"gather: index {int(bad)} out of range for {n} rows")
    return params[idx]


def _gather_backward(node, vals, out, g, ctx):
    params, idx = vals
    gp = np.zeros_like(params)
    np.add.at(gp, idx.reshape(-1), g.reshape((-1,) + params.shape[1:]))
    return [gp, None]


_register("gather", _gather_forward, _gather_backward)


def argmax(x) -> Tensor:
    """Index of the max along the last axis; ties resolve to the lowest index."""
    graph = get_default_graph()
    xt = graph.as_tensor(x)
    _require_float(xt, "argmax")
    if len(xt.shape) < 1:
        raise ValueError("argmax: operand must have rank >= 1")
    return _node(graph, "argmax", [xt], {}, xt.shape[:-1], dtype="int")


_register(
    "argmax",
    lambda vals, node, ctx: np.argmax(vals[0], axis=-1),
    None,
)


def _compare(op_name: str, a, b) -> Tensor:
    graph = get_default_graph()
    at = graph.as_tensor(a)
    bt = graph.as_tensor(b)
    if at.dtype != bt.dtype:
        raise TypeError(
            f"{op_name}: operands must share a dtype, got {at.dtype!r} and {bt.dtype!r}"
        )
    shape = broadcast_shapes(at.shape, bt.shape, op_name)
    return _node(graph, op_name, [at, bt], {}, shape)


def equal(a, b) -> Tensor:
    """Elementwise a == b as 0/1 floats."""
    return _compare("equal", a, b)


def greater_equal(a, b) -> Tensor:
    """Elementwise a >= b as 0/1 floats."""
    return _compare("greater_equal", a, b)


_register(
    "equal",
    lambda vals, node, ctx: (vals[0] == vals[1]).astype(np.float64),
    None,
)

_register(
    "greater_equal",
    lambda vals, node, ctx: (vals[0] >= vals[1]).astype(np.float64),
    None,
)


def cast_int(x) -> Tensor:
    graph = get_default_graph()
    xt = graph.as_tensor(x)
    return _node(graph, "cast_int", [xt], {}, xt.shape, dtype="int")


def cast_float(x) -> Tensor:
    graph = get_default_graph()
    xt = graph.as_tensor(x)
    return _node(graph, "cast_float", [xt], {}, xt.shape, dtype="float")


_register("cast_int", lambda vals, node, ctx: vals[0].astype(np.int64), None)
_register("cast_float", lambda vals, node, ctx: vals[0].astype(np.float64), None)


# ---------------------------------------------------------------------------
# Stable fused cross-entropy on logits
# ---------------------------------------------------------------------------

def sigmoid_cross_entropy(logits, targets) -> Tensor:
    """Elementwise max(x,0) - x*z + log1p(exp(-|x|)); stable for large |x|."""
    graph = get_default_graph()
    lt = graph.as_tensor(logits)
    tt = graph.as_tensor(targets)
    _require_float(lt, "sigmoid_cross_entropy")
    _require_float(tt, "sigmoid_cross_entropy")
    shape = broadcast_shapes(lt.shape, tt.shape, "sigmoid_cross_entropy")
    return _node(graph, "sigmoid_ce", [lt, tt], {}, shape)


def _sigmoid_ce_forward(vals, node, ctx):
    x, z = np.broadcast_arrays(*vals)
    return np.maximum(x, 0.0) - x * z + np.log1p(np.exp(-np.abs(x)))


def _sigmoid_ce_backward(node, vals, out, g, ctx):
    x, z = np.broadcast_arrays(*vals)
    gx = g * (_stable_sigmoid(x) - z)
    gz = g * (-x)
    return [unbroadcast(gx, vals[0].shape), unbroadcast(gz, vals[1].shape)]


_register("sigmoid_ce", _sigmoid_ce_forward, _sigmoid_ce_backward)


# ---------------------------------------------------------------------------
# conv2d / max_pool2d (NHWC, stride 1, valid padding for conv)
# ---------------------------------------------------------------------------

def conv2d(x, kernel) -> Tensor:
    """Valid-padding stride-1 2-D convolution over NHWC input."""
    graph = get_default_graph()
    xt = graph.as_tensor(x)
    kt = graph.as_tensor(kernel)
    _require_float(xt, "conv2d")
    _require_float(kt, "conv2d")
    if len(xt.shape) != 4:
        raise ValueError(f"conv2d: input must be rank-4 NHWC, got {format_shape(xt.shape)}")
    if len(kt.shape) != 4:
        raise ValueError(
            f"conv2d: kernel must be rank-4 (kh, kw, in, out), got {format_shape(kt.shape)}"
        )
    kh, kw, kin, kout = kt.shape
    if None in (kh, kw, kin, kout):
        raise ValueError(f"conv2d: kernel shape must be fully known, got {format_shape(kt.shape)}")
    if not _dims_compatible(xt.shape[3], kin):
        raise ValueError(
            f"conv2d: input channels of {format_shape(xt.shape)} do not match "
            f"kernel {format_shape(kt.shape)}"
        )

    def out_dim(d, k):
        if d is None:
            return None
        if d < k:
            raise ValueError(
                f"conv2d: spatial dims of {format_shape(xt.shape)} are smaller than "
                f"kernel {format_shape(kt.shape)}"
            )
        return d - k + 1

    shape = (xt.shape[0], out_dim(xt.shape[1], kh), out_dim(xt.shape[2], kw), kout)
    return _node(graph, "conv2d", [xt, kt], {}, shape)


def _conv2d_forward(vals, node, ctx):
    x, k = vals
    kh, kw = k.shape[0], k.shape[1]
    oh = x.shape[1] - kh + 1
    ow = x.shape[2] - kw + 1
    out = np.zeros((x.shape[0], oh, ow, k.shape[3]), dtype=np.float64)
    for di in range(kh):
        for dj in range(kw):
            out += x[:, di:di + oh, dj:dj + ow, :] @ k[di, dj]
    return out


def _conv2d_backward(node, vals, out, g, ctx):
    x, k = vals
    kh, kw = k.shape[0], k.shape[1]
    oh, ow = g.shape[1], g.shape[2]
    gx = np.zeros_like(x)
    gk = np.zeros_like(k)
    for di in range(kh):
        for dj in range(kw):
            patch = x[:, di:di + oh, dj:dj + ow, :]
            gk[di, dj] = np.tensordot(patch, g, axes=([0, 1, 2], [0, 1, 2]))
            gx[:, di:di + oh, dj:dj + ow, :] += g @ k[di, dj].T
    return [gx, gk]


_register("conv2d", _conv2d_forward, _conv2d_backward)


def max_pool2d(x, pool_size, strides=None) -> Tensor:
    """Max pooling over NHWC input with valid padding."""
    graph = get_default_graph()
    xt = graph.as_tensor(x)
    _require_float(xt, "max_pool2d")
    if len(xt.shape) != 4:
        raise ValueError(f"max_pool2d: input must be rank-4 NHWC, got {format_shape(xt.shape)}")
    if isinstance(pool_size, int):
        pool_size = (pool_size, pool_size)
    ph, pw = int(pool_size[0]), int(pool_size[1])
    if strides is None:
        strides = (ph, pw)
    if isinstance(strides, int):
        strides = (strides, strides)
    sh, sw = int(strides[0]), int(strides[1])
    if min(ph, pw, sh, sw) < 1:
        raise ValueError(f"max_pool2d: pool {pool_size} and strides {strides} must be >= 1")

    def out_dim(d, p, s):
        if d is None:
            return None
        if d < p:
            raise ValueError(
                f"max_pool2d: input {format_shape(xt.shape)} is smaller than pool {(ph, pw)}"
            )
        return (d - p) // s + 1

    shape = (xt.shape[0], out_dim(xt.shape[1], ph, sh), out_dim(xt.shape[2], pw, sw), xt.shape[3])
    return _node(graph, "max_pool2d", [xt], {"pool": (ph, pw), "strides": (sh, sw)}, shape)


def _pool_windows(x, oh, ow, di, dj, sh, sw):
    return x[:, di:di + sh * oh:sh, dj:dj + sw * ow:sw, :]


def _max_pool2d_forward(vals, node, ctx):
    x = vals[0]
    ph, pw = node.attrs["pool"]
    sh, sw = node.attrs["strides"]
    oh = (x.shape[1] - ph) // sh + 1
    ow = (x.shape[2] - pw) // sw + 1
    out = np.full((x.shape[0], oh, ow, x.shape[3]), -np.inf, dtype=np.float64)
    for di in range(ph):
        for dj in range(pw):
            np.maximum(out, _pool_windows(x, oh, ow, di, dj, sh, sw), out=out)
    return out


def _max_pool2d_backward(node, vals, out, g, ctx):
    # Ties route the whole gradient to the first window offset that attains
    # the max (row-major scan), so the subgradient choice is deterministic.
    x = vals[0]
    ph, pw = node.attrs["pool"]
    sh, sw = node.attrs["strides"]
    oh, ow = out.shape[1], out.shape[2]
    gx = np.zeros_like(x)
    claimed = np.zeros(out.shape, dtype=bool)
    for di in range(ph):
        for dj in range(pw):
            window = _pool_windows(x, oh, ow, di, dj, sh, sw)
            mask = (window == out) & ~claimed
            claimed |= mask
            gx[:, di:di + sh * oh:sh, dj:dj + sw * ow:sw, :] += g * mask
    return [gx]


_register("max_pool2d", _max_pool2d_forward, _max_pool2d_backward)


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------

def dropout(x, rate: float, training: bool) -> Tensor:
    """Inverted dropout; identity when training is False.

    The keep mask is a pure function of (graph seed, node id, global step), so
    re-fetching a tensor within one step is idempotent and training trajectories
    survive a checkpoint/restore bit-exactly.
    """
    graph = get_default_graph()
    xt = graph.as_tensor(x)
    _require_float(xt, "dropout")
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    return _node(graph, "dropout", [xt], {"rate": float(rate), "training": bool(training)}, xt.shape)


def _dropout_mask(node, shape, ctx):
    rng = np.random.default_rng([ctx.graph.seed, node.node_id, ctx.graph.global_step])
    rate = node.attrs["rate"]
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _dropout_forward(vals, node, ctx):
    x = vals[0]
    if not node.attrs["training"] or node.attrs["rate"] == 0.0:
        return x
    return x * _dropout_mask(node, x.shape, ctx)


def _dropout_backward(node, vals, out, g, ctx):
    if not node.attrs["training"] or node.attrs["rate"] == 0.0:
        return [g]
    return [g * _dropout_mask(node, vals[0].shape, ctx)]


_register("dropout", _dropout_forward, _dropout_backward)


# ---------------------------------------------------------------------------
# Stateful builders; execution of these kinds lives in the executor.
# ---------------------------------------------------------------------------

def assign_add(variable, delta) -> Tensor:
    """Node that adds delta into a variable when executed; yields the new value."""
    graph = get_default_graph()
    dt = graph.as_tensor(delta)
    if not _dims_compatible_shape(variable.shape, dt.shape):
        raise ValueError(
            f"assign_add: variable {variable.name!r} has shape {variable.shape}, "
            f"delta has shape {format_shape(dt.shape)}")
    return _node(graph, "assign_add", [dt], {"name": variable.name}, variable.shape)


def _dims_compatible_shape(a: Shape, b: Shape) -> bool:
    return len(a) == len(b) and all(_dims_compatible(x, y) for x, y in zip(a, b))


def group(deps: Sequence[Tensor]) -> Tensor:
    """Node that forces all deps when executed; yields a dummy scalar."""
    graph = get_default_graph()
    return _node(graph, "group", list(deps), {}, ())


# ---------------------------------------------------------------------------
# Structural kinds; execution is handled by the executor itself.
# ---------------------------------------------------------------------------

STRUCTURAL_KINDS = frozenset({
    "placeholder",
    "constant",
    "read_variable",
    "grad",
    "assign_add",
    "group",
    "metric_value",
    "train_step",
})
