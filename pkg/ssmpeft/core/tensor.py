# (C) Copyright 2024- ssmpeft developers.
#
# This software is licensed under the terms of the Apache Licence Version 2.0
# which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
#

"""Reverse-mode differentiation over numpy arrays.

Operations on :class:`Tensor` objects are recorded on the innermost active
:class:`Tape` of the calling thread. Without an active tape, or when none
of the inputs is tracked, the operations only compute values.
"""

import logging
import numbers
import threading

import numpy as np

from . import maths
from ..errors import ContractError, DimensionError

LOG = logging.getLogger(__name__)

_STATE = threading.local()


def current_tape():
    stack = getattr(_STATE, "stack", None)
    if stack:
        return stack[-1]
    return None


class Tensor:
    def __init__(self, data, requires_grad=False, name=None, copy=True):
        if copy:
            self.data = np.array(data, dtype=np.float64)
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad = None
        self.tape = None
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, copy=False, name=self.name)

    def _node(self, tape):
        if self.tape is tape and self.node_id is not None:
            return self.node_id
        if self.requires_grad:
            return tape.watch(self)
        return None

    def __repr__(self):
        name = f" name={self.name}" if self.name else ""
        grad = " requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{name}{grad})"

    def __len__(self):
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, tuple(shape))

    @property
    def T(self):
        return transpose(self)


class Node:
    __slots__ = ("node_id", "kind", "inputs", "saved", "out", "attrs", "tensor")

    def __init__(self, node_id, kind, inputs=(), saved=(), out=None, attrs=None):
        self.node_id = node_id
        self.kind = kind
        self.inputs = inputs
        self.saved = saved
        self.out = out
        self.attrs = {} if attrs is None else attrs
        self.tensor = None


class Tape:
    """Ordered record of the primitive operations of one forward pass.

    Node ids grow in recording order, so every node's inputs have smaller
    ids and reverse id order is a valid backward order.
    """

    def __init__(self):
        self.nodes = []
        self.visits = 0
        self._leaf_ids = {}
        self._grads = {}

    def __enter__(self):
        if not hasattr(_STATE, "stack"):
            _STATE.stack = []
        _STATE.stack.append(self)
        return self

    def __exit__(self, *args):
        _STATE.stack.remove(self)

    def __len__(self):
        return len(self.nodes)

    def watch(self, tensor):
        key = id(tensor)
        if key in self._leaf_ids:
            return self._leaf_ids[key]
        node = Node(len(self.nodes), "leaf", out=tensor.data)
        node.tensor = tensor
        self.nodes.append(node)
        self._leaf_ids[key] = node.node_id
        return node.node_id

    def record(self, kind, inputs, saved, out, attrs):
        node = Node(len(self.nodes), kind, tuple(inputs), tuple(saved), out, attrs)
        self.nodes.append(node)
        r = Tensor(out, copy=False)
        r.tape = self
        r.node_id = node.node_id
        return r

    def backward(self, output):
        """Propagate d(output)/d(node) from the scalar ``output`` to the leaves.

        Returns a dict mapping leaf node ids to gradient arrays and sets
        ``grad`` on the leaf tensors.
        """
        if output.size != 1:
            raise ContractError(
                f"backward(): output must be a scalar, got shape {output.shape}"
            )
        if output.tape is not self:
            raise ContractError("backward(): output was not recorded on this tape")

        grads = {output.node_id: np.ones(output.shape)}
        leaf_grads = {}
        self.visits = 0
        for node in reversed(self.nodes[: output.node_id + 1]):
            self.visits += 1
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node.kind == "leaf":
                leaf_grads[node.node_id] = np.array(g)
                continue
            _, vjp = maths.KERNELS[node.kind]
            in_grads = vjp(g, node.saved, node.out, **node.attrs)
            for nid, ig in zip(node.inputs, in_grads):
                if nid is None:
                    continue
                if nid in grads:
                    grads[nid] = grads[nid] + ig
                else:
                    grads[nid] = ig

        for node in self.nodes:
            if node.kind == "leaf":
                node.tensor.grad = leaf_grads.get(node.node_id)
        self._grads = leaf_grads
        LOG.debug(f"backward(): {self.visits} nodes visited, {len(leaf_grads)} leaves")
        return leaf_grads

    def grad(self, tensor):
        nid = self._leaf_ids.get(id(tensor))
        if nid is None:
            return None
        return self._grads.get(nid)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _const_like(value, like):
    return Tensor(np.full(like.shape, float(value)), copy=False)


def _apply(kind, inputs, **attrs):
    fwd, _ = maths.KERNELS[kind]
    arrays = [t.data for t in inputs]
    out = fwd(*arrays, **attrs)
    tape = current_tape()
    if tape is None:
        return Tensor(out, copy=False)
    ids = [t._node(tape) for t in inputs]
    if all(nid is None for nid in ids):
        return Tensor(out, copy=False)
    return tape.record(kind, ids, arrays, out, attrs)


def _binary(kind, x, y):
    if isinstance(x, numbers.Number):
        y = as_tensor(y)
        x = _const_like(x, y)
    elif isinstance(y, numbers.Number):
        x = as_tensor(x)
        y = _const_like(y, x)
    else:
        x = as_tensor(x)
        y = as_tensor(y)
    if x.shape != y.shape:
        raise DimensionError(f"{kind}(): shape mismatch {x.shape} vs {y.shape}")
    return _apply(kind, [x, y])


def add(x, y):
    return _binary("add", x, y)


def sub(x, y):
    return _binary("sub", x, y)


def mul(x, y):
    return _binary("mul", x, y)


def div(x, y):
    return _binary("div", x, y)


def matmul(x, w):
    x = as_tensor(x)
    w = as_tensor(w)
    ok = x.ndim >= 2 and w.ndim >= 2 and x.shape[-1] == w.shape[-2]
    if ok and w.ndim > 2:
        ok = w.ndim == x.ndim and w.shape[:-2] == x.shape[:-2]
    if not ok:
        raise DimensionError(f"matmul(): incompatible shapes {x.shape} and {w.shape}")
    return _apply("matmul", [x, w])


def linear(x, w):
    """Apply a weight stored as (out, in) to the rows of ``x``"""
    return matmul(x, transpose(w))


def exp(x):
    return _apply("exp", [as_tensor(x)])


def log(x):
    return _apply("log", [as_tensor(x)])


def softplus(x):
    return _apply("softplus", [as_tensor(x)])


def sigmoid(x):
    return _apply("sigmoid", [as_tensor(x)])


def silu(x):
    return _apply("silu", [as_tensor(x)])


def power(x, exponent):
    return _apply("pow", [as_tensor(x)], exponent=float(exponent))


def log_softmax(x):
    return _apply("log_softmax", [as_tensor(x)])


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is not None:
        axis = axis if isinstance(axis, tuple) else (axis,)
        axis = tuple(a % x.ndim for a in axis)
        if any(a >= x.ndim for a in axis):
            raise DimensionError(f"sum(): axis {axis} out of range for {x.shape}")
    return _apply("sum", [x], axis=axis, keepdims=keepdims)


def broadcast(x, shape):
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        np.broadcast_shapes(x.shape, shape)
    except ValueError:
        raise DimensionError(f"broadcast(): cannot broadcast {x.shape} to {shape}")
    if np.broadcast_shapes(x.shape, shape) != shape:
        raise DimensionError(f"broadcast(): cannot broadcast {x.shape} to {shape}")
    if x.shape == shape:
        return x
    return _apply("broadcast", [x], shape=shape)


def reshape(x, shape):
    x = as_tensor(x)
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size and -1 not in shape:
        raise DimensionError(f"reshape(): cannot reshape {x.shape} to {shape}")
    return _apply("reshape", [x], shape=shape)


def expand_last(x):
    """Append a unit axis"""
    x = as_tensor(x)
    return reshape(x, x.shape + (1,))


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return _apply("transpose", [x], axes=tuple(axes))


def slice_(x, index):
    x = as_tensor(x)
    if not isinstance(index, tuple):
        index = (index,)
    for v in index:
        if not (isinstance(v, (slice, numbers.Integral)) or v is Ellipsis):
            raise ContractError(f"slice(): only basic indexing is supported, got {v!r}")
    try:
        x.data[index]
    except IndexError as e:
        raise DimensionError(f"slice(): {e} for shape {x.shape}")
    return _apply("slice", [x], index=index)


def concat(xs, axis=0):
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ContractError("concat(): nothing to concatenate")
    ndim = xs[0].ndim
    axis = axis % ndim
    for x in xs[1:]:
        if x.ndim != ndim or any(
            a != b for i, (a, b) in enumerate(zip(x.shape, xs[0].shape)) if i != axis
        ):
            raise DimensionError(
                f"concat(): shapes {[t.shape for t in xs]} differ off axis {axis}"
            )
    return _apply("concat", xs, axis=axis)


def gather(table, indices):
    table = as_tensor(table)
    indices = np.asarray(indices)
    if not np.issubdtype(indices.dtype, np.integer):
        raise ContractError(f"gather(): indices must be integers, got {indices.dtype}")
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise DimensionError(
            f"gather(): index out of range for table with {table.shape[0]} rows"
        )
    return _apply("gather", [table], indices=indices)


def scan(a, u, h0):
    """Linear recurrence h_t = a_t * h_{t-1} + u_t over axis -3.

    ``a`` and ``u`` have shape (..., T, D, H) and ``h0`` shape (..., D, H).
    """
    a = as_tensor(a)
    u = as_tensor(u)
    h0 = as_tensor(h0)
    if a.shape != u.shape or a.ndim < 3 or h0.shape != a.shape[:-3] + a.shape[-2:]:
        raise DimensionError(
            f"scan(): incompatible shapes a={a.shape} u={u.shape} h0={h0.shape}"
        )
    return _apply("scan", [a, u, h0])
