# (C) Copyright 2024- ssmpeft developers.
#
# This software is licensed under the terms of the Apache Licence Version 2.0
# which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
#

# Forward kernels and vector-Jacobian products of the tape primitives.
# A vjp receives the output gradient g, the input arrays, the output array
# and the node attributes, and returns one gradient per input.

import numpy as np


def sigmoid_array(x):
    return np.exp(-np.logaddexp(0.0, -x))


def softplus_array(x):
    return np.logaddexp(0.0, x)


def inverse_softplus_array(y):
    return y + np.log(-np.expm1(-y))


def reduce_to_shape(g, shape):
    """Sum ``g`` over the axes that were broadcast to reach it from ``shape``"""
    shape = tuple(shape)
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# two argument functions


def add(x, y):
    return x + y


def add_vjp(g, inputs, out):
    return g, g


def sub(x, y):
    return x - y


def sub_vjp(g, inputs, out):
    return g, -g


def mul(x, y):
    return x * y


def mul_vjp(g, inputs, out):
    x, y = inputs
    return g * y, g * x


def div(x, y):
    return x / y


def div_vjp(g, inputs, out):
    x, y = inputs
    return g / y, -g * x / (y * y)


def matmul(x, w):
    return np.matmul(x, w)


def matmul_vjp(g, inputs, out):
    x, w = inputs
    gx = np.matmul(g, np.swapaxes(w, -1, -2))
    gw = np.matmul(np.swapaxes(x, -1, -2), g)
    if gw.ndim > w.ndim:
        gw = gw.sum(axis=tuple(range(gw.ndim - w.ndim)))
    return gx, gw


# single argument functions


def exp(x):
    return np.exp(x)


def exp_vjp(g, inputs, out):
    return (g * out,)


def log(x):
    return np.log(x)


def log_vjp(g, inputs, out):
    return (g / inputs[0],)


def softplus(x):
    return softplus_array(x)


def softplus_vjp(g, inputs, out):
    return (g * sigmoid_array(inputs[0]),)


def sigmoid(x):
    return sigmoid_array(x)


def sigmoid_vjp(g, inputs, out):
    return (g * out * (1.0 - out),)


def silu(x):
    return x * sigmoid_array(x)


def silu_vjp(g, inputs, out):
    x = inputs[0]
    s = sigmoid_array(x)
    return (g * (s + x * s * (1.0 - s)),)


def pow(x, exponent=1.0):
    return x**exponent


def pow_vjp(g, inputs, out, exponent=1.0):
    return (g * exponent * inputs[0] ** (exponent - 1.0),)


def log_softmax(x):
    m = np.max(x, axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def log_softmax_vjp(g, inputs, out):
    return (g - np.exp(out) * np.sum(g, axis=-1, keepdims=True),)


# shape functions


def sum(x, axis=None, keepdims=False):
    return np.sum(x, axis=axis, keepdims=keepdims)


def sum_vjp(g, inputs, out, axis=None, keepdims=False):
    x = inputs[0]
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape),)


def broadcast(x, shape=()):
    return np.broadcast_to(x, shape)


def broadcast_vjp(g, inputs, out, shape=()):
    return (reduce_to_shape(g, inputs[0].shape),)


def reshape(x, shape=()):
    return np.reshape(x, shape)


def reshape_vjp(g, inputs, out, shape=()):
    return (np.reshape(g, inputs[0].shape),)


def transpose(x, axes=None):
    return np.transpose(x, axes)


def transpose_vjp(g, inputs, out, axes=None):
    inv = None if axes is None else tuple(np.argsort(axes))
    return (np.transpose(g, inv),)


def slice(x, index=()):
    return x[index]


def slice_vjp(g, inputs, out, index=()):
    r = np.zeros_like(inputs[0])
    r[index] = g
    return (r,)


def concat(*xs, axis=0):
    return np.concatenate(xs, axis=axis)


def concat_vjp(g, inputs, out, axis=0):
    bounds = np.cumsum([x.shape[axis] for x in inputs])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def gather(table, indices=None):
    return table[indices]


def gather_vjp(g, inputs, out, indices=None):
    r = np.zeros_like(inputs[0])
    np.add.at(r, indices, g)
    return (r,)


# linear recurrence h_t = a_t * h_{t-1} + u_t along axis -3


def scan(a, u, h0):
    h = np.empty(u.shape)
    prev = h0
    for t in range(u.shape[-3]):
        prev = a[..., t, :, :] * prev + u[..., t, :, :]
        h[..., t, :, :] = prev
    return h


def scan_vjp(g, inputs, out):
    a, u, h0 = inputs
    lam = np.empty(u.shape)
    carry = np.zeros(h0.shape)
    for t in reversed(range(u.shape[-3])):
        carry = g[..., t, :, :] + carry
        lam[..., t, :, :] = carry
        carry = a[..., t, :, :] * carry
    prev = np.concatenate([h0[..., None, :, :], out[..., :-1, :, :]], axis=-3)
    return lam * prev, lam, carry


KERNELS = {
    "add": (add, add_vjp),
    "sub": (sub, sub_vjp),
    "mul": (mul, mul_vjp),
    "div": (div, div_vjp),
    "matmul": (matmul, matmul_vjp),
    "exp": (exp, exp_vjp),
    "log": (log, log_vjp),
    "softplus": (softplus, softplus_vjp),
    "sigmoid": (sigmoid, sigmoid_vjp),
    "silu": (silu, silu_vjp),
    "pow": (pow, pow_vjp),
    "log_softmax": (log_softmax, log_softmax_vjp),
    "sum": (sum, sum_vjp),
    "broadcast": (broadcast, broadcast_vjp),
    "reshape": (reshape, reshape_vjp),
    "transpose": (transpose, transpose_vjp),
    "slice": (slice, slice_vjp),
    "concat": (concat, concat_vjp),
    "gather": (gather, gather_vjp),
    "scan": (scan, scan_vjp),
}
