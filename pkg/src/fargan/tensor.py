#
# Copyright (c) the fargan authors.
# SPDX-License-Identifier: Apache-2.0
#

import logging

import attr
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from fargan.errors import ContractViolation
from fargan.errors import DimensionError

logger = logging.getLogger(__name__)

"""
A small N-D tensor with tape-based reverse-mode differentiation.

Image-like data is laid out as (batch, channel, height, width). Every
operation builds its output from numpy arrays and, when any input requires a
gradient, records an OpNode holding its inputs and a backward closure over the
saved context. The graph is rebuilt on every forward pass.

For example::

    >>> x = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    >>> loss = (x * x).sum() / 2
    >>> loss.backward()
    >>> assert np.array_equal(x.grad, x.data)
"""

DEFAULT_DTYPE = np.float32


@attr.s(frozen=True, slots=True)
class OpNode:
    """
    The recorded application of one operation: its ``inputs`` tensors, its
    ``kind`` name and a ``backward`` callable mapping the output gradient to a
    tuple of input gradients (None where an input needs none).
    """

    kind = attr.ib(type=str)
    inputs = attr.ib(type=tuple)
    backward = attr.ib(repr=False)


class Tensor:
    """
    An N-D array of real numbers with an optional gradient accumulator.

    A leaf tensor created with ``requires_grad=True`` owns a ``grad`` array of
    identical shape, initialized to zero. Tensors produced by operations carry
    a ``node`` and never hold a ``grad`` of their own.
    """

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            array = np.asarray(data)
            if not np.issubdtype(array.dtype, np.floating):
                array = array.astype(DEFAULT_DTYPE)
        else:
            array = np.asarray(data, dtype=dtype)
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.grad = np.zeros_like(array) if requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self.node is None

    def item(self):
        if self.size != 1:
            raise ContractViolation(f"item() requires a single element tensor, not {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self):
        if self.grad is not None:
            self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad=False):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a)
    return a, b


def _record(kind, data, inputs, backward_fn):
    """
    Return the output Tensor of an operation, wiring it into the graph when any
    of the ``inputs`` requires a gradient.
    """
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = OpNode(kind=kind, inputs=tuple(inputs), backward=backward_fn)
    return out


def _unbroadcast(grad, shape):
    """
    Return ``grad`` summed down to ``shape``, undoing numpy broadcasting.
    """
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, extent in enumerate(shape) if extent == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _topological_order(root):
    """
    Return the tensors reachable from ``root`` through gradient-carrying edges,
    every tensor listed after all of its inputs.
    """
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        current, expanded = stack.pop()
        if expanded:
            order.append(current)
            continue
        if id(current) in visited:
            continue
        visited.add(id(current))
        stack.append((current, True))
        if current.node is not None:
            for parent in current.node.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(scalar_loss):
    """
    Accumulate d(scalar_loss)/d(leaf) into the ``grad`` of every reachable leaf
    that requires a gradient. Repeated calls accumulate.
    """
    if scalar_loss.size != 1:
        raise ContractViolation(
            f"backward() requires a scalar loss, got a tensor of shape {scalar_loss.shape}"
        )
    if not scalar_loss.requires_grad:
        return

    pending = {id(scalar_loss): np.ones_like(scalar_loss.data)}
    for current in reversed(_topological_order(scalar_loss)):
        grad = pending.pop(id(current), None)
        if grad is None:
            continue
        if current.node is None:
            current.grad = current.grad + grad.astype(current.dtype, copy=False)
            continue
        input_grads = current.node.backward(grad)
        for parent, parent_grad in zip(current.node.inputs, input_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + parent_grad
            else:
                pending[key] = parent_grad


# Elementwise arithmetic. Broadcasting follows numpy and is undone in backward.


def add(a, b):
    a, b = _pair(a, b)

    def grads(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", a.data + b.data, (a, b), grads)


def sub(a, b):
    a, b = _pair(a, b)

    def grads(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", a.data - b.data, (a, b), grads)


def mul(a, b):
    a, b = _pair(a, b)

    def grads(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", a.data * b.data, (a, b), grads)


def div(a, b):
    a, b = _pair(a, b)

    def grads(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _record("div", a.data / b.data, (a, b), grads)


def neg(x):
    return _record("neg", -x.data, (x,), lambda g: (-g,))


def power(x, exponent):
    exponent = float(exponent)

    def grads(g):
        return (g * exponent * x.data ** (exponent - 1),)

    return _record("power", x.data**exponent, (x,), grads)


def sqrt(x):
    """
    Square root clamped at zero. The gradient at zero is taken as zero.
    """
    out = np.sqrt(np.maximum(x.data, 0))

    def grads(g):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g * 0.5 / safe, 0).astype(x.dtype),)

    return _record("sqrt", out, (x,), grads)


def abs(x):
    return _record("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def exp(x):
    out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


# Activations


def relu(x):
    return _record("relu", np.maximum(x.data, 0), (x,), lambda g: (g * (x.data > 0),))


def leaky_relu(x, negative_slope=0.2):
    positive = x.data > 0
    out = np.where(positive, x.data, x.data * negative_slope).astype(x.dtype)

    def grads(g):
        return (g * np.where(positive, 1, negative_slope).astype(x.dtype),)

    return _record("leaky_relu", out, (x,), grads)


def tanh(x):
    out = np.tanh(x.data)
    return _record("tanh", out, (x,), lambda g: (g * (1 - out * out),))


def sigmoid(x):
    out = 1 / (1 + np.exp(-x.data))
    return _record("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grads(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", out, (x,), grads)


# Reductions and shape manipulation


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x, axis=None, keepdims=False):
    """
    Sum over ``axis`` with 64-bit accumulation.
    """
    axes = _normalize_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def grads(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _record("sum", out, (x,), grads)


def mean(x, axis=None, keepdims=False):
    axes = _normalize_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    if count == 0:
        raise ContractViolation("mean() of an empty tensor is undefined")
    return sum(x, axis=axes, keepdims=keepdims) / count


def reshape(x, shape):
    original = x.shape
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(original),))


def transpose(x, axes):
    inverse = tuple(np.argsort(axes))
    return _record(
        "transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),)
    )


def matmul(a, b):
    """
    Matrix product over the last two axes, batched over the leading ones.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul requires operands with at least 2 axes")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner axis mismatch: {a.shape[-1]} (last axis of left) "
            f"vs {b.shape[-2]} (second to last axis of right)"
        )

    def grads(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", np.matmul(a.data, b.data), (a, b), grads)


def concat(tensors, axis=1):
    """
    Concatenate ``tensors`` along ``axis`` (the channel axis by default).
    """
    tensors = list(tensors)
    reference = tensors[0].shape
    for t in tensors[1:]:
        for i, (left, right) in enumerate(zip(reference, t.shape)):
            if i != axis % len(reference) and left != right:
                raise DimensionError(f"concat extent mismatch on axis {i}: {left} vs {right}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grads(g):
        return tuple(np.split(g, bounds, axis=axis))

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _record("concat", out, tensors, grads)


def resize_nearest(x, size):
    """
    Nearest-neighbor resize of the two spatial axes to ``size`` (height, width).
    Output row i reads input row floor(i * H_in / H_out).
    """
    height, width = size
    rows = (np.arange(height) * x.shape[2]) // height
    cols = (np.arange(width) * x.shape[3]) // width
    index = (slice(None), slice(None), rows[:, None], cols[None, :])

    def grads(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _record("resize_nearest", x.data[index], (x,), grads)


# Convolutions and pooling


def _check_image(x, name="input"):
    if x.ndim != 4:
        raise DimensionError(
            f"{name} must have 4 axes (batch, channel, height, width), got shape {x.shape}"
        )


def _correlate(padded, weight, stride):
    """
    Return the strided cross-correlation of ``padded`` (N, C, H, W) with
    ``weight`` (K, C, kh, kw) as an (N, K, H', W') array.
    """
    kh, kw = weight.shape[2:]
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, weight, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _correlate_adjoint(grad, weight, stride, padded_shape):
    """
    Return the adjoint of ``_correlate`` with respect to its input: scatter
    ``grad`` (N, K, H', W') back through ``weight`` into ``padded_shape``.
    """
    kh, kw = weight.shape[2:]
    out_h, out_w = grad.shape[2:]
    columns = np.tensordot(grad, weight, axes=([1], [0]))
    out = np.zeros(padded_shape, dtype=np.result_type(grad, weight))
    for i in range(kh):
        for j in range(kw):
            out[
                :,
                :,
                i : i + stride * (out_h - 1) + 1 : stride,
                j : j + stride * (out_w - 1) + 1 : stride,
            ] += columns[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def _correlate_weight_grad(padded, grad, stride, kernel_size):
    kh, kw = kernel_size
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """
    2-D cross-correlation of ``x`` (N, C, H, W) with ``weight`` (K, C, kh, kw),
    zero padding, returning (N, K, H', W') with
    H' = floor((H + 2 * padding - kh) / stride) + 1.

    For example::

        >>> x = Tensor(np.ones((1, 1, 2, 2)))
        >>> w = Tensor(np.ones((1, 1, 2, 2)))
        >>> assert conv2d(x, w).item() == 4.0
    """
    _check_image(x)
    _check_image(weight, "weight")
    if stride < 1:
        raise ContractViolation(f"stride must be at least 1, got {stride}")
    n, channels, height, width = x.shape
    out_channels, weight_channels, kh, kw = weight.shape
    if channels != weight_channels:
        raise DimensionError(
            f"channel axis mismatch: input has {channels} channels, "
            f"weight expects {weight_channels}"
        )
    if kh > height + 2 * padding:
        raise DimensionError(
            f"height axis: kernel {kh} exceeds padded input {height + 2 * padding}"
        )
    if kw > width + 2 * padding:
        raise DimensionError(
            f"width axis: kernel {kw} exceeds padded input {width + 2 * padding}"
        )
    if bias is not None and bias.shape != (out_channels,):
        raise DimensionError(f"bias must have shape ({out_channels},), got {bias.shape}")

    pads = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    padded = np.pad(x.data, pads)
    out = _correlate(padded, weight.data, stride)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def grads(g):
        gx = _correlate_adjoint(g, weight.data, stride, padded.shape)
        gx = gx[:, :, padding : padding + height, padding : padding + width]
        gw = _correlate_weight_grad(padded, g, stride, (kh, kw))
        result = (gx.astype(x.dtype), gw.astype(weight.dtype))
        if bias is not None:
            result += (g.sum(axis=(0, 2, 3)).astype(bias.dtype),)
        return result

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("conv2d", out.astype(x.dtype), inputs, grads)


def transposed_conv2d(x, weight, bias=None, stride=2, padding=1):
    """
    Transposed 2-D convolution of ``x`` (N, C_in, H, W) with ``weight``
    (C_in, C_out, kh, kw), the adjoint of ``conv2d``. Output extents are
    (H - 1) * stride - 2 * padding + kh, exactly 2H for kernel 4, stride 2 and
    padding 1.

    For example::

        >>> x = Tensor(np.ones((1, 1, 2, 2)))
        >>> w = Tensor(np.ones((1, 1, 4, 4)))
        >>> assert transposed_conv2d(x, w).shape == (1, 1, 4, 4)
    """
    _check_image(x)
    _check_image(weight, "weight")
    if stride < 1:
        raise ContractViolation(f"stride must be at least 1, got {stride}")
    n, channels, height, width = x.shape
    in_channels, out_channels, kh, kw = weight.shape
    if channels != in_channels:
        raise DimensionError(
            f"channel axis mismatch: input has {channels} channels, weight expects {in_channels}"
        )
    full_h = (height - 1) * stride + kh
    full_w = (width - 1) * stride + kw
    if full_h - 2 * padding < 1:
        raise DimensionError(f"height axis: padding {padding} leaves no output rows")
    if full_w - 2 * padding < 1:
        raise DimensionError(f"width axis: padding {padding} leaves no output columns")
    if bias is not None and bias.shape != (out_channels,):
        raise DimensionError(f"bias must have shape ({out_channels},), got {bias.shape}")

    full = _correlate_adjoint(x.data, weight.data, stride, (n, out_channels, full_h, full_w))
    out = full[:, :, padding : full_h - padding, padding : full_w - padding]
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def grads(g):
        pads = ((0, 0), (0, 0), (padding, padding), (padding, padding))
        g_full = np.pad(g, pads)
        gx = _correlate(g_full, weight.data, stride)
        gw = _correlate_weight_grad(g_full, x.data, stride, (kh, kw))
        result = (gx.astype(x.dtype), gw.astype(weight.dtype))
        if bias is not None:
            result += (g.sum(axis=(0, 2, 3)).astype(bias.dtype),)
        return result

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("transposed_conv2d", np.ascontiguousarray(out, dtype=x.dtype), inputs, grads)


def _check_poolable(x, kernel_size):
    _check_image(x)
    if x.shape[2] % kernel_size:
        raise DimensionError(f"height axis {x.shape[2]} is not divisible by {kernel_size}")
    if x.shape[3] % kernel_size:
        raise DimensionError(f"width axis {x.shape[3]} is not divisible by {kernel_size}")


def avg_pool2d(x, kernel_size=2):
    """
    Non-overlapping average pooling over ``kernel_size`` x ``kernel_size`` windows.

    For example::

        >>> x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        >>> assert avg_pool2d(x).item() == 2.5
    """
    _check_poolable(x, kernel_size)
    k = kernel_size
    n, c, h, w = x.shape
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def grads(g):
        spread = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
        return (spread / (k * k),)

    return _record("avg_pool2d", out.astype(x.dtype), (x,), grads)


def max_pool2d(x, kernel_size=2):
    """
    Non-overlapping max pooling. Ties go to the first element of the window in
    row-major order, which also receives the whole gradient.

    For example::

        >>> x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        >>> assert max_pool2d(x).item() == 4.0
    """
    _check_poolable(x, kernel_size)
    k = kernel_size
    n, c, h, w = x.shape
    windows = (
        x.data.reshape(n, c, h // k, k, w // k, k)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // k, w // k, k * k)
    )
    argmax = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, argmax, axis=-1)[..., 0]

    def grads(g):
        routed = np.zeros_like(windows)
        np.put_along_axis(routed, argmax, g[..., None], axis=-1)
        routed = routed.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (routed.reshape(n, c, h, w),)

    return _record("max_pool2d", out, (x,), grads)
