#
# Copyright (c) the fargan authors.
# SPDX-License-Identifier: Apache-2.0
#

import logging
from collections import OrderedDict

import attr
import numpy as np

from fargan import tensor as T
from fargan.errors import ConfigurationError
from fargan.errors import ContractViolation
from fargan.errors import DimensionError
from fargan.tensor import Tensor

logger = logging.getLogger(__name__)

"""
Reusable layers: a Module base with named parameters, spectral-normalized
convolutions, self-attention, pre-activation residual downsampling blocks and
the per-channel statistics used for normalization.
"""

NEGATIVE_SLOPE = 0.2

POOLS = {
    "avg": T.avg_pool2d,
    "max": T.max_pool2d,
}


class Parameter(Tensor):
    """
    A leaf Tensor owned by a Module. Frozen parameters are created with
    ``requires_grad=False`` and are never touched by an optimizer.
    """

    def __init__(self, data, requires_grad=True, dtype=None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)


@attr.s(eq=False)
class SpectralNormState:
    """
    Power-iteration state of a spectral-normalized weight: ``u`` is a unit
    vector with one entry per output channel.
    """

    u = attr.ib(repr=False)
    n_power_iterations = attr.ib(type=int, default=1)

    def __attrs_post_init__(self):
        if self.n_power_iterations < 1:
            raise ConfigurationError(
                f"n_power_iterations must be positive, got {self.n_power_iterations}"
            )

    @classmethod
    def create(cls, size, rng, n_power_iterations=1, dtype=T.DEFAULT_DTYPE):
        u = _l2_normalize(rng.standard_normal(size))
        return cls(u=u.astype(dtype), n_power_iterations=n_power_iterations)


def _l2_normalize(vector, eps=1e-12):
    return vector / (np.linalg.norm(vector) + eps)


def spectral_normalize(weight, state, dim=0, update=True, eps=1e-12):
    """
    Return ``weight`` divided by the estimate of its largest singular value.
    The weight is unfolded into a 2-D matrix with axis ``dim`` as rows. When
    ``update`` is True, ``state.u`` is refined in place with
    ``state.n_power_iterations`` power iterations first. A (numerically) zero
    weight is returned unchanged.

    For example::

        >>> rng = np.random.default_rng(0)
        >>> state = SpectralNormState.create(2, rng, n_power_iterations=20, dtype=np.float64)
        >>> w = Tensor(np.diag([3.0, 1.0]))
        >>> normalized = spectral_normalize(w, state)
        >>> assert abs(np.linalg.svd(normalized.data, compute_uv=False)[0] - 1) < 1e-3
    """
    rows = weight.shape[dim]
    matrix = np.moveaxis(weight.data, dim, 0).reshape(rows, -1).astype(np.float64)
    u = state.u.astype(np.float64)

    if update:
        for _ in range(state.n_power_iterations):
            v = _l2_normalize(matrix.T @ u, eps)
            wv = matrix @ v
            if np.linalg.norm(wv) < eps:
                break
            u = _l2_normalize(wv, eps)
        state.u = u.astype(state.u.dtype)

    v = _l2_normalize(matrix.T @ u, eps)
    if float(u @ matrix @ v) < eps:
        return weight

    unfolded = weight
    if dim:
        axes = (dim,) + tuple(a for a in range(weight.ndim) if a != dim)
        unfolded = T.transpose(weight, axes)
    unfolded = T.reshape(unfolded, (rows, -1))
    u_column = Tensor(u[:, None], dtype=weight.dtype)
    v_column = Tensor(v[:, None], dtype=weight.dtype)
    sigma = T.sum(u_column * T.matmul(unfolded, v_column))
    return weight / sigma


def he_normal(rng, shape, fan_in, dtype=T.DEFAULT_DTYPE):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Module:
    """
    Base class of every network component. Parameters, spectral-norm states
    and sub-modules are plain attributes and are discovered in attribute
    order, which makes parameter names stable across runs.
    """

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _members(self):
        for name, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    yield f"{name}.{index}", item
            else:
                yield name, value

    def children(self):
        for name, value in self._members():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix=""):
        for name, value in self._members():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return OrderedDict((n, p) for n, p in self.named_parameters() if p.requires_grad)

    def named_buffers(self, prefix=""):
        for name, value in self._members():
            if isinstance(value, SpectralNormState):
                yield f"{prefix}{name}.u", value
            elif isinstance(value, Module):
                yield from value.named_buffers(prefix=f"{prefix}{name}.")

    def train(self, mode=True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for parameter in self.parameters():
            parameter.zero_grad()

    def astype(self, dtype):
        """
        Convert every parameter and buffer to ``dtype`` in place and return
        self. Used to switch a network to 64-bit for verification.
        """
        for parameter in self.parameters():
            parameter.data = parameter.data.astype(dtype)
            parameter.zero_grad()
        for _, state in self.named_buffers():
            state.u = state.u.astype(dtype)
        return self

    def state_dict(self):
        state = OrderedDict()
        for name, parameter in self.named_parameters():
            state[name] = parameter.data.copy()
        for name, buffer in self.named_buffers():
            state[name] = buffer.u.copy()
        return state

    def load_state_dict(self, state):
        """
        Replace parameters and buffers with the arrays of the ``state``
        mapping. Everything is validated before anything is assigned.
        """
        targets = OrderedDict(self.named_parameters())
        buffers = OrderedDict(self.named_buffers())
        expected = set(targets) | set(buffers)
        missing = sorted(expected - set(state))
        unexpected = sorted(set(state) - expected)
        if missing or unexpected:
            raise ConfigurationError(
                f"state mismatch: missing={missing[:5]!r} unexpected={unexpected[:5]!r}"
            )
        for name, parameter in targets.items():
            if state[name].shape != parameter.shape:
                raise DimensionError(
                    f"{name}: expected shape {parameter.shape}, got {state[name].shape}"
                )
        for name, buffer in buffers.items():
            if state[name].shape != buffer.u.shape:
                raise DimensionError(
                    f"{name}: expected shape {buffer.u.shape}, got {state[name].shape}"
                )

        for name, parameter in targets.items():
            parameter.data = np.array(state[name], dtype=state[name].dtype)
            parameter.zero_grad()
        for name, buffer in buffers.items():
            buffer.u = np.array(state[name], dtype=state[name].dtype)


class Conv2d(Module):
    """
    Convolution with He-normal weights, zero bias and optional spectral
    normalization. ``padding`` defaults to ``kernel_size // 2``.
    """

    def __init__(
        self,
        in_channels,
        out_channels,
        kernel_size=3,
        *,
        rng,
        stride=1,
        padding=None,
        bias=True,
        spectral=False,
        n_power_iterations=1,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = Parameter(he_normal(rng, shape, fan_in))
        self.bias = Parameter(np.zeros(out_channels, dtype=T.DEFAULT_DTYPE)) if bias else None
        self.spectral_norm = None
        if spectral:
            self.spectral_norm = SpectralNormState.create(
                out_channels, rng, n_power_iterations=n_power_iterations
            )

    def effective_weight(self):
        if self.spectral_norm is None:
            return self.weight
        return spectral_normalize(self.weight, self.spectral_norm, update=self.training)

    def forward(self, x):
        return T.conv2d(
            x, self.effective_weight(), self.bias, stride=self.stride, padding=self.padding
        )


class ConvTranspose2d(Module):
    """
    Transposed convolution, by default the (kernel 4, stride 2, padding 1)
    upsampling layer that doubles spatial extents. Spectral normalization
    unfolds the weight along its output-channel axis.
    """

    def __init__(
        self,
        in_channels,
        out_channels,
        kernel_size=4,
        *,
        rng,
        stride=2,
        padding=1,
        bias=True,
        spectral=False,
        n_power_iterations=1,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size // (stride * stride)
        shape = (in_channels, out_channels, kernel_size, kernel_size)
        self.weight = Parameter(he_normal(rng, shape, fan_in))
        self.bias = Parameter(np.zeros(out_channels, dtype=T.DEFAULT_DTYPE)) if bias else None
        self.spectral_norm = None
        if spectral:
            self.spectral_norm = SpectralNormState.create(
                out_channels, rng, n_power_iterations=n_power_iterations
            )

    def effective_weight(self):
        if self.spectral_norm is None:
            return self.weight
        return spectral_normalize(self.weight, self.spectral_norm, dim=1, update=self.training)

    def forward(self, x):
        return T.transposed_conv2d(
            x, self.effective_weight(), self.bias, stride=self.stride, padding=self.padding
        )


@attr.s(frozen=True)
class ChannelStats:
    """
    Per-channel mean ``mu`` and standard deviation ``sigma`` of an activation,
    both shaped (1, C, 1, 1) for broadcasting against (N, C, H, W).
    """

    mu = attr.ib(type=Tensor)
    sigma = attr.ib(type=Tensor)


def channel_stats(h):
    """
    Return the ChannelStats of ``h`` (N, C, H, W) reduced over batch and space:
    mu_c = mean(h) and sigma_c = sqrt(mean(h ** 2) - mu_c ** 2). The variance is
    taken in centred form, mean((h - mu_c) ** 2), with sums accumulated in 64-bit,
    so inputs with a large offset keep their spread in 32-bit.

    For example::

        >>> stats = channel_stats(Tensor(np.array([[[[0.0, 2.0]]]])))
        >>> assert stats.mu.item() == 1.0 and stats.sigma.item() == 1.0
    """
    if h.ndim != 4:
        raise DimensionError(f"channel_stats expects (N, C, H, W), got shape {h.shape}")
    n, _, height, width = h.shape
    if n * height * width < 1:
        raise ContractViolation("channel_stats of an empty tensor is undefined")
    mu = T.mean(h, axis=(0, 2, 3), keepdims=True)
    centred = h - mu
    sigma = T.sqrt(T.mean(centred * centred, axis=(0, 2, 3), keepdims=True))
    return ChannelStats(mu=mu, sigma=sigma)


class SelfAttention(Module):
    """
    Self-attention over spatial positions: 1x1 query and key projections
    reduced by ``reduction``, a full-width value projection and an output
    projection, blended in through a learnable scalar ``gamma`` that starts at
    zero, making a fresh layer the identity.
    """

    def __init__(self, channels, *, rng, reduction=8, spectral=True):
        super().__init__()
        if channels % reduction:
            raise ConfigurationError(
                f"attention channels {channels} are not divisible by reduction {reduction}"
            )
        self.channels = channels
        reduced = channels // reduction
        self.query = Conv2d(channels, reduced, 1, rng=rng, padding=0, spectral=spectral)
        self.key = Conv2d(channels, reduced, 1, rng=rng, padding=0, spectral=spectral)
        self.value = Conv2d(channels, channels, 1, rng=rng, padding=0, spectral=spectral)
        self.output = Conv2d(channels, channels, 1, rng=rng, padding=0, spectral=spectral)
        self.gamma = Parameter(np.zeros(1, dtype=T.DEFAULT_DTYPE))

    def attention_weights(self, x):
        """
        Return (N, HW, HW) weights; row i holds the softmax-normalized
        attention of position i over every position.
        """
        n, _, height, width = x.shape
        positions = height * width
        query = T.reshape(self.query(x), (n, -1, positions))
        key = T.reshape(self.key(x), (n, -1, positions))
        energy = T.matmul(T.transpose(query, (0, 2, 1)), key)
        return T.softmax(energy, axis=-1)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(
                f"self-attention expects {self.channels} channels, got shape {x.shape}"
            )
        n, channels, height, width = x.shape
        weights = self.attention_weights(x)
        value = T.reshape(self.value(x), (n, channels, height * width))
        attended = T.matmul(value, T.transpose(weights, (0, 2, 1)))
        attended = self.output(T.reshape(attended, (n, channels, height, width)))
        return x + T.reshape(self.gamma, (1, 1, 1, 1)) * attended


def self_attention(x, layer):
    return layer(x)


class ResidualDownBlock(Module):
    """
    Pre-activation residual block halving spatial extents:
    pool(conv2(lrelu(conv1(lrelu(x))))) + pool(skip(x)).
    """

    def __init__(self, in_channels, out_channels, *, rng, pool="avg", spectral=True):
        super().__init__()
        if pool not in POOLS:
            raise ConfigurationError(f"Unknown pooling kind: {pool!r}")
        self.pool = pool
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng=rng, spectral=spectral)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng=rng, spectral=spectral)
        self.skip = Conv2d(in_channels, out_channels, 1, rng=rng, padding=0, spectral=spectral)

    def forward(self, x):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise DimensionError(f"residual_down needs even height and width, got {x.shape[2:]}")
        pool = POOLS[self.pool]
        h = self.conv1(T.leaky_relu(x, NEGATIVE_SLOPE))
        h = self.conv2(T.leaky_relu(h, NEGATIVE_SLOPE))
        return pool(h) + pool(self.skip(x))


def residual_down(x, block):
    return block(x)
