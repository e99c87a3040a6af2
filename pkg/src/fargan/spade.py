#
# Copyright (c) the fargan authors.
# SPDX-License-Identifier: Apache-2.0
#

import numpy as np

from fargan import tensor as T
from fargan.errors import DimensionError
from fargan.layers import NEGATIVE_SLOPE
from fargan.layers import Conv2d
from fargan.layers import Module
from fargan.layers import Parameter
from fargan.layers import channel_stats

"""
Spatially-adaptive normalization (SPADE), per-channel noise injection and the
SPADE convolution block used by every decoder stage of the generator.

A SPADE module normalizes a feature map h per channel with batch statistics
and modulates it with a per-pixel scale and bias predicted from a
conditioning map m:

    gamma(m) * (h - mu_c) / (sigma_c + eps) + beta(m)
"""

SPADE_EPSILON = 1e-5
SPADE_HIDDEN = 128


class SpadeModule(Module):
    """
    A shared 3x3 convolution with ReLU over the conditioning map followed by
    two 3x3 heads predicting gamma and beta. The gamma head bias starts at one
    so that a fresh module is close to plain normalization.
    """

    def __init__(
        self, norm_channels, cond_channels, *, rng, hidden=SPADE_HIDDEN, eps=SPADE_EPSILON
    ):
        super().__init__()
        self.norm_channels = norm_channels
        self.cond_channels = cond_channels
        self.eps = eps
        self.shared = Conv2d(cond_channels, hidden, 3, rng=rng)
        self.gamma_head = Conv2d(hidden, norm_channels, 3, rng=rng)
        self.beta_head = Conv2d(hidden, norm_channels, 3, rng=rng)
        self.gamma_head.bias.data = np.ones(norm_channels, dtype=self.gamma_head.bias.dtype)

    def modulation(self, m):
        """
        Return the (gamma, beta) tensors predicted from conditioning map ``m``.
        """
        hidden = T.relu(self.shared(m))
        return self.gamma_head(hidden), self.beta_head(hidden)

    def forward(self, h, m):
        return spade_forward(h, m, self)


def spade_forward(h, m, module):
    """
    Return ``h`` normalized with its channel statistics and modulated by the
    gamma and beta maps that ``module`` predicts from ``m``. ``m`` must already
    share the batch size and spatial extents of ``h``.
    """
    if h.ndim != 4 or m.ndim != 4:
        raise DimensionError(f"spade expects 4-D tensors, got {h.shape} and {m.shape}")
    if h.shape[0] != m.shape[0]:
        raise DimensionError(f"batch axis mismatch: features {h.shape[0]}, mask {m.shape[0]}")
    if h.shape[2] != m.shape[2]:
        raise DimensionError(f"height axis mismatch: features {h.shape[2]}, mask {m.shape[2]}")
    if h.shape[3] != m.shape[3]:
        raise DimensionError(f"width axis mismatch: features {h.shape[3]}, mask {m.shape[3]}")
    if h.shape[1] != module.norm_channels:
        raise DimensionError(
            f"channel axis mismatch: features {h.shape[1]}, module {module.norm_channels}"
        )

    stats = channel_stats(h)
    normalized = (h - stats.mu) / (stats.sigma + module.eps)
    gamma, beta = module.modulation(m)
    return gamma * normalized + beta


class NoiseInjection(Module):
    """
    Adds a standard Gaussian H x W noise map, shared across channels and
    scaled by a learnable per-channel factor that starts at zero.
    """

    def __init__(self, channels):
        super().__init__()
        self.channels = channels
        self.scale = Parameter(np.zeros(channels, dtype=T.DEFAULT_DTYPE))

    def forward(self, x, rng=None):
        return noise_inject(x, self, rng)


def noise_inject(x, layer, rng=None):
    """
    Return ``x + scale_c * z`` where ``z`` is a single standard normal H x W map
    drawn from the ``rng`` numpy Generator and broadcast over the batch and the
    channels. Without an ``rng`` the noise is taken as zero and ``x`` is
    returned unchanged.
    """
    if rng is None:
        return x
    _, channels, height, width = x.shape
    z = T.Tensor(rng.standard_normal((1, 1, height, width)).astype(x.dtype))
    return x + T.reshape(layer.scale, (1, channels, 1, 1)) * z


class SpadeBlock(Module):
    """
    Optional noise injection, SPADE modulation, leaky ReLU and a 3x3
    convolution. Spatial extents are preserved; channels go from
    ``in_channels`` to ``out_channels``.
    """

    def __init__(
        self,
        in_channels,
        out_channels,
        cond_channels,
        *,
        rng,
        hidden=SPADE_HIDDEN,
        use_noise=True,
    ):
        super().__init__()
        self.noise = NoiseInjection(in_channels) if use_noise else None
        self.spade = SpadeModule(in_channels, cond_channels, rng=rng, hidden=hidden)
        self.conv = Conv2d(in_channels, out_channels, 3, rng=rng)

    def forward(self, x, m, rng=None):
        return spade_block_forward(x, m, self, rng)


def spade_block_forward(x, m, block, rng=None):
    """
    Run ``block`` on ``x`` conditioned on ``m``. A conditioning map with other
    spatial extents (a raw mask) is nearest-resized to match ``x`` first.
    """
    if m.shape[2:] != x.shape[2:]:
        m = T.resize_nearest(m, x.shape[2:])
    h = x
    if block.noise is not None:
        h = noise_inject(h, block.noise, rng)
    h = spade_forward(h, m, block.spade)
    return block.conv(T.leaky_relu(h, NEGATIVE_SLOPE))


def instance_normalize(h, eps=SPADE_EPSILON):
    """
    Normalize each (image, channel) plane of ``h`` over its spatial extents.
    A spatially flat input normalizes to zero whatever its value.
    """
    mu = T.mean(h, axis=(2, 3), keepdims=True)
    centred = h - mu
    variance = T.mean(centred * centred, axis=(2, 3), keepdims=True)
    return centred / (T.sqrt(variance) + eps)


def adain_forward(h, style_gamma, style_beta, eps=SPADE_EPSILON):
    """
    Adaptive instance normalization: per-channel, spatially uniform scale
    ``style_gamma`` and bias ``style_beta`` (both (N, C)) applied to the
    instance-normalized ``h``. Only used to compare against SPADE.
    """
    n, channels = style_gamma.shape
    gamma = T.reshape(style_gamma, (n, channels, 1, 1))
    beta = T.reshape(style_beta, (n, channels, 1, 1))
    return gamma * instance_normalize(h, eps) + beta
