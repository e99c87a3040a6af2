#
# Copyright (c) the fargan authors.
# SPDX-License-Identifier: Apache-2.0
#

import logging

import attr
import numpy as np

from fargan import tensor as T
from fargan.errors import ConfigurationError
from fargan.errors import DimensionError
from fargan.landmarks import MASK_MODES
from fargan.layers import NEGATIVE_SLOPE
from fargan.layers import Conv2d
from fargan.layers import ConvTranspose2d
from fargan.layers import Module
from fargan.layers import ResidualDownBlock
from fargan.layers import SelfAttention
from fargan.spade import SPADE_HIDDEN
from fargan.spade import SpadeBlock

logger = logging.getLogger(__name__)

"""
The reenactment generator and the conditional patch discriminator.

The generator has two parts. The embedder turns a target landmark mask into a
feature pyramid, one map per resolution. The transformer is a U-Net over the
source image whose decoder stages are SPADE blocks, each conditioned on the
pyramid level of its resolution. The discriminator scores local patches of an
image concatenated with its landmark mask.
"""

SPADE_INPUTS = ("features", "masks")
MASK_CHANNELS = {"contour": 3, "binary": 1}


def _as_resolutions(value):
    return frozenset(int(v) for v in value)


@attr.s(frozen=True)
class NetworkConfig:
    """
    Shape and ablation switches shared by the generator and discriminator.
    """

    image_size = attr.ib(type=int, default=256)
    base_channels = attr.ib(type=int, default=64)
    max_channels = attr.ib(type=int, default=512)
    depth = attr.ib(type=int, default=5)
    attention_resolutions = attr.ib(default=(32, 64), converter=_as_resolutions)
    use_attention = attr.ib(type=bool, default=True)
    use_noise = attr.ib(type=bool, default=True)
    spade_input = attr.ib(type=str, default="features")
    mask_mode = attr.ib(type=str, default="contour")
    spade_hidden = attr.ib(type=int, default=SPADE_HIDDEN)
    embedder_pool = attr.ib(type=str, default="avg")

    def __attrs_post_init__(self):
        if self.depth < 1:
            raise ConfigurationError(f"depth must be at least 1, got {self.depth}")
        scale = 2**self.depth
        if self.image_size % scale or self.image_size // scale < 4:
            raise ConfigurationError(
                f"image_size {self.image_size} must be 2**depth ({scale}) times a "
                f"bottleneck size of at least 4"
            )
        if self.spade_input not in SPADE_INPUTS:
            raise ConfigurationError(f"Unknown spade_input: {self.spade_input!r}")
        if self.mask_mode not in MASK_MODES:
            raise ConfigurationError(f"Unknown mask_mode: {self.mask_mode!r}")
        if self.embedder_pool not in ("avg", "max"):
            raise ConfigurationError(f"Unknown embedder_pool: {self.embedder_pool!r}")
        if self.base_channels < 1 or self.max_channels < self.base_channels:
            raise ConfigurationError(
                f"invalid channel schedule: base={self.base_channels} max={self.max_channels}"
            )
        unknown = self.attention_resolutions - set(self.decoder_resolutions)
        if unknown:
            raise ConfigurationError(
                f"attention resolutions {sorted(unknown)} are not decoder resolutions "
                f"{sorted(self.decoder_resolutions)}"
            )

    @classmethod
    def full(cls, **overrides):
        """
        Return the full 256 x 256 configuration.
        """
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides):
        """
        Return the 64 x 64 desk configuration with attention scaled down to the
        16 and 32 resolutions.
        """
        settings = dict(
            image_size=64,
            base_channels=32,
            max_channels=256,
            depth=3,
            attention_resolutions=(16, 32),
            spade_hidden=64,
        )
        settings.update(overrides)
        return cls(**settings)

    @property
    def bottleneck_size(self):
        return self.image_size // 2**self.depth

    @property
    def mask_channels(self):
        return MASK_CHANNELS[self.mask_mode]

    @property
    def decoder_resolutions(self):
        """
        Resolutions produced by the decoder upsampling layers, largest first.
        """
        return tuple(self.resolution(k) for k in range(self.depth))

    def resolution(self, level):
        return self.image_size // 2**level

    def channels(self, level):
        """
        Return the channel count at pyramid ``level``: base * 2**level capped
        at max_channels.

        >>> config = NetworkConfig()
        >>> assert [config.channels(k) for k in range(6)] == [64, 128, 256, 512, 512, 512]
        """
        return min(self.base_channels * 2**level, self.max_channels)

    def cond_channels(self, level):
        if self.spade_input == "masks":
            return self.mask_channels
        return self.channels(level)


class Embedder(Module):
    """
    Input convolution followed by ``depth`` residual downsampling blocks. The
    output of each is one pyramid level.
    """

    def __init__(self, config, *, rng):
        super().__init__()
        self.config = config
        self.input_conv = Conv2d(
            config.mask_channels, config.channels(0), 3, rng=rng, spectral=True
        )
        self.blocks = [
            ResidualDownBlock(
                config.channels(k - 1),
                config.channels(k),
                rng=rng,
                pool=config.embedder_pool,
            )
            for k in range(1, config.depth + 1)
        ]

    def forward(self, m):
        return embed(m, self)


def _check_mask(m, config):
    if m.ndim != 4:
        raise DimensionError(f"mask must be (N, C, H, W), got shape {m.shape}")
    if m.shape[1] != config.mask_channels:
        raise ConfigurationError(
            f"{config.mask_mode} masks have {config.mask_channels} channels, got {m.shape[1]}"
        )


def embed(m, embedder):
    """
    Return the feature pyramid of mask ``m`` as a tuple of depth + 1 tensors,
    level k at 1 / 2**k of the mask resolution.
    """
    _check_mask(m, embedder.config)
    h = embedder.input_conv(m)
    pyramid = [h]
    for block in embedder.blocks:
        h = block(h)
        pyramid.append(h)
    return tuple(pyramid)


def mask_pyramid(m, depth):
    """
    Return ``m`` nearest-resized to every pyramid resolution, the conditioning
    used when SPADE reads raw masks instead of embedder features.
    """
    size = m.shape[2]
    return tuple(
        m if k == 0 else T.resize_nearest(m, (size // 2**k, size // 2**k))
        for k in range(depth + 1)
    )


class Downsample(Module):
    """
    Average pooling, then a spectral-normalized 3x3 convolution and leaky ReLU.
    """

    def __init__(self, in_channels, out_channels, *, rng):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 3, rng=rng, spectral=True)

    def forward(self, x):
        return T.leaky_relu(self.conv(T.avg_pool2d(x)), NEGATIVE_SLOPE)


class Transformer(Module):
    """
    U-Net over the source image. The encoder keeps one skip tensor per
    resolution; each decoder stage upsamples, optionally attends, concatenates
    the skip tensor of its resolution and applies a SPADE block conditioned on
    the matching pyramid level.
    """

    def __init__(self, config, *, rng):
        super().__init__()
        self.config = config
        self.use_skips = True
        depth = config.depth
        self.input_conv = Conv2d(3, config.channels(0), 3, rng=rng)
        self.downs = [
            Downsample(config.channels(k - 1), config.channels(k), rng=rng)
            for k in range(1, depth + 1)
        ]
        self.bottleneck = SpadeBlock(
            config.channels(depth),
            config.channels(depth),
            config.cond_channels(depth),
            rng=rng,
            hidden=config.spade_hidden,
            use_noise=config.use_noise,
        )

        self.ups = []
        self.attentions = []
        self.blocks = []
        for k in reversed(range(depth)):
            channels = config.channels(k)
            self.ups.append(
                ConvTranspose2d(config.channels(k + 1), channels, rng=rng, spectral=True)
            )
            attends = config.use_attention and config.resolution(k) in config.attention_resolutions
            self.attentions.append(SelfAttention(channels, rng=rng) if attends else None)
            self.blocks.append(
                SpadeBlock(
                    2 * channels,
                    channels,
                    config.cond_channels(k),
                    rng=rng,
                    hidden=config.spade_hidden,
                    use_noise=config.use_noise,
                )
            )
        self.output_conv = Conv2d(config.channels(0), 3, 3, rng=rng)

    def forward(self, x_src, pyramid, rng=None):
        return generate(x_src, pyramid, self, rng)


def generate(x_src, pyramid, transformer, rng=None):
    """
    Return the reenacted image for source ``x_src`` (N, 3, S, S) in [-1, 1]
    conditioned on ``pyramid``. Noise is drawn from the ``rng`` numpy Generator;
    without one the noise maps are zero and the output is deterministic.
    """
    config = transformer.config
    size = config.image_size
    if x_src.ndim != 4 or x_src.shape[1:] != (3, size, size):
        raise DimensionError(f"source must be (N, 3, {size}, {size}), got shape {x_src.shape}")
    if len(pyramid) != config.depth + 1:
        raise ConfigurationError(
            f"pyramid has {len(pyramid)} levels, the transformer expects {config.depth + 1}"
        )

    h = T.leaky_relu(transformer.input_conv(x_src), NEGATIVE_SLOPE)
    skips = [h]
    for down in transformer.downs:
        h = down(h)
        skips.append(h)

    h = transformer.bottleneck(h, pyramid[config.depth], rng)
    levels = reversed(range(config.depth))
    for level, up, attention, block in zip(
        levels, transformer.ups, transformer.attentions, transformer.blocks
    ):
        h = up(T.leaky_relu(h, NEGATIVE_SLOPE))
        if attention is not None:
            h = attention(h)
        skip = skips[level]
        if not transformer.use_skips:
            skip = T.Tensor(np.zeros_like(skip.data))
        h = block(T.concat([h, skip], axis=1), pyramid[level], rng)

    return T.tanh(transformer.output_conv(T.leaky_relu(h, NEGATIVE_SLOPE)))


class Generator(Module):
    """
    The full generator: x_hat = G(x_src, m).
    """

    def __init__(self, config, *, rng):
        super().__init__()
        self.config = config
        self.embedder = Embedder(config, rng=rng) if config.spade_input == "features" else None
        self.transformer = Transformer(config, rng=rng)
        logger.debug(
            "Built generator: %d parameters, spade_input=%s",
            len(self.parameters()),
            config.spade_input,
        )

    def pyramid(self, m):
        _check_mask(m, self.config)
        if self.embedder is None:
            return mask_pyramid(m, self.config.depth)
        return embed(m, self.embedder)

    def forward(self, x_src, m, rng=None):
        return generate(x_src, self.pyramid(m), self.transformer, rng)


class Discriminator(Module):
    """
    Conditional patch discriminator over image and mask channels: an input
    convolution, two stride-2 downsampling convolutions, self-attention after
    the second and a 4x4 head emitting one unbounded score per patch.
    """

    def __init__(self, config, *, rng):
        super().__init__()
        self.config = config
        base = min(config.base_channels, config.max_channels)
        middle = min(2 * base, config.max_channels)
        top = min(4 * base, config.max_channels)
        in_channels = 3 + config.mask_channels
        self.input_conv = Conv2d(in_channels, base, 3, rng=rng, spectral=True)
        self.down1 = Conv2d(base, middle, 4, rng=rng, stride=2, padding=1, spectral=True)
        self.down2 = Conv2d(middle, top, 4, rng=rng, stride=2, padding=1, spectral=True)
        self.attention = SelfAttention(top, rng=rng) if config.use_attention else None
        self.head = Conv2d(top, 1, 4, rng=rng, stride=1, padding=1)

    def patch_grid_size(self):
        """
        Return the side of the score grid for the configured image size.

        >>> d = Discriminator(NetworkConfig.desk(), rng=np.random.default_rng(0))
        >>> assert d.patch_grid_size() == 15
        """
        return self.config.image_size // 4 - 1

    def forward(self, img, mask):
        return discriminate(img, mask, self)


def discriminate(img, mask, discriminator):
    """
    Return the (N, 1, P, P) patch scores of ``img`` given its landmark ``mask``.
    """
    if img.ndim != 4 or mask.ndim != 4:
        raise DimensionError(f"expected 4-D image and mask, got {img.shape} and {mask.shape}")
    if img.shape[2] != mask.shape[2]:
        raise DimensionError(f"height axis mismatch: image {img.shape[2]}, mask {mask.shape[2]}")
    if img.shape[3] != mask.shape[3]:
        raise DimensionError(f"width axis mismatch: image {img.shape[3]}, mask {mask.shape[3]}")
    _check_mask(mask, discriminator.config)

    h = T.concat([img, mask], axis=1)
    h = T.leaky_relu(discriminator.input_conv(h), NEGATIVE_SLOPE)
    h = T.leaky_relu(discriminator.down1(h), NEGATIVE_SLOPE)
    h = T.leaky_relu(discriminator.down2(h), NEGATIVE_SLOPE)
    if discriminator.attention is not None:
        h = discriminator.attention(h)
    return discriminator.head(h)
