#
# Copyright (c) the fargan authors.
# SPDX-License-Identifier: Apache-2.0
#

import logging

import attr
import numpy as np

from fargan import checkpoint
from fargan import tensor as T
from fargan.errors import ConfigurationError
from fargan.errors import ContractViolation
from fargan.errors import DimensionError
from fargan.layers import NEGATIVE_SLOPE
from fargan.layers import Module
from fargan.layers import Parameter
from fargan.layers import he_normal

logger = logging.getLogger(__name__)

"""
Generator and discriminator objectives.

The generator minimizes a weighted sum of a least-squares adversarial term, a
pixel L1 term and two feature-space L1 terms computed with fixed feature
networks, one standing for a perceptual network and one for a face identity
network. The discriminator minimizes the least-squares objective pushing real
scores to 1 and fake scores to 0. Every term is a mean over elements.
"""

FEATURE_ROLES = ("perceptual", "identity")
FEATURE_SOURCES = ("seeded-random", "imported")
DEFAULT_FEATURE_CHANNELS = (16, 32, 64, 64)

# fixed seeds of the stand-in feature networks, independent of the training seed
PERCEPTUAL_SEED = 1019
IDENTITY_SEED = 2029


def _non_negative(instance, attribute, value):
    if value < 0:
        raise ConfigurationError(f"{attribute.name} must be non-negative, got {value!r}")


@attr.s(frozen=True)
class LossWeights:
    adv = attr.ib(type=float, default=1.0, converter=float, validator=_non_negative)
    l1 = attr.ib(type=float, default=20.0, converter=float, validator=_non_negative)
    perceptual = attr.ib(type=float, default=2.0, converter=float, validator=_non_negative)
    identity = attr.ib(type=float, default=0.2, converter=float, validator=_non_negative)


@attr.s(frozen=True)
class LossReport:
    """
    Scalar values of every loss term of one training step together with the
    weights they were combined with.
    """

    adv_g = attr.ib(type=float, default=0.0)
    l1 = attr.ib(type=float, default=0.0)
    perceptual = attr.ib(type=float, default=0.0)
    identity = attr.ib(type=float, default=0.0)
    total_g = attr.ib(type=float, default=0.0)
    adv_d_real = attr.ib(type=float, default=0.0)
    adv_d_fake = attr.ib(type=float, default=0.0)
    total_d = attr.ib(type=float, default=0.0)
    weights = attr.ib(type=LossWeights, factory=LossWeights)

    def recombined_total_g(self):
        w = self.weights
        return (
            w.adv * self.adv_g
            + w.l1 * self.l1
            + w.perceptual * self.perceptual
            + w.identity * self.identity
        )

    def recombined_total_d(self):
        return self.adv_d_real + self.adv_d_fake

    def merge(self, other):
        """
        Return a report with the generator fields of self and the
        discriminator fields of ``other``.
        """
        return attr.evolve(
            self,
            adv_d_real=other.adv_d_real,
            adv_d_fake=other.adv_d_fake,
            total_d=other.total_d,
        )

    def to_dict(self):
        values = attr.asdict(self, recurse=False)
        values["weights"] = attr.asdict(self.weights)
        return values


class FeatureNet(Module):
    """
    A fixed convolutional pyramid. Each stage is a convolution, an optional
    leaky ReLU and an optional 2x2 average pooling; the output of every stage
    is a tap. Weights never receive gradients.
    """

    def __init__(
        self,
        stages,
        role="perceptual",
        source="seeded-random",
        pool=True,
        activation=True,
    ):
        super().__init__()
        if role not in FEATURE_ROLES:
            raise ConfigurationError(f"Unknown feature network role: {role!r}")
        if source not in FEATURE_SOURCES:
            raise ConfigurationError(f"Unknown feature network source: {source!r}")
        if not stages:
            raise ConfigurationError("a feature network needs at least one stage")
        self.role = role
        self.source = source
        self.pool = pool
        self.activation = activation
        self.weights = [Parameter(w, requires_grad=False) for w, _ in stages]
        self.biases = [Parameter(b, requires_grad=False) for _, b in stages]

    @classmethod
    def seeded(cls, seed, role="perceptual", channels=DEFAULT_FEATURE_CHANNELS, in_channels=3):
        rng = np.random.default_rng(seed)
        stages = []
        previous = in_channels
        for width in channels:
            weight = he_normal(rng, (width, previous, 3, 3), previous * 9)
            stages.append((weight, np.zeros(width, dtype=weight.dtype)))
            previous = width
        return cls(stages, role=role)

    @classmethod
    def perceptual(cls):
        return cls.seeded(PERCEPTUAL_SEED, role="perceptual")

    @classmethod
    def identity(cls):
        return cls.seeded(IDENTITY_SEED, role="identity")

    @classmethod
    def from_file(cls, path, role="perceptual"):
        """
        Return a FeatureNet with stage weights imported from the container at
        ``path``, stored as ``weights.<i>`` and ``biases.<i>`` records.
        """
        records = checkpoint.load(path)
        stages = []
        index = 0
        while f"weights.{index}" in records:
            weight = records[f"weights.{index}"]
            bias = records.get(f"biases.{index}")
            if bias is None:
                bias = np.zeros(weight.shape[0], dtype=weight.dtype)
            stages.append((weight, bias))
            index += 1
        if not stages:
            raise ConfigurationError(f"no 'weights.0' record in feature network file {path}")
        logger.info("Imported %d-stage %s feature network from %s", len(stages), role, path)
        return cls(stages, role=role, source="imported")

    def save(self, path):
        checkpoint.save(path, self.state_dict())

    def extract(self, x):
        """
        Return the list of tap activations of image batch ``x``.
        """
        taps = []
        h = x
        for weight, bias in zip(self.weights, self.biases):
            h = T.conv2d(h, weight, bias, padding=weight.shape[2] // 2)
            if self.activation:
                h = T.leaky_relu(h, NEGATIVE_SLOPE)
            if self.pool:
                h = T.avg_pool2d(h)
            taps.append(h)
        return taps

    def pooled_features(self, images):
        """
        Return an (N, F) float64 array of the globally average-pooled final tap
        of the (N, 3, H, W) ``images`` array.
        """
        final = self.extract(T.Tensor(np.asarray(images)))[-1]
        return final.data.astype(np.float64).mean(axis=(2, 3))


def _check_scores(scores):
    if scores.size == 0:
        raise ContractViolation("cannot average an empty score grid")


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")


def adv_g(fake_scores):
    """
    Least-squares generator adversarial loss: mean((D(fake) - 1) ** 2).

    >>> assert adv_g(T.Tensor(np.array([0.5, 1.5]))).item() == 0.25
    """
    _check_scores(fake_scores)
    return T.mean((fake_scores - 1) ** 2)


def adv_d_terms(fake_scores, real_scores):
    """
    Return the (fake, real) least-squares discriminator terms.
    """
    _check_scores(fake_scores)
    _check_scores(real_scores)
    return T.mean(fake_scores**2), T.mean((real_scores - 1) ** 2)


def adv_d(fake_scores, real_scores):
    """
    Least-squares discriminator loss: mean(D(fake) ** 2) + mean((D(real) - 1) ** 2).
    """
    fake_term, real_term = adv_d_terms(fake_scores, real_scores)
    return fake_term + real_term


def l1_loss(x_hat, x):
    _check_same_shape(x_hat, x)
    return T.mean(T.abs(x_hat - x))


def feature_loss(x_hat, x, net):
    """
    Sum over the taps of ``net`` of the mean absolute activation difference.
    """
    _check_same_shape(x_hat, x)
    total = None
    for fake_tap, real_tap in zip(net.extract(x_hat), net.extract(x)):
        term = T.mean(T.abs(fake_tap - real_tap))
        total = term if total is None else total + term
    return total


def total_generator_loss(
    x_hat,
    x,
    perceptual_net,
    identity_net,
    fake_scores=None,
    weights=None,
):
    """
    Return (total, report) for the generator. ``total`` is the weighted sum
    Tensor to differentiate. Without ``fake_scores`` the adversarial term is
    dropped, as when training without a discriminator.
    """
    weights = weights or LossWeights()
    l1 = l1_loss(x_hat, x)
    perceptual = feature_loss(x_hat, x, perceptual_net)
    identity = feature_loss(x_hat, x, identity_net)
    total = weights.l1 * l1 + weights.perceptual * perceptual + weights.identity * identity
    adversarial = 0.0
    if fake_scores is not None:
        adversarial_term = adv_g(fake_scores)
        total = total + weights.adv * adversarial_term
        adversarial = adversarial_term.item()

    report = LossReport(
        adv_g=adversarial,
        l1=l1.item(),
        perceptual=perceptual.item(),
        identity=identity.item(),
        weights=weights,
    )
    report = attr.evolve(report, total_g=report.recombined_total_g())
    return total, report


def total_discriminator_loss(fake_scores, real_scores, weights=None):
    """
    Return (total, report) for the discriminator.
    """
    fake_term, real_term = adv_d_terms(fake_scores, real_scores)
    total = fake_term + real_term
    report = LossReport(
        adv_d_fake=fake_term.item(),
        adv_d_real=real_term.item(),
        weights=weights or LossWeights(),
    )
    report = attr.evolve(report, total_d=report.recombined_total_d())
    return total, report
