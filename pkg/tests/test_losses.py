#
# Copyright (c) the fargan authors.
# SPDX-License-Identifier: Apache-2.0
#

from unittest import TestCase

import numpy as np
import pytest

from fargan import checkpoint
from fargan import tensor as T
from fargan.errors import ConfigurationError
from fargan.errors import ContractViolation
from fargan.errors import DimensionError
from fargan.losses import FeatureNet
from fargan.losses import LossReport
from fargan.losses import LossWeights
from fargan.losses import adv_d
from fargan.losses import adv_g
from fargan.losses import feature_loss
from fargan.losses import l1_loss
from fargan.losses import total_discriminator_loss
from fargan.losses import total_generator_loss
from tests.util_tests import TOLERANCE
from tests.util_tests import check_gradients
from tests.util_tests import random_tensor


def scores(*values):
    return T.Tensor(np.array(values, dtype=np.float64))


def small_net(seed=0, role="perceptual"):
    return FeatureNet.seeded(seed, role=role, channels=(4, 6))


class TestAdversarial(TestCase):
    def test_generator_examples(self):
        assert adv_g(T.Tensor(np.ones((2, 1, 3, 3)))).item() == 0
        assert adv_g(T.Tensor(np.zeros((2, 1, 3, 3)))).item() == 1
        assert adv_g(scores(0.5, 1.5)).item() == 0.25

    def test_discriminator_examples(self):
        assert adv_d(T.Tensor(np.zeros((1, 1, 3, 3))), T.Tensor(np.ones((1, 1, 3, 3)))).item() == 0
        assert adv_d(T.Tensor(np.ones((1, 1, 3, 3))), T.Tensor(np.zeros((1, 1, 3, 3)))).item() == 2
        assert adv_d(scores(0.5), scores(0.5)).item() == 0.5

    def test_empty_scores_raise(self):
        with pytest.raises(ContractViolation):
            adv_g(T.Tensor(np.zeros((1, 1, 0, 0))))
        with pytest.raises(ContractViolation):
            adv_d(scores(0.0), T.Tensor(np.zeros(0)))

    def test_gradients(self):
        rng = np.random.default_rng(0)
        fake = random_tensor(rng, (2, 1, 3, 3))
        real = random_tensor(rng, (2, 1, 3, 3))
        assert check_gradients(lambda: adv_g(fake), [fake]) < TOLERANCE
        assert check_gradients(lambda: adv_d(fake, real), [fake, real]) < TOLERANCE


class TestPixelLoss(TestCase):
    def test_examples(self):
        x = np.random.default_rng(0).uniform(-1, 1, (2, 3, 4, 4))
        assert l1_loss(T.Tensor(x), T.Tensor(x)).item() == 0
        assert abs(l1_loss(T.Tensor(x + 0.5), T.Tensor(x)).item() - 0.5) < 1e-12

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((2, 3, 4, 5))
        b = rng.standard_normal((2, 3, 4, 5))
        total = 0.0
        for index in np.ndindex(a.shape):
            total += abs(a[index] - b[index])
        assert abs(l1_loss(T.Tensor(a), T.Tensor(b)).item() - total / a.size) < 1e-7

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            l1_loss(T.Tensor(np.zeros((1, 3, 4, 4))), T.Tensor(np.zeros((1, 3, 4, 2))))

    def test_gradients(self):
        rng = np.random.default_rng(2)
        x_hat = random_tensor(rng, (1, 3, 4, 4))
        x = T.Tensor(rng.standard_normal((1, 3, 4, 4)))
        assert check_gradients(lambda: l1_loss(x_hat, x), [x_hat]) < TOLERANCE


class TestFeatureLoss(TestCase):
    def test_identical_images(self):
        x = T.Tensor(np.random.default_rng(0).uniform(-1, 1, (1, 3, 16, 16)).astype(np.float32))
        assert feature_loss(x, x, FeatureNet.perceptual()).item() == 0

    def test_non_decreasing_in_noise_level(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-1, 1, (2, 3, 16, 16))
        noise = rng.standard_normal(x.shape)
        net = FeatureNet.perceptual()
        values = [
            feature_loss(T.Tensor(x + sigma * noise), T.Tensor(x), net).item()
            for sigma in (0.01, 0.1, 0.5)
        ]
        assert values == sorted(values)
        assert values[0] > 0

    def test_identity_net_reduces_to_pixel_loss(self):
        weight = np.eye(3).reshape(3, 3, 1, 1)
        net = FeatureNet([(weight, np.zeros(3))], pool=False, activation=False)
        rng = np.random.default_rng(2)
        a = T.Tensor(rng.standard_normal((1, 3, 5, 5)))
        b = T.Tensor(rng.standard_normal((1, 3, 5, 5)))
        assert abs(feature_loss(a, b, net).item() - l1_loss(a, b).item()) < 1e-12

    def test_taps_are_finite(self):
        x = T.Tensor(np.random.default_rng(3).uniform(-1, 1, (1, 3, 16, 16)).astype(np.float32))
        for tap in FeatureNet.identity().extract(x):
            assert np.all(np.isfinite(tap.data))

    def test_gradients(self):
        rng = np.random.default_rng(4)
        net = small_net()
        for parameter in net.parameters():
            parameter.data = parameter.data.astype(np.float64)
        x_hat = random_tensor(rng, (1, 3, 8, 8))
        x = T.Tensor(rng.standard_normal((1, 3, 8, 8)))

        def loss():
            return feature_loss(x_hat, x, net)

        assert check_gradients(loss, [x_hat], samples=24) < TOLERANCE


class TestFeatureNet(TestCase):
    def test_roles_use_different_weights(self):
        perceptual = FeatureNet.perceptual()
        identity = FeatureNet.identity()
        assert perceptual.role == "perceptual" and identity.role == "identity"
        assert not np.array_equal(perceptual.weights[0].data, identity.weights[0].data)

    def test_seeded_nets_are_reproducible(self):
        assert np.array_equal(
            FeatureNet.perceptual().weights[-1].data, FeatureNet.perceptual().weights[-1].data
        )

    def test_weights_are_frozen(self):
        net = small_net()
        assert not net.trainable_parameters()
        before = [w.data.copy() for w in net.weights]
        x_hat = T.Tensor(np.zeros((1, 3, 8, 8), dtype=np.float32), requires_grad=True)
        x = T.Tensor(np.ones((1, 3, 8, 8), dtype=np.float32))
        feature_loss(x_hat, x, net).backward()
        assert x_hat.grad is not None
        for weight, original in zip(net.weights, before):
            assert weight.grad is None
            assert np.array_equal(weight.data, original)

    def test_pooled_features_shape(self):
        images = np.zeros((5, 3, 16, 16), dtype=np.float32)
        features = FeatureNet.perceptual().pooled_features(images)
        assert features.shape == (5, 64)
        assert features.dtype == np.float64

    def test_invalid_arguments(self):
        with pytest.raises(ConfigurationError):
            FeatureNet([], role="perceptual")
        with pytest.raises(ConfigurationError):
            small_net(role="style")


def test_save_and_import(tmp_path):
    net = small_net(seed=5)
    path = str(tmp_path / "features.farg")
    net.save(path)
    imported = FeatureNet.from_file(path, role="identity")
    assert imported.source == "imported"
    assert imported.role == "identity"
    for mine, theirs in zip(net.weights, imported.weights):
        assert np.array_equal(mine.data, theirs.data)


def test_import_without_stages_raises(tmp_path):
    path = str(tmp_path / "empty.farg")
    checkpoint.save(path, {"something": np.zeros(2, dtype=np.float32)})
    with pytest.raises(ConfigurationError, match="weights.0"):
        FeatureNet.from_file(path)


def test_negative_weights_are_rejected():
    with pytest.raises(ConfigurationError):
        LossWeights(l1=-1)


def test_perfect_generator_has_zero_total():
    x = T.Tensor(np.random.default_rng(0).uniform(-1, 1, (1, 3, 8, 8)))
    fooled = T.Tensor(np.ones((1, 1, 1, 1)))
    total, report = total_generator_loss(x, x, small_net(0), small_net(1, "identity"), fooled)
    assert total.item() == 0
    assert report.total_g == 0


def test_report_recombines_the_terms():
    rng = np.random.default_rng(1)
    x_hat = T.Tensor(rng.uniform(-1, 1, (2, 3, 8, 8)))
    x = T.Tensor(rng.uniform(-1, 1, (2, 3, 8, 8)))
    fake = T.Tensor(rng.standard_normal((2, 1, 3, 3)))
    weights = LossWeights(adv=1, l1=20, perceptual=2, identity=0.2)
    total, report = total_generator_loss(
        x_hat, x, small_net(0), small_net(1, "identity"), fake, weights
    )
    assert report.weights == weights
    assert abs(report.total_g - report.recombined_total_g()) < 1e-7
    assert abs(total.item() - report.total_g) < 1e-7
    for term in (report.adv_g, report.l1, report.perceptual, report.identity):
        assert term > 0


def test_generator_loss_without_discriminator():
    rng = np.random.default_rng(2)
    x_hat = T.Tensor(rng.uniform(-1, 1, (1, 3, 8, 8)))
    x = T.Tensor(rng.uniform(-1, 1, (1, 3, 8, 8)))
    _, report = total_generator_loss(x_hat, x, small_net(0), small_net(1, "identity"))
    assert report.adv_g == 0
    assert abs(report.total_g - report.recombined_total_g()) < 1e-7


def test_discriminator_report_and_merge():
    fake = T.Tensor(np.full((1, 1, 2, 2), 0.5))
    real = T.Tensor(np.full((1, 1, 2, 2), 0.5))
    total, report = total_discriminator_loss(fake, real)
    assert total.item() == 0.5
    assert report.adv_d_fake == 0.25 and report.adv_d_real == 0.25
    assert report.total_d == report.recombined_total_d()

    merged = LossReport(l1=1.0, total_g=20.0).merge(report)
    assert merged.l1 == 1.0 and merged.total_d == 0.5
    values = merged.to_dict()
    assert values["weights"]["l1"] == 20.0
    assert values["adv_d_fake"] == 0.25
