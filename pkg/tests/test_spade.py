#
# Copyright (c) the fargan authors.
# SPDX-License-Identifier: Apache-2.0
#

import numpy as np
import pytest

from fargan import tensor as T
from fargan.errors import DimensionError
from fargan.spade import NoiseInjection
from fargan.spade import SpadeBlock
from fargan.spade import SpadeModule
from fargan.spade import adain_forward
from fargan.spade import instance_normalize
from fargan.spade import noise_inject
from fargan.spade import spade_block_forward
from fargan.spade import spade_forward
from tests.util_tests import DEEP_EPSILON
from tests.util_tests import TOLERANCE
from tests.util_tests import check_gradients
from tests.util_tests import random_tensor
from tests.util_tests import weighted_sum


def make_module(norm_channels=2, cond_channels=3, hidden=4, seed=0):
    module = SpadeModule(
        norm_channels, cond_channels, rng=np.random.default_rng(seed), hidden=hidden
    )
    return module.astype(np.float64)


def force_identity_modulation(module):
    module.gamma_head.weight.data[...] = 0
    module.gamma_head.bias.data[...] = 1
    module.beta_head.weight.data[...] = 0
    module.beta_head.bias.data[...] = 0


def standardized(rng, shape):
    h = rng.standard_normal(shape)
    mu = h.mean(axis=(0, 2, 3), keepdims=True)
    sigma = h.std(axis=(0, 2, 3), keepdims=True)
    return (h - mu) / sigma


def spade_oracle(h, gamma, beta, eps):
    n, c, height, width = h.shape
    out = np.zeros_like(h)
    count = n * height * width
    for k in range(c):
        total = 0.0
        squares = 0.0
        for b in range(n):
            for x in range(height):
                for y in range(width):
                    total += h[b, k, x, y]
                    squares += h[b, k, x, y] ** 2
        mu = total / count
        sigma = np.sqrt(squares / count - mu**2)
        for b in range(n):
            for x in range(height):
                for y in range(width):
                    normalized = (h[b, k, x, y] - mu) / (sigma + eps)
                    out[b, k, x, y] = gamma[b, k, x, y] * normalized + beta[b, k, x, y]
    return out


def test_identity_modulation_returns_standardized_input():
    rng = np.random.default_rng(0)
    module = make_module()
    force_identity_modulation(module)
    h = standardized(rng, (2, 2, 4, 4))
    m = rng.standard_normal((2, 3, 4, 4))
    out = spade_forward(T.Tensor(h), T.Tensor(m), module).data
    assert np.max(np.abs(out - h)) <= 1e-5 * np.max(np.abs(h)) + 1e-12


def test_constant_features_give_beta():
    rng = np.random.default_rng(1)
    module = make_module()
    h = T.Tensor(np.full((1, 2, 4, 4), 2.5))
    m = T.Tensor(rng.standard_normal((1, 3, 4, 4)))
    out = spade_forward(h, m, module).data
    _, beta = module.modulation(m)
    assert np.array_equal(out, beta.data)


def test_matches_scalar_loop_oracle():
    rng = np.random.default_rng(2)
    for seed in range(20):
        module = make_module(seed=seed)
        h = rng.standard_normal((1, 2, 2, 2))
        m = rng.standard_normal((1, 3, 2, 2))
        out = spade_forward(T.Tensor(h), T.Tensor(m), module).data
        gamma, beta = module.modulation(T.Tensor(m))
        expected = spade_oracle(h, gamma.data, beta.data, module.eps)
        assert np.max(np.abs(out - expected)) < 1e-6


def test_spatial_mismatch_raises():
    module = make_module()
    h = T.Tensor(np.zeros((1, 2, 4, 4)))
    m = T.Tensor(np.zeros((1, 3, 4, 5)))
    with pytest.raises(DimensionError, match="width axis"):
        spade_forward(h, m, module)


def test_gradients_with_respect_to_features_mask_and_weights():
    rng = np.random.default_rng(3)
    module = make_module(seed=3)
    h = random_tensor(rng, (2, 2, 3, 3))
    m = random_tensor(rng, (2, 3, 3, 3))
    weights = rng.standard_normal((2, 2, 3, 3))
    params = [module.shared.weight, module.gamma_head.weight, module.beta_head.bias]

    def loss():
        return weighted_sum(spade_forward(h, m, module), weights)

    assert check_gradients(loss, [h, m] + params, eps=DEEP_EPSILON) < TOLERANCE


def test_modulation_depends_on_mask():
    rng = np.random.default_rng(4)
    module = make_module(seed=4)
    h = T.Tensor(rng.standard_normal((1, 2, 4, 4)))
    m = T.Tensor(rng.standard_normal((1, 3, 4, 4)), requires_grad=True)
    T.sum(spade_forward(h, m, module) ** 2).backward()
    assert np.any(m.grad != 0)


def test_noise_with_zero_scale_is_identity():
    layer = NoiseInjection(3)
    x = T.Tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 4)).astype(np.float32))
    assert np.array_equal(noise_inject(x, layer, np.random.default_rng(1)).data, x.data)
    assert noise_inject(x, layer, None) is x


def test_noise_is_deterministic_per_seed():
    layer = NoiseInjection(3)
    layer.scale.data[...] = 1
    x = T.Tensor(np.zeros((1, 3, 5, 5), dtype=np.float32))
    first = noise_inject(x, layer, np.random.default_rng(9)).data
    second = noise_inject(x, layer, np.random.default_rng(9)).data
    assert np.array_equal(first, second)
    assert not np.array_equal(first, noise_inject(x, layer, np.random.default_rng(10)).data)


def test_noise_map_is_shared_across_channels_and_images():
    layer = NoiseInjection(2)
    layer.scale.data[...] = 1
    out = noise_inject(T.Tensor(np.zeros((3, 2, 4, 4))), layer, np.random.default_rng(0)).data
    assert out.shape == (3, 2, 4, 4)
    assert np.array_equal(out[0, 0], out[0, 1])
    assert np.array_equal(out[0], out[2])
    assert np.array_equal(out[0, 0], np.random.default_rng(0).standard_normal((4, 4)))


def test_noise_variance_matches_squared_scale():
    layer = NoiseInjection(3)
    scales = np.array([0.5, 1.0, 2.0])
    layer.scale.data = scales.astype(np.float64)
    x = T.Tensor(np.zeros((1, 3, 100, 100)))
    delta = noise_inject(x, layer, np.random.default_rng(5)).data - x.data
    variances = delta.reshape(3, -1).var(axis=1)
    assert np.all(np.abs(variances / scales**2 - 1) < 0.05)


def identity_conv(block, channels):
    weight = np.zeros((channels, channels, 3, 3))
    weight[np.arange(channels), np.arange(channels), 1, 1] = 1
    block.conv.weight.data = weight
    block.conv.bias.data = np.zeros(channels)


def test_block_composition_with_identity_parts():
    rng = np.random.default_rng(6)
    block = SpadeBlock(3, 3, 2, rng=rng, hidden=4).astype(np.float64)
    force_identity_modulation(block.spade)
    identity_conv(block, 3)
    x = rng.standard_normal((2, 3, 4, 4))
    m = T.Tensor(rng.standard_normal((2, 2, 4, 4)))
    out = spade_block_forward(T.Tensor(x), m, block, np.random.default_rng(0)).data

    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    sigma = x.std(axis=(0, 2, 3), keepdims=True)
    normalized = (x - mu) / (sigma + block.spade.eps)
    expected = np.where(normalized > 0, normalized, 0.2 * normalized)
    assert np.allclose(out, expected, atol=1e-10)


def test_block_shape_law():
    rng = np.random.default_rng(7)
    block = SpadeBlock(64, 64, 3, rng=rng)
    x = T.Tensor(rng.standard_normal((1, 64, 32, 32)).astype(np.float32))
    m = T.Tensor(rng.standard_normal((1, 3, 32, 32)).astype(np.float32))
    assert spade_block_forward(x, m, block, rng).shape == (1, 64, 32, 32)


def test_block_resizes_raw_masks():
    rng = np.random.default_rng(8)
    block = SpadeBlock(4, 2, 3, rng=rng, hidden=4)
    x = T.Tensor(rng.standard_normal((1, 4, 8, 8)).astype(np.float32))
    m = T.Tensor(rng.standard_normal((1, 3, 32, 32)).astype(np.float32))
    assert block(x, m).shape == (1, 2, 8, 8)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_block_gradients(seed):
    rng = np.random.default_rng(seed)
    block = SpadeBlock(2, 3, 2, rng=rng, hidden=4).astype(np.float64)
    block.noise.scale.data[...] = 0.3
    x = random_tensor(rng, (1, 2, 4, 4))
    m = random_tensor(rng, (1, 2, 4, 4))
    weights = rng.standard_normal((1, 3, 4, 4))
    params = [block.noise.scale, block.spade.shared.weight, block.conv.weight]

    def loss():
        out = spade_block_forward(x, m, block, np.random.default_rng(100 + seed))
        return weighted_sum(out, weights)

    assert check_gradients(loss, [x, m] + params, eps=DEEP_EPSILON) < TOLERANCE


def test_instance_normalize_flattens_constant_planes():
    h = T.Tensor(np.full((2, 3, 4, 4), 1.5))
    assert np.array_equal(instance_normalize(h).data, np.zeros((2, 3, 4, 4)))


def test_instance_normalize_with_a_large_offset_in_float32():
    rng = np.random.default_rng(0)
    h = (1000 + 0.1 * rng.standard_normal((2, 3, 8, 8))).astype(np.float32)
    out = instance_normalize(T.Tensor(h)).data
    assert out.dtype == np.float32
    assert np.allclose(out.std(axis=(2, 3)), 1, atol=1e-2)


def test_adain_washes_out_mask_layout_while_spade_keeps_it():
    rng = np.random.default_rng(9)
    h = T.Tensor(rng.standard_normal((1, 2, 6, 6)))
    left = np.zeros((1, 3, 6, 6))
    left[:, :, :, :3] = 1
    right = left[:, :, :, ::-1].copy()

    # AdaIN reads a per-channel summary of the mask, here its mean
    def adain(mask):
        summary = np.full((1, 2), mask.mean())
        return adain_forward(h, T.Tensor(1 + summary), T.Tensor(summary)).data

    assert np.array_equal(adain(left), adain(right))

    module = make_module(seed=9)
    spade_left = spade_forward(h, T.Tensor(left), module).data
    spade_right = spade_forward(h, T.Tensor(right), module).data
    assert not np.allclose(spade_left, spade_right)
