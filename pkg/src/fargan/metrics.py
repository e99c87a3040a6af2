#
# Copyright (c) the fargan authors.
# SPDX-License-Identifier: Apache-2.0
#

import logging

import attr
import numpy as np
from scipy import linalg
from scipy import signal

from fargan import tensor as T
from fargan.dataset import image_to_array
from fargan.errors import ContractViolation
from fargan.errors import DimensionError
from fargan.errors import NumericalInstabilityError
from fargan.landmarks import rasterize

logger = logging.getLogger(__name__)

"""
Image quality metrics: mean structural similarity between image pairs and the
Frechet distance between Gaussian fits of pooled network features of two image
sets.

Images are numpy arrays, either (H, W) grayscale or (C, H, W) with C = 1 or 3,
with values in [0, L] where L is the dynamic range of the SSIM parameters.
"""

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

# eigenvalues above this are clamped to 0, below it the fit is rejected
EIGENVALUE_TOLERANCE = -1e-6


def gaussian_window(size, sigma):
    """
    Return a normalized ``size`` x ``size`` Gaussian window.

    >>> window = gaussian_window(11, 1.5)
    >>> assert window.shape == (11, 11) and abs(window.sum() - 1) < 1e-12
    """
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2
    profile = np.exp(-(coords**2) / (2 * sigma**2))
    window = np.outer(profile, profile)
    return window / window.sum()


@attr.s(frozen=True)
class SsimParams:
    window_size = attr.ib(type=int, default=11)
    sigma = attr.ib(type=float, default=1.5)
    dynamic_range = attr.ib(type=float, default=1.0)
    k1 = attr.ib(type=float, default=0.01)
    k2 = attr.ib(type=float, default=0.03)

    @property
    def c1(self):
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self):
        return (self.k2 * self.dynamic_range) ** 2

    def window(self):
        return gaussian_window(self.window_size, self.sigma)


def to_grayscale(image):
    """
    Return a (H, W) float64 luma image of a (H, W) or (C, H, W) ``image``.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[0] == 1:
        return image[0]
    if image.ndim == 3 and image.shape[0] == 3:
        return np.tensordot(LUMA_WEIGHTS, image, axes=(0, 0))
    raise DimensionError(f"expected a (H, W), (1, H, W) or (3, H, W) image, got {image.shape}")


def ssim(a, b, params=None):
    """
    Return the mean local structural similarity of images ``a`` and ``b``
    over every valid window position.

    >>> x = np.linspace(0, 1, 16 * 16).reshape(16, 16)
    >>> assert abs(ssim(x, x) - 1) < 1e-9
    """
    params = params or SsimParams()
    a = to_grayscale(a)
    b = to_grayscale(b)
    if a.shape != b.shape:
        raise DimensionError(f"image shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < params.window_size:
        raise DimensionError(
            f"images of shape {a.shape} are smaller than the "
            f"{params.window_size}x{params.window_size} window"
        )

    window = params.window()

    def local_mean(image):
        return signal.convolve2d(image, window, mode="valid")

    mu_a = local_mean(a)
    mu_b = local_mean(b)
    var_a = local_mean(a * a) - mu_a * mu_a
    var_b = local_mean(b * b) - mu_b * mu_b
    cov_ab = local_mean(a * b) - mu_a * mu_b

    c1, c2 = params.c1, params.c2
    numerator = (2 * mu_a * mu_b + c1) * (2 * cov_ab + c2)
    denominator = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(numerator / denominator))


@attr.s(frozen=True, eq=False)
class FrechetStats:
    """
    Mean vector and covariance matrix of a set of feature vectors.
    """

    mu = attr.ib(repr=False)
    sigma = attr.ib(repr=False)
    count = attr.ib(type=int, default=0)

    def __attrs_post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        if mu.ndim != 1 or sigma.shape != (mu.size, mu.size):
            raise DimensionError(
                f"covariance of shape {sigma.shape} does not match a mean of shape {mu.shape}"
            )
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def dimension(self):
        return self.mu.size

    @classmethod
    def from_features(cls, features):
        """
        Return the sample mean and unbiased covariance of (N, F) ``features``.
        """
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] < 2:
            raise ContractViolation(
                f"need at least 2 feature vectors for a covariance, got shape {features.shape}"
            )
        sigma = np.atleast_2d(np.cov(features, rowvar=False, ddof=1))
        return cls(mu=features.mean(axis=0), sigma=sigma, count=features.shape[0])


def feature_stats(images, extractor, batch_size=16):
    """
    Return the FrechetStats of the globally pooled final-stage features of
    ``extractor`` over the (N, 3, H, W) ``images`` array.
    """
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[0] < 2:
        raise ContractViolation(
            f"need an (N, 3, H, W) image set with N >= 2, got shape {images.shape}"
        )
    features = np.concatenate(
        [
            extractor.pooled_features(images[start : start + batch_size])
            for start in range(0, images.shape[0], batch_size)
        ]
    )
    return FrechetStats.from_features(features)


def _psd_eigenvalues(matrix, what):
    eigenvalues = linalg.eigh(matrix, eigvals_only=True)
    smallest = eigenvalues.min()
    if smallest < EIGENVALUE_TOLERANCE:
        raise NumericalInstabilityError(
            f"{what} has eigenvalue {smallest:.3e} below {EIGENVALUE_TOLERANCE:.0e}"
        )
    return np.clip(eigenvalues, 0, None)


def _sqrtm_psd(matrix):
    eigenvalues, eigenvectors = linalg.eigh(matrix)
    if eigenvalues.min() < EIGENVALUE_TOLERANCE:
        raise NumericalInstabilityError(
            f"covariance has eigenvalue {eigenvalues.min():.3e} below {EIGENVALUE_TOLERANCE:.0e}"
        )
    roots = np.sqrt(np.clip(eigenvalues, 0, None))
    return (eigenvectors * roots) @ eigenvectors.T


def frechet_distance(s1, s2):
    """
    Return the Frechet distance between two Gaussian feature fits:
    |mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)). The trace of the matrix
    root is taken from the eigenvalues of the symmetric S1^(1/2) S2 S1^(1/2).

    >>> s1 = FrechetStats(mu=np.zeros(2), sigma=np.diag([1.0, 4.0]))
    >>> s2 = FrechetStats(mu=np.zeros(2), sigma=np.diag([4.0, 1.0]))
    >>> assert abs(frechet_distance(s1, s2) - 2) < 1e-12
    """
    if s1.dimension != s2.dimension:
        raise DimensionError(
            f"feature dimension mismatch: {s1.dimension} vs {s2.dimension}"
        )
    root = _sqrtm_psd(s1.sigma)
    product = root @ s2.sigma @ root
    product = (product + product.T) / 2
    trace_root = np.sqrt(_psd_eigenvalues(product, "S1^(1/2) S2 S1^(1/2)")).sum()
    delta = s1.mu - s2.mu
    distance = delta @ delta + np.trace(s1.sigma) + np.trace(s2.sigma) - 2 * trace_root
    return float(max(distance, 0.0))


def to_unit_range(images):
    """
    Map images from [-1, 1] to [0, 1].
    """
    return (np.asarray(images, dtype=np.float64) + 1) / 2


def contour_artifact_score(outputs, targets, masks):
    """
    Return the mean absolute reconstruction error at contour pixels minus the
    mean absolute error elsewhere, over (N, 3, H, W) ``outputs`` and
    ``targets`` in [-1, 1] and their contour MaskImages. Positive scores mean
    the mask drawing shows through the output.
    """
    outputs = np.asarray(outputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if outputs.shape != targets.shape:
        raise DimensionError(f"shape mismatch: {outputs.shape} vs {targets.shape}")
    on_contour = []
    off_contour = []
    for output, target, mask in zip(outputs, targets, masks):
        error = np.abs(output - target).mean(axis=0)
        drawn = mask.pixels.max(axis=2) > 0
        on_contour.append(error[drawn])
        off_contour.append(error[~drawn])
    on_contour = np.concatenate(on_contour)
    off_contour = np.concatenate(off_contour)
    if not on_contour.size or not off_contour.size:
        raise ContractViolation("masks must have both contour and background pixels")
    return float(on_contour.mean() - off_contour.mean())


@attr.s(frozen=True)
class EvaluationReport:
    ssim_mean = attr.ib(type=float)
    fid = attr.ib(type=float)
    n_images = attr.ib(type=int)

    def to_text(self):
        return f"ssim_mean={self.ssim_mean:.6f}\nfid={self.fid:.6f}\nn_images={self.n_images}\n"


def reenact_split(generator, manifest, split, size, mask_mode="contour", batch_size=8):
    """
    Return (outputs, targets, masks) reenacting, for every identity of
    ``split``, its first frame toward each of its other frames.
    """
    sources, targets, masks = [], [], []
    for identity in manifest.split(split):
        frames = manifest.frames[identity]
        if len(frames) < 2:
            logger.warning("Skipping identity %s: fewer than two frames", identity)
            continue
        source_image, _ = frames[0].load(size)
        source = image_to_array(source_image)
        for frame in frames[1:]:
            image, landmarks = frame.load(size)
            sources.append(source)
            targets.append(image_to_array(image))
            masks.append(rasterize(landmarks, size, mask_mode))
    if len(targets) < 2:
        raise ContractViolation(
            f"the {split} split yields {len(targets)} reenactment pairs, need 2"
        )

    was_training = generator.training
    generator.eval()
    outputs = []
    try:
        for start in range(0, len(targets), batch_size):
            x_src = T.Tensor(np.stack(sources[start : start + batch_size]))
            m = T.Tensor(np.stack([mask.to_array() for mask in masks[start : start + batch_size]]))
            outputs.append(generator(x_src, m).data)
    finally:
        generator.train(was_training)
    return np.concatenate(outputs), np.stack(targets), masks


def evaluate_reenactment(
    generator,
    manifest,
    extractor,
    split="test",
    size=None,
    mask_mode=None,
    params=None,
):
    """
    Return an EvaluationReport of SSIM and Frechet distance between the
    reenacted and the real target frames of ``split``.
    """
    config = generator.config
    size = size or config.image_size
    mask_mode = mask_mode or config.mask_mode
    outputs, targets, _ = reenact_split(generator, manifest, split, size, mask_mode)

    fake_images = to_unit_range(outputs)
    real_images = to_unit_range(targets)
    scores = [ssim(fake, real, params) for fake, real in zip(fake_images, real_images)]
    fid = frechet_distance(feature_stats(targets, extractor), feature_stats(outputs, extractor))
    report = EvaluationReport(ssim_mean=float(np.mean(scores)), fid=fid, n_images=len(scores))
    logger.info(
        "Evaluated %d %s images: ssim=%.4f fid=%.4f",
        report.n_images,
        split,
        report.ssim_mean,
        fid,
    )
    return report
