"""Seeded dataset generators for the sine and deblurring benchmarks."""

import logging

import numpy as np
from scipy.ndimage import convolve1d

from benchmarks.models import BlurSpec, SignalDomain, SignalSpec
from datasets.models import PairedDataset
from exceptions import ArgumentError


logger = logging.getLogger(__name__)


# Constants
SIGNAL_FREQUENCY = 5.0 * np.pi
INPUT_NOISE_MEAN = 1.5
INPUT_NOISE_STD = np.sqrt(0.8)
INPUT_NOISE_SCALE = 0.05
LABEL_NOISE_SCALE = 0.03
COSINES_PER_IMAGE = 5
BLUR_RADIUS_SIGMAS = 4.0


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def signal_gain(t):
    """Amplitude of the target-domain sine: 0.4 t + 1.3998."""
    return 0.4 * np.asarray(t) + 1.3998


def gen_signal(spec: SignalSpec) -> PairedDataset:
    """
    Sine samples on an equispaced grid.

    The source domain is noise free: (t, sin(5 pi t)). The target domain
    shifts the inputs by 0.05 xi with xi ~ N(1.5, 0.8), scales the sine by
    signal_gain(t) and adds 0.03 eta with eta ~ U(-1, 1).
    """
    t = np.linspace(spec.t_min, spec.t_max, spec.n)
    clean = np.sin(SIGNAL_FREQUENCY * t)
    if spec.domain is SignalDomain.SOURCE:
        return PairedDataset(t, clean, name='signal-source')

    rng = _rng(spec.noise_seed)
    xi = rng.normal(INPUT_NOISE_MEAN, INPUT_NOISE_STD, size=spec.n)
    eta = rng.uniform(-1.0, 1.0, size=spec.n)
    inputs = t + INPUT_NOISE_SCALE * xi
    labels = signal_gain(t) * clean + LABEL_NOISE_SCALE * eta
    return PairedDataset(inputs, labels, name='signal-target')


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps over radius max(1, ceil(4 sigma))."""
    if not sigma > 0:
        raise ArgumentError(f"blur sigma must be positive, got {sigma}")
    radius = max(1, int(np.ceil(BLUR_RADIUS_SIGMAS * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (x / sigma) ** 2)
    return taps / taps.sum()


def gaussian_blur(images: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur over the last two axes with reflective borders."""
    taps = gaussian_kernel(sigma)
    blurred = convolve1d(np.asarray(images, dtype=np.float64), taps, axis=-1, mode='reflect')
    return convolve1d(blurred, taps, axis=-2, mode='reflect')


def smooth_images(count: int, size: int, seed: int) -> np.ndarray:
    """(count, 1, size, size) sums of random 2-D cosines scaled to [0, 1]."""
    rng = _rng(seed)
    y, x = np.meshgrid(np.arange(size), np.arange(size), indexing='ij')
    images = np.zeros((count, 1, size, size))
    for n in range(count):
        image = np.zeros((size, size))
        for _ in range(COSINES_PER_IMAGE):
            fx, fy = rng.uniform(0.5, 3.0, size=2)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            amplitude = rng.uniform(0.5, 1.0)
            image += amplitude * np.cos(2.0 * np.pi * (fx * x + fy * y) / size + phase)
        span = image.max() - image.min()
        images[n, 0] = (image - image.min()) / span if span > 0 else 0.5
    return images


def gen_blur_pairs(spec: BlurSpec) -> tuple[PairedDataset, PairedDataset]:
    """
    (blurred, sharp) image pairs for the source and target blur levels.

    Both datasets share the same sharp label images; rows are flattened
    channel-major images.
    """
    sharp = smooth_images(spec.num_images, spec.image_size, spec.seed)
    labels = sharp.reshape(spec.num_images, -1)
    source = gaussian_blur(sharp, spec.blur_sigma_source).reshape(spec.num_images, -1)
    target = gaussian_blur(sharp, spec.blur_sigma_target).reshape(spec.num_images, -1)
    logger.debug(
        f"Generated {spec.num_images} {spec.image_size}x{spec.image_size} image pairs "
        f"(sigma {spec.blur_sigma_source} -> {spec.blur_sigma_target})"
    )
    return (
        PairedDataset(source, labels, name=f'blur-{spec.blur_sigma_source:g}'),
        PairedDataset(target, labels, name=f'blur-{spec.blur_sigma_target:g}'),
    )
