"""Elastic-deformation augmentation: smoothed random displacement fields.

Each image gets two uniform [-1, 1] fields, Gaussian-smoothed (separable,
truncated at 3*sigma, zero padding) and scaled; pixels are pulled from the
displaced source coordinates by bilinear interpolation with clamp-to-edge
borders. Deterministic given (seed, image index); labels pass through.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from protonet import kernels


@dataclass(frozen=True)
class ElasticParams:
    sigma: float = 4.0
    alpha: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Normalized symmetric Gaussian taps, radius ceil(3*sigma)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def displacement_fields(h: int, w: int, params: ElasticParams, image_index: int):
    """The (dy, dx) fields for one image, before sampling."""
    rng = np.random.default_rng(np.random.SeedSequence([params.seed, image_index]))
    raw = rng.uniform(-1.0, 1.0, size=(2, h, w))
    k = gaussian_kernel_1d(params.sigma)
    smoothed = convolve1d(raw, k, axis=1, mode="constant")
    smoothed = convolve1d(smoothed, k, axis=2, mode="constant")
    dy, dx = smoothed * params.alpha
    return dy, dx


def elastic_deform(batch: np.ndarray, params: ElasticParams, threads: int = 1) -> np.ndarray:
    """Deform a [b, H, W, C] batch; alpha = 0 is the exact identity."""
    b, h, w, _ = batch.shape
    if h < 2 or w < 2:
        raise ValueError("images must be at least 2x2")
    if params.alpha == 0.0:
        return batch.copy()

    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    src_y = np.empty((b, h, w))
    src_x = np.empty((b, h, w))

    def fill(i):
        dy, dx = displacement_fields(h, w, params, i)
        src_y[i] = rows + dy
        src_x[i] = cols + dx

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, range(b)))
    else:
        for i in range(b):
            fill(i)
    return kernels.bilinear_sample(np.ascontiguousarray(batch), src_y, src_x)
