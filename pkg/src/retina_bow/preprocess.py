"""Green-channel illumination and contrast normalization."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .imgcore import RgbImage, median_filter, median_kernel_size

log = logging.getLogger(__name__)

DEGENERATE_STD = 1e-12


@dataclass(frozen=True)
class NormalizationParams:
    mu_ref: float = 0.5
    sigma_ref: float = 0.1

    def __post_init__(self):
        if not self.sigma_ref > 0:
            raise ValueError("sigma_ref must be positive")


def normalize_plane(
    plane: np.ndarray, params: NormalizationParams = NormalizationParams()
) -> tuple[np.ndarray, bool]:
    """Subtract the median background, then match mean/std to the reference.

    Returns ``(out, degenerate)``. When the background-free plane has no
    spread the output is the constant ``mu_ref`` and ``degenerate`` is True.
    The result is not clipped to [0, 1].
    """
    plane = np.asarray(plane, dtype=np.float64)
    k = median_kernel_size(plane.shape[0])
    residual = plane - median_filter(plane, k)
    mu = residual.mean()
    sigma = residual.std()
    if sigma < DEGENERATE_STD:
        return np.full_like(residual, params.mu_ref), True
    out = (residual - mu) / sigma * params.sigma_ref + params.mu_ref
    return out, False


def normalize_green(
    img: RgbImage, params: NormalizationParams = NormalizationParams()
) -> np.ndarray:
    out, degenerate = normalize_plane(img.green, params)
    if degenerate:
        log.warning("green channel has no contrast after background removal")
    return out


def prepare_channels(
    img: RgbImage, params: NormalizationParams = NormalizationParams()
) -> RgbImage:
    """Normalize green only; red and blue pass through untouched."""
    return RgbImage(img.red, normalize_green(img, params), img.blue)
