"""Pixel-level containers and primitives.

Planes are plain 2-D ``float64`` numpy arrays indexed ``[row, col]``; an
:class:`RgbImage` bundles three of them. Integral images carry one extra
zero row and column so that ``ii[y, x]`` is the sum of every source pixel
strictly above and to the left of ``(x, y)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

DEFAULT_HEIGHT = 512


class ImageError(ValueError):
    """Raised for unreadable, unsupported or degenerate images."""


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RgbImage:
    red: np.ndarray
    green: np.ndarray
    blue: np.ndarray

    def __post_init__(self):
        r, g, b = (_frozen(p) for p in (self.red, self.green, self.blue))
        if r.ndim != 2 or r.shape != g.shape or r.shape != b.shape:
            raise ImageError("channel planes must be 2-D and share one shape")
        if r.shape[0] < 1 or r.shape[1] < 1:
            raise ImageError("zero-dimension image")
        object.__setattr__(self, "red", r)
        object.__setattr__(self, "green", g)
        object.__setattr__(self, "blue", b)

    @classmethod
    def from_array(cls, rgb: np.ndarray) -> "RgbImage":
        """Build from an ``(H, W, 3)`` array in R, G, B order."""
        rgb = np.asarray(rgb)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ImageError(f"expected (H, W, 3) array, got {rgb.shape}")
        return cls(rgb[..., 0], rgb[..., 1], rgb[..., 2])

    @property
    def height(self) -> int:
        return self.red.shape[0]

    @property
    def width(self) -> int:
        return self.red.shape[1]

    @property
    def channels(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.red, self.green, self.blue

    def to_array(self) -> np.ndarray:
        return np.stack(self.channels, axis=-1)


def load_image(path) -> RgbImage:
    """Decode a raster file into an :class:`RgbImage` scaled to [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise ImageError(f"no such file: {path}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageError(f"cannot decode image: {path}")
    if raw.size == 0:
        raise ImageError(f"zero-dimension image: {path}")
    if np.issubdtype(raw.dtype, np.integer):
        scale = float(np.iinfo(raw.dtype).max)
    else:
        scale = 1.0
    if raw.ndim == 2:
        raw = np.repeat(raw[..., None], 3, axis=2)
    elif raw.shape[2] == 4:
        raw = raw[..., :3]
    # cv2 decodes to BGR
    rgb = raw[..., ::-1].astype(np.float64) / scale
    return RgbImage.from_array(rgb)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def resize_to_height(img: RgbImage, target: int = DEFAULT_HEIGHT) -> RgbImage:
    """Bilinear resize to ``target`` rows, width scaled to keep the aspect ratio."""
    if target < 1:
        raise ValueError("target height must be >= 1")
    if img.height == target:
        return img
    width = max(1, _round_half_up(img.width * target / img.height))
    planes = [
        cv2.resize(p, (width, target), interpolation=cv2.INTER_LINEAR)
        for p in img.channels
    ]
    return RgbImage(*planes)


def integral_image(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    ii = np.zeros((p.shape[0] + 1, p.shape[1] + 1), dtype=np.float64)
    np.cumsum(p, axis=0, out=ii[1:, 1:])
    np.cumsum(ii[1:, 1:], axis=1, out=ii[1:, 1:])
    return ii


def box_sum(ii: np.ndarray, x, y, w, h):
    """Sum of source pixels in the rectangle ``[x, x+w) x [y, y+h)``.

    Accepts scalars or broadcastable integer arrays. Rectangles are clipped to
    the image first, so anything lying fully outside sums to zero.
    """
    rows, cols = ii.shape[0] - 1, ii.shape[1] - 1
    x0 = np.clip(x, 0, cols)
    y0 = np.clip(y, 0, rows)
    x1 = np.clip(np.add(x, w), 0, cols)
    y1 = np.clip(np.add(y, h), 0, rows)
    x1 = np.maximum(x1, x0)
    y1 = np.maximum(y1, y0)
    s = ii[y1, x1] + ii[y0, x0] - (ii[y0, x1] + ii[y1, x0])
    return s if np.ndim(s) else float(s)


def median_kernel_size(height: int) -> int:
    """Background median window: about a thirtieth of the height, odd."""
    k = max(1, _round_half_up(height / 30))
    return k if k % 2 else k + 1


def _on_byte_grid(p: np.ndarray) -> bool:
    if p.min() < 0.0 or p.max() > 1.0:
        return False
    return bool(np.array_equal(np.round(p * 255.0) / 255.0, p))


def median_filter(p: np.ndarray, k: int) -> np.ndarray:
    """k x k median with edge replication at the borders."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"median window must be odd and positive, got {k}")
    p = np.asarray(p, dtype=np.float64)
    if k == 1:
        return p.copy()
    if _on_byte_grid(p):
        # exact: an odd-window median is one of the window's own values, and
        # medianBlur replicates borders for 8-bit input
        u8 = np.round(p * 255.0).astype(np.uint8)
        return cv2.medianBlur(u8, k).astype(np.float64) / 255.0
    return ndimage.median_filter(p, size=k, mode="nearest")
