"""Uniform 3 x 3 local binary patterns over a 32 x 32 patch grid."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .features import FeatureMatrix, Kind, NoDescriptorsError
from .imgcore import RgbImage

PATCH = 32
UNIFORM_BINS = 58
NON_UNIFORM = -1
BLACK_LEVEL = 1e-6

# neighbour p contributes 2**p; clockwise from the top-left corner
NEIGHBOURS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


def lbp_code(window) -> int:
    w = np.asarray(window)
    centre = w[1, 1]
    return sum(1 << p for p, (dy, dx) in enumerate(NEIGHBOURS) if w[1 + dy, 1 + dx] >= centre)


def circular_transitions(code: int) -> int:
    bits = [(code >> i) & 1 for i in range(8)]
    return sum(bits[i] != bits[(i + 1) % 8] for i in range(8))


@lru_cache(maxsize=None)
def build_uniform_table() -> np.ndarray:
    """Lookup from 8-bit code to bin 0..57, NON_UNIFORM for the rest."""
    table = np.full(256, NON_UNIFORM, dtype=np.int64)
    nxt = 0
    for code in range(256):
        if circular_transitions(code) <= 2:
            table[code] = nxt
            nxt += 1
    table.setflags(write=False)
    return table


def code_map(plane: np.ndarray) -> np.ndarray:
    """Codes for every pixel with a full 3 x 3 neighbourhood (shape H-2, W-2)."""
    p = np.asarray(plane, dtype=np.float64)
    h, w = p.shape
    centre = p[1:-1, 1:-1]
    codes = np.zeros(centre.shape, dtype=np.int64)
    for bit, (dy, dx) in enumerate(NEIGHBOURS):
        nb = p[1 + dy:h - 1 + dy, 1 + dx:w - 1 + dx]
        codes |= (nb >= centre).astype(np.int64) << bit
    return codes


def lbp_patch_histogram(plane: np.ndarray, y: int, x: int, table=None):
    """L1-normalized 58-bin histogram of the patch's 30 x 30 interior.

    Returns None for a null patch (black surround or no uniform code).
    """
    if table is None:
        table = build_uniform_table()
    p = np.asarray(plane, dtype=np.float64)
    if y < 0 or x < 0 or y + PATCH > p.shape[0] or x + PATCH > p.shape[1]:
        raise ValueError("patch must lie inside the plane")
    patch = p[y:y + PATCH, x:x + PATCH]
    if patch.max() < BLACK_LEVEL:
        return None
    bins = table[code_map(patch)]
    bins = bins[bins != NON_UNIFORM]
    if bins.size == 0:
        return None
    hist = np.bincount(bins, minlength=UNIFORM_BINS).astype(np.float64)
    return hist / hist.sum()


def lbp_plane(plane: np.ndarray, table=None):
    """Row-major ``(n_patches, 58)`` histograms and a per-patch null mask."""
    if table is None:
        table = build_uniform_table()
    p = np.asarray(plane, dtype=np.float64)
    npy, npx = p.shape[0] // PATCH, p.shape[1] // PATCH
    # codes computed over the whole plane equal per-patch codes at interior pixels
    bins = table[code_map(p[: npy * PATCH, : npx * PATCH])]
    bins = np.pad(bins, 1, constant_values=NON_UNIFORM)
    bins = bins.reshape(npy, PATCH, npx, PATCH).transpose(0, 2, 1, 3)
    bins[:, :, [0, -1], :] = NON_UNIFORM
    bins[:, :, :, [0, -1]] = NON_UNIFORM
    bins = bins.reshape(npy * npx, PATCH * PATCH)
    patch_id = np.repeat(np.arange(npy * npx), PATCH * PATCH).reshape(bins.shape)
    valid = bins != NON_UNIFORM
    counts = np.bincount(
        (patch_id[valid] * UNIFORM_BINS + bins[valid]),
        minlength=npy * npx * UNIFORM_BINS,
    ).reshape(npy * npx, UNIFORM_BINS).astype(np.float64)
    peak = p[: npy * PATCH, : npx * PATCH].reshape(npy, PATCH, npx, PATCH).max(axis=(1, 3))
    totals = counts.sum(axis=1)
    null = (peak.ravel() < BLACK_LEVEL) | (totals == 0)
    hist = np.zeros_like(counts)
    hist[~null] = counts[~null] / totals[~null, None]
    return hist, null


def lbp_image(img: RgbImage) -> FeatureMatrix:
    if img.height < PATCH or img.width < PATCH:
        raise NoDescriptorsError("image smaller than one LBP patch")
    hists, nulls = zip(*(lbp_plane(p) for p in img.channels))
    keep = ~np.logical_and.reduce(nulls)
    if not keep.any():
        raise NoDescriptorsError("every LBP patch is null")
    return FeatureMatrix(Kind.LBP, np.hstack(hists).T[:, keep])
