"""31-dim block HOG: 18 directed + 9 undirected orientations + 4 texture energies.

Each 32 x 32 block holds four 16 x 16 cells. A cell is normalized by four
energy sums taken from the 2 x 2 cell groups around it (indices clamped to the
block), clipped at 0.2, and the four normalizations are averaged. The block
feature is the mean of its four cell vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .features import FeatureMatrix, Kind, NoDescriptorsError
from .imgcore import RgbImage

BINS = 9
SIGNED_BINS = 2 * BINS
CELL = 16
BLOCK = 2 * CELL
CLIP = 0.2
NULL_ENERGY = 1e-12
DIM = SIGNED_BINS + BINS + 4


@dataclass(frozen=True)
class GradientField:
    magnitude: np.ndarray
    orientation: np.ndarray  # radians in [0, 2*pi)


def gradient(p: np.ndarray) -> GradientField:
    """Centred [-1, 0, 1]/2 differences inside, one-sided at the borders."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape[0] < 3 or p.shape[1] < 3:
        raise ValueError("gradient needs at least a 3 x 3 plane")
    gy, gx = np.gradient(p)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), 2 * math.pi)
    # mod can return exactly 2*pi for tiny negative angles
    ang[ang >= 2 * math.pi] = 0.0
    return GradientField(mag, ang)


def _bin_votes(g: GradientField):
    """Lower bin, upper bin and their linear-interpolation weights per pixel."""
    pos = g.orientation / (2 * math.pi / SIGNED_BINS)
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(np.int64) % SIGNED_BINS
    hi = (lo + 1) % SIGNED_BINS
    return lo, hi, g.magnitude * (1 - frac), g.magnitude * frac


def cell_histograms(g: GradientField, ncy: int, ncx: int) -> np.ndarray:
    """Signed 18-bin histograms of the top-left ``ncy x ncx`` cell grid."""
    h, w = ncy * CELL, ncx * CELL
    sub = GradientField(g.magnitude[:h, :w], g.orientation[:h, :w])
    lo, hi, wlo, whi = _bin_votes(sub)
    cy = np.arange(h) // CELL
    cx = np.arange(w) // CELL
    cell = (cy[:, None] * ncx + cx[None, :]) * SIGNED_BINS
    n = ncy * ncx * SIGNED_BINS
    hist = np.bincount((cell + lo).ravel(), wlo.ravel(), minlength=n)
    hist += np.bincount((cell + hi).ravel(), whi.ravel(), minlength=n)
    return hist.reshape(ncy, ncx, SIGNED_BINS)


def _clamped_groups():
    # for cell (a, b) the four 2x2 groups at offsets (di, dj) in {-1, 0}^2,
    # with row/col indices clamped into the block
    groups = {}
    for a in (0, 1):
        for b in (0, 1):
            combos = []
            for di in (-1, 0):
                for dj in (-1, 0):
                    rs = [min(max(a + di + t, 0), 1) for t in (0, 1)]
                    cs = [min(max(b + dj + t, 0), 1) for t in (0, 1)]
                    combos.append([(r, c) for r in rs for c in cs])
            groups[a, b] = combos
    return groups


_GROUPS = _clamped_groups()


def block_features(signed: np.ndarray) -> np.ndarray:
    """31-dim features from ``(..., 2, 2, 18)`` cell histograms of blocks."""
    unsigned = signed[..., :BINS] + signed[..., BINS:]
    energy = np.sum(unsigned**2, axis=-1)  # (..., 2, 2)
    out = np.zeros(signed.shape[:-3] + (DIM,))
    for (a, b), combos in _GROUPS.items():
        s = signed[..., a, b, :]
        u = unsigned[..., a, b, :]
        directed = np.zeros(s.shape)
        undirected = np.zeros(u.shape)
        texture = np.zeros(u.shape[:-1] + (4,))
        for n, combo in enumerate(combos):
            total = sum(energy[..., r, c] for r, c in combo)
            factor = np.zeros_like(total)
            np.divide(1.0, np.sqrt(total), out=factor, where=total > 0)
            cs = np.minimum(s * factor[..., None], CLIP)
            cu = np.minimum(u * factor[..., None], CLIP)
            directed += cs
            undirected += cu
            texture[..., n] = cu.sum(axis=-1)
        out += np.concatenate([directed / 4, undirected / 4, texture], axis=-1)
    return out / 4


def hog_block(g: GradientField, y: int, x: int) -> np.ndarray:
    """Feature of the 32 x 32 block with top-left corner (x, y); zeros if null."""
    h, w = g.magnitude.shape
    if y < 0 or x < 0 or y + BLOCK > h or x + BLOCK > w:
        raise ValueError("block must lie inside the plane")
    sub = GradientField(
        g.magnitude[y:y + BLOCK, x:x + BLOCK], g.orientation[y:y + BLOCK, x:x + BLOCK]
    )
    if np.sum(sub.magnitude**2) < NULL_ENERGY:
        return np.zeros(DIM)
    return block_features(cell_histograms(sub, 2, 2))


def hog_plane(p: np.ndarray) -> np.ndarray:
    """``(n_blocks, 31)`` features over the row-major 32 x 32 grid of one plane."""
    g = gradient(p)
    nby, nbx = p.shape[0] // BLOCK, p.shape[1] // BLOCK
    hist = cell_histograms(g, 2 * nby, 2 * nbx)
    blocks = hist.reshape(nby, 2, nbx, 2, SIGNED_BINS).transpose(0, 2, 1, 3, 4)
    feats = block_features(blocks)
    mag2 = g.magnitude[: nby * BLOCK, : nbx * BLOCK] ** 2
    energy = mag2.reshape(nby, BLOCK, nbx, BLOCK).sum(axis=(1, 3))
    feats[energy < NULL_ENERGY] = 0.0
    return feats.reshape(nby * nbx, DIM)


def hog_image(img: RgbImage) -> FeatureMatrix:
    if img.height < BLOCK or img.width < BLOCK:
        raise NoDescriptorsError("image smaller than one HOG block")
    per_channel = [hog_plane(p) for p in img.channels]
    stacked = np.hstack(per_channel).T  # (93, n_blocks), R then G then B
    keep = np.any(stacked != 0, axis=0)
    if not keep.any():
        raise NoDescriptorsError("every HOG block is null")
    return FeatureMatrix(Kind.HOG, stacked[:, keep])
