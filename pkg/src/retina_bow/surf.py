"""SURF detection and description on integral images.

Sparse mode detects Hessian-determinant blobs per channel and describes them
with oriented 64-dim descriptors. Dense mode places one upright descriptor on
the centre of every 16 x 16 cell and stacks the three channels into 192 rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .features import FeatureMatrix, Kind, NoDescriptorsError
from .imgcore import RgbImage, box_sum, integral_image

NULL_NORM = 1e-12
DENSE_CELL = 16
DENSE_SIGMA = 1.6


@dataclass(frozen=True)
class HessianConfig:
    octaves: int = 4
    intervals: int = 4
    initial_filter: int = 9
    threshold: float = 1e-4
    initial_step: int = 2
    refine: bool = True

    def __post_init__(self):
        if self.initial_filter != 9:
            raise ValueError("the box-filter schedule starts at size 9")
        if self.intervals < 3 or self.octaves < 1:
            raise ValueError("need >= 1 octave of >= 3 intervals")
        if self.threshold < 0:
            raise ValueError("threshold must be >= 0")

    def filter_sizes(self, octave: int) -> list[int]:
        return [3 * ((2 ** (octave + 1)) * (i + 1) + 1) for i in range(self.intervals)]

    def step(self, octave: int) -> int:
        return self.initial_step * 2**octave


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    scale: float
    orientation: float = 0.0
    response: float = 0.0
    # discrete scale-space location the point was found at
    octave: int = -1
    layer: int = -1
    row: int = -1
    col: int = -1


def centred_integral(plane: np.ndarray) -> np.ndarray:
    """Integral image of ``plane - min(plane)``.

    Every SURF filter has zero total weight, so the shift changes no response
    but keeps the cumulative sums small and makes flat planes exactly zero.
    """
    plane = np.asarray(plane, dtype=np.float64)
    return integral_image(plane - plane.min())


def rounding_floor(ii: np.ndarray) -> float:
    """Magnitude below which a box-sum difference is indistinguishable from 0."""
    return float((ii.shape[0] + ii.shape[1]) * np.finfo(np.float64).eps * np.abs(ii).max())


def filter_scale(size: float) -> float:
    return 1.2 * size / 9.0


def hessian_determinant(dxx, dyy, dxy):
    return dxx * dyy - (0.9 * dxy) ** 2


def box_filter_responses(ii: np.ndarray, size: int, rows, cols):
    """Area-normalized ``(Dxx, Dyy, Dxy)`` at the given pixel centres."""
    if size < 9 or size % 6 != 3:
        raise ValueError(f"filter size must be >= 9 and == 3 mod 6, got {size}")
    r = np.asarray(rows)[:, None]
    c = np.asarray(cols)[None, :]
    lobe = size // 3
    border = (size - 1) // 2
    half = lobe // 2
    band = 2 * lobe - 1
    dxx = box_sum(ii, c - border, r - lobe + 1, size, band) - 3 * box_sum(
        ii, c - half, r - lobe + 1, lobe, band
    )
    dyy = box_sum(ii, c - lobe + 1, r - border, band, size) - 3 * box_sum(
        ii, c - lobe + 1, r - half, band, lobe
    )
    dxy = (
        box_sum(ii, c + 1, r - lobe, lobe, lobe)
        + box_sum(ii, c - lobe, r + 1, lobe, lobe)
        - box_sum(ii, c - lobe, r - lobe, lobe, lobe)
        - box_sum(ii, c + 1, r + 1, lobe, lobe)
    )
    norm = 1.0 / (size * size)
    return dxx * norm, dyy * norm, dxy * norm


def _support_mask(shape, size, rows, cols):
    border = (size - 1) // 2
    h, w = shape
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    ok_r = (rows - border >= 0) & (rows + border <= h - 1)
    ok_c = (cols - border >= 0) & (cols + border <= w - 1)
    return ok_r[:, None] & ok_c[None, :]


def hessian_response(ii: np.ndarray, size: int, step: int = 1) -> np.ndarray:
    """Approximate Hessian determinant sampled every ``step`` pixels.

    Positions where the filter would leave the image respond with 0.
    """
    shape = (ii.shape[0] - 1, ii.shape[1] - 1)
    rows = np.arange(0, shape[0], step)
    cols = np.arange(0, shape[1], step)
    det = hessian_determinant(*box_filter_responses(ii, size, rows, cols))
    det[~_support_mask(shape, size, rows, cols)] = 0.0
    return det


def response_stack(ii: np.ndarray, cfg: HessianConfig, octave: int) -> np.ndarray:
    step = cfg.step(octave)
    return np.stack([hessian_response(ii, s, step) for s in cfg.filter_sizes(octave)])


_NEIGHBOURS = np.ones((3, 3, 3), dtype=bool)
_NEIGHBOURS[1, 1, 1] = False


def _refine(stack, layer, i, j):
    """Quadratic fit offset (dx, dy, ds) around a discrete maximum, or None."""
    v = stack
    c = v[layer, i, j]
    dx = (v[layer, i, j + 1] - v[layer, i, j - 1]) / 2
    dy = (v[layer, i + 1, j] - v[layer, i - 1, j]) / 2
    ds = (v[layer + 1, i, j] - v[layer - 1, i, j]) / 2
    dxx = v[layer, i, j + 1] + v[layer, i, j - 1] - 2 * c
    dyy = v[layer, i + 1, j] + v[layer, i - 1, j] - 2 * c
    dss = v[layer + 1, i, j] + v[layer - 1, i, j] - 2 * c
    dxy = (v[layer, i + 1, j + 1] - v[layer, i + 1, j - 1]
           - v[layer, i - 1, j + 1] + v[layer, i - 1, j - 1]) / 4
    dxs = (v[layer + 1, i, j + 1] - v[layer + 1, i, j - 1]
           - v[layer - 1, i, j + 1] + v[layer - 1, i, j - 1]) / 4
    dys = (v[layer + 1, i + 1, j] - v[layer + 1, i - 1, j]
           - v[layer - 1, i + 1, j] + v[layer - 1, i - 1, j]) / 4
    hess = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
    try:
        off = -np.linalg.solve(hess, np.array([dx, dy, ds]))
    except np.linalg.LinAlgError:
        return None
    if np.any(np.abs(off) >= 0.5):
        return None
    return off


def detect_keypoints(plane: np.ndarray, cfg: HessianConfig = HessianConfig(), ii=None):
    """Scale-space maxima of the Hessian response above ``cfg.threshold``."""
    plane = np.asarray(plane, dtype=np.float64)
    if ii is None:
        ii = centred_integral(plane)
    shape = plane.shape
    found = []
    for octave in range(cfg.octaves):
        sizes = cfg.filter_sizes(octave)
        step = cfg.step(octave)
        rows = np.arange(0, shape[0], step)
        cols = np.arange(0, shape[1], step)
        # the largest filter must fit around every neighbour of a candidate
        usable = ndimage.binary_erosion(
            _support_mask(shape, sizes[-1], rows, cols), np.ones((3, 3), bool), border_value=0
        )
        if not usable.any():
            break
        stack = response_stack(ii, cfg, octave)
        neigh_max = ndimage.maximum_filter(
            stack, footprint=_NEIGHBOURS, mode="constant", cval=-np.inf
        )
        peaks = (stack > neigh_max) & (stack > cfg.threshold) & (stack > 0)
        peaks[0] = False
        peaks[-1] = False
        peaks &= usable[None]
        filter_gap = sizes[1] - sizes[0]
        for layer, i, j in zip(*np.nonzero(peaks)):
            if cfg.refine:
                off = _refine(stack, layer, i, j)
                if off is None:
                    continue
            else:
                off = np.zeros(3)
            size = sizes[layer] + off[2] * filter_gap
            found.append(
                Keypoint(
                    x=float((cols[j] + off[0] * step)),
                    y=float((rows[i] + off[1] * step)),
                    scale=filter_scale(size),
                    response=float(stack[layer, i, j]),
                    octave=octave,
                    layer=int(layer),
                    row=int(i),
                    col=int(j),
                )
            )
    return found


def _round(a):
    return np.floor(np.asarray(a, dtype=np.float64) + 0.5).astype(np.int64)


def haar_x(ii, row, col, size):
    """Right half minus left half of a ``size`` x ``size`` box at (row, col)."""
    h = size // 2
    return box_sum(ii, col, row - h, h, size) - box_sum(ii, col - h, row - h, h, size)


def haar_y(ii, row, col, size):
    h = size // 2
    return box_sum(ii, col - h, row, size, h) - box_sum(ii, col - h, row - h, size, h)


# orientation sample grid: radius 6 in units of the (rounded) scale
_OI, _OJ = np.meshgrid(np.arange(-6, 7), np.arange(-6, 7), indexing="ij")
_OMASK = _OI**2 + _OJ**2 < 36
_ORI_I = _OI[_OMASK]
_ORI_J = _OJ[_OMASK]
_ORI_W = np.exp(-(_ORI_I**2 + _ORI_J**2) / (2 * 2.5**2))
_WINDOW = math.pi / 3


def assign_orientations(ii: np.ndarray, xs, ys, scales, batch: int = 256) -> np.ndarray:
    """Dominant direction of Gaussian-weighted Haar responses in a 6-sigma disc.

    A pi/3 window is anchored at every response angle; the window with the
    longest summed response vector gives the orientation. Points without full
    support, or whose responses are all at rounding level, get 0 (upright).
    """
    rows, cols = ii.shape[0] - 1, ii.shape[1] - 1
    floor = rounding_floor(ii)
    s = np.maximum(1, _round(scales))
    r0 = _round(ys)
    c0 = _round(xs)
    reach = 8 * s
    ok = (r0 - reach >= 0) & (c0 - reach >= 0) & (r0 + reach <= rows) & (c0 + reach <= cols)
    out = np.zeros(s.shape, dtype=np.float64)
    idx = np.nonzero(ok)[0]
    for start in range(0, idx.size, batch):
        sel = idx[start:start + batch]
        ss = s[sel, None]
        rr = r0[sel, None] + _ORI_J[None, :] * ss
        cc = c0[sel, None] + _ORI_I[None, :] * ss
        dx = _ORI_W * haar_x(ii, rr, cc, 4 * ss)
        dy = _ORI_W * haar_y(ii, rr, cc, 4 * ss)
        ang = np.mod(np.arctan2(dy, dx), 2 * math.pi)
        rel = np.mod(ang[:, None, :] - ang[:, :, None], 2 * math.pi)
        inside = rel < _WINDOW
        sx = np.einsum("nkm,nm->nk", inside, dx)
        sy = np.einsum("nkm,nm->nk", inside, dy)
        best = np.argmax(sx * sx + sy * sy, axis=1)
        pick = np.arange(sel.size)
        theta = np.mod(np.arctan2(sy[pick, best], sx[pick, best]), 2 * math.pi)
        flat = np.maximum(np.abs(dx).max(axis=1), np.abs(dy).max(axis=1)) <= floor
        theta[flat] = 0.0
        out[sel] = theta
    return out


def assign_orientation(ii: np.ndarray, kp: Keypoint) -> float:
    return float(assign_orientations(ii, [kp.x], [kp.y], [kp.scale])[0])


# descriptor sample offsets in units of sigma: 20 per axis, 5 per subregion
_T = np.arange(20) - 9.5
_DU, _DV = np.meshgrid(_T, _T, indexing="xy")  # _DU varies along x
_DU = _DU.ravel()
_DV = _DV.ravel()
_SUBREGION = ((np.arange(20) // 5)[None, :] + 4 * (np.arange(20) // 5)[:, None]).ravel()
_DESC_W = np.exp(-(_DU**2 + _DV**2) / (2 * 3.3**2))


def describe_many(ii, xs, ys, scales, orientations):
    """Raw (unnormalized) 64-dim descriptors, one row per keypoint."""
    xs = np.asarray(xs, dtype=np.float64)[:, None]
    ys = np.asarray(ys, dtype=np.float64)[:, None]
    sig = np.asarray(scales, dtype=np.float64)[:, None]
    theta = np.asarray(orientations, dtype=np.float64)[:, None]
    co, si = np.cos(theta), np.sin(theta)
    u = _DU[None, :] * sig
    v = _DV[None, :] * sig
    px = _round(xs + u * co - v * si)
    py = _round(ys + u * si + v * co)
    hs = 2 * np.maximum(1, _round(sig))
    dx = haar_x(ii, py, px, hs)
    dy = haar_y(ii, py, px, hs)
    rx = (dx * co + dy * si) * _DESC_W
    ry = (-dx * si + dy * co) * _DESC_W
    n = xs.shape[0]
    out = np.zeros((n, 16, 4))
    for k in range(16):
        sel = _SUBREGION == k
        out[:, k, 0] = rx[:, sel].sum(axis=1)
        out[:, k, 1] = ry[:, sel].sum(axis=1)
        out[:, k, 2] = np.abs(rx[:, sel]).sum(axis=1)
        out[:, k, 3] = np.abs(ry[:, sel]).sum(axis=1)
    return out.reshape(n, 64)


def _unit_rows(raw, floor=0.0):
    norms = np.linalg.norm(raw, axis=1)
    # 400 weighted samples feed each descriptor
    ok = norms >= max(NULL_NORM, 400.0 * floor)
    out = np.zeros_like(raw)
    out[ok] = raw[ok] / norms[ok, None]
    return out, ok


def describe(ii: np.ndarray, kp: Keypoint, upright: bool = False):
    """Unit-length 64-dim descriptor, or None when the window has no gradient."""
    theta = 0.0 if upright else kp.orientation
    raw = describe_many(ii, [kp.x], [kp.y], [kp.scale], [theta])
    out, ok = _unit_rows(raw, rounding_floor(ii))
    return out[0] if ok[0] else None


def surf_plane(plane: np.ndarray, cfg: HessianConfig = HessianConfig()) -> np.ndarray:
    """Oriented descriptors of one channel as a ``64 x n`` array (nulls removed)."""
    ii = centred_integral(plane)
    kps = detect_keypoints(plane, cfg, ii)
    if not kps:
        return np.zeros((64, 0))
    xs = np.array([k.x for k in kps])
    ys = np.array([k.y for k in kps])
    scales = np.array([k.scale for k in kps])
    raw = describe_many(ii, xs, ys, scales, assign_orientations(ii, xs, ys, scales))
    desc, ok = _unit_rows(raw, rounding_floor(ii))
    return desc[ok].T


def sparse_surf(img: RgbImage, cfg: HessianConfig = HessianConfig()) -> FeatureMatrix:
    cols = [surf_plane(p, cfg) for p in img.channels]
    data = np.concatenate(cols, axis=1)
    if data.shape[1] == 0:
        raise NoDescriptorsError("no SURF keypoints in any channel")
    return FeatureMatrix(Kind.SURF, data)


def dense_centres(height: int, width: int, cell: int = DENSE_CELL, sigma: float = DENSE_SIGMA):
    """Grid-cell centres whose whole descriptor support lies inside the image."""
    off = _round(_T * sigma)
    half = int(max(1, _round(sigma)))
    lo = -int(off.min()) + half
    hi = int(off.max()) + half

    def axis(n):
        c = np.arange(cell // 2, n, cell)
        return c[(c - lo >= 0) & (c + hi <= n)]

    ys, xs = np.meshgrid(axis(height), axis(width), indexing="ij")
    return ys.ravel(), xs.ravel()


def dense_surf(img: RgbImage) -> FeatureMatrix:
    ys, xs = dense_centres(img.height, img.width)
    if ys.size == 0:
        raise NoDescriptorsError("image too small for any dense SURF cell")
    sig = np.full(ys.shape, DENSE_SIGMA)
    zero = np.zeros(ys.shape)
    blocks = []
    keep = np.ones(ys.shape, dtype=bool)
    for plane in img.channels:
        ii = centred_integral(plane)
        desc, ok = _unit_rows(describe_many(ii, xs, ys, sig, zero), rounding_floor(ii))
        blocks.append(desc.T)
        keep &= ok
    if not keep.any():
        raise NoDescriptorsError("every dense SURF patch is null")
    return FeatureMatrix(Kind.DSURF, np.vstack(blocks)[:, keep])
