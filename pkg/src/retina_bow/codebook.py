"""K-means visual dictionaries.

Lloyd iterations with k-means++ seeding and best-of-restarts selection. The
assignment step only moves a point when its new word is strictly closer in
exact squared distance, which keeps the objective non-increasing even though
candidates are screened with a faster single-precision expanded-norm form.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .features import FeatureMatrix, Kind, MULTIPLE_KINDS

FORMAT_VERSION = 1


@dataclass(frozen=True)
class KmeansConfig:
    max_iter: int = 300
    tol: float = 1e-6
    restarts: int = 3
    seed: int = 0
    # optional cap on columns drawn from each training image (None = all)
    per_image_cap: int | None = None

    def __post_init__(self):
        if self.max_iter < 1 or self.tol < 0 or self.restarts < 1:
            raise ValueError("invalid k-means configuration")


@dataclass(frozen=True)
class Codebook:
    kind: Kind
    words: np.ndarray  # (K, D)
    objective: float
    seed: int = 0
    history: tuple = field(default=(), compare=False)

    def __post_init__(self):
        words = np.array(self.words, dtype=np.float64, copy=True)
        kind = Kind(self.kind)
        if words.ndim != 2 or words.shape[0] < 1 or words.shape[1] != kind.dim:
            raise ValueError(f"{kind.value} codebook needs (K, {kind.dim}) words, got {words.shape}")
        if not np.all(np.isfinite(words)):
            raise ValueError("non-finite codebook words")
        words.setflags(write=False)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "words", words)

    @property
    def k(self) -> int:
        return self.words.shape[0]

    @property
    def dim(self) -> int:
        return self.words.shape[1]

    def to_dict(self) -> dict:
        return {
            "format": "retina-bow-codebook",
            "version": FORMAT_VERSION,
            "kind": self.kind.value,
            "K": self.k,
            "D": self.dim,
            "seed": self.seed,
            "objective": self.objective,
            # repr round-trips float64 exactly
            "words": [float(v) for v in self.words.ravel()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Codebook":
        if d.get("format") != "retina-bow-codebook" or d.get("version") != FORMAT_VERSION:
            raise ValueError("not a version-1 codebook file")
        words = np.asarray(d["words"], dtype=np.float64).reshape(d["K"], d["D"])
        return cls(Kind(d["kind"]), words, float(d["objective"]), int(d["seed"]))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def save(self, path) -> str:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))
        return self.digest()

    @classmethod
    def load(cls, path) -> "Codebook":
        return cls.from_dict(json.loads(Path(path).read_text()))


def squared_distances(x: np.ndarray, words: np.ndarray) -> np.ndarray:
    """Exact ``(N, K)`` squared Euclidean distances, summed per difference."""
    out = np.empty((x.shape[0], words.shape[0]))
    chunk = max(1, (1 << 21) // max(1, words.size))
    for s in range(0, x.shape[0], chunk):
        diff = x[s:s + chunk, None, :] - words[None, :, :]
        out[s:s + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def nearest_words(x: np.ndarray, words: np.ndarray) -> np.ndarray:
    """Exact nearest word per row; ties go to the lowest index."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    words = np.asarray(words, dtype=np.float64)
    if words.shape[0] == 1:
        return np.zeros(x.shape[0], dtype=np.int64)
    x_sq = _row_sq(x)
    cand, unsure = _screen(x.astype(np.float32), x_sq, words)
    idx = np.nonzero(unsure)[0]
    if idx.size:
        cand[idx] = np.argmin(squared_distances(x[idx], words), axis=1)
    return cand


def _row_sq(x):
    return np.einsum("nd,nd->n", x, x)


def _plusplus(x, k, rng):
    n = x.shape[0]
    centres = np.empty((k, x.shape[1]))
    centres[0] = x[rng.integers(n)]
    closest = _row_sq(x - centres[0])
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centres[j] = x[idx]
        closest = np.minimum(closest, _row_sq(x - centres[j]))
    return centres


@njit(cache=True)
def _point_costs(x, words, labels):
    """Exact squared distance of every row to its assigned word."""
    n, d = x.shape
    out = np.empty(n)
    for i in range(n):
        w = words[labels[i]]
        acc = 0.0
        for j in range(d):
            t = x[i, j] - w[j]
            acc += t * t
        out[i] = acc
    return out


@njit(cache=True)
def _cluster_sums(x, labels, k):
    """Per-cluster column sums, accumulated in row order."""
    out = np.zeros((k, x.shape[1]))
    for i in range(x.shape[0]):
        out[labels[i]] += x[i]
    return out


def _screen(x32, x_sq, words):
    """Single-precision nearest-word candidates and a mask of rows whose
    best/second-best gap lies inside the rounding bound of the expanded form."""
    w_sq = _row_sq(words)
    approx = x_sq[:, None] - 2.0 * (x32 @ words.astype(np.float32).T) + w_sq[None, :]
    cand = np.argmin(approx, axis=1)
    two = np.partition(approx, 1, axis=1)
    eps = np.finfo(np.float32).eps
    slack = 4.0 * (x32.shape[1] + 2) * eps * (x_sq + w_sq.max()) + 1e-300
    return cand, (two[:, 1] - two[:, 0]) <= slack


def _assign(x, x32, words, labels, x_sq, cur_d=None):
    """Nearest-word step; returns (labels, distances, changed).

    Candidates come from the expanded form |x|^2 - 2 x.w + |w|^2 evaluated in
    single precision. Points whose candidate differs from their label, or whose
    best/second-best gap is inside the rounding bound of that form, are
    re-checked with exact distances. A point only moves to a strictly closer
    word (or an equally close lower-indexed one). ``cur_d`` may carry the exact
    distances of the points to their current words.
    """
    k = words.shape[0]
    if k == 1:
        lbl = np.zeros(x.shape[0], dtype=np.int64)
        return lbl, _point_costs(x, words, lbl), labels is None or bool(np.any(labels != 0))
    cand, unsure = _screen(x32, x_sq, words)
    if labels is None:
        labels = cand
        movers = np.nonzero(unsure)[0]
        changed = True
    else:
        movers = np.nonzero((cand != labels) | unsure)[0]
        changed = False
    labels = labels.copy()
    cur_d = _point_costs(x, words, labels) if cur_d is None else cur_d.copy()
    if movers.size:
        exact = squared_distances(x[movers], words)
        best = np.argmin(exact, axis=1)
        best_d = exact[np.arange(movers.size), best]
        old_d = cur_d[movers]
        switch = (best_d < old_d) | ((best_d == old_d) & (best < labels[movers]))
        labels[movers[switch]] = best[switch]
        cur_d[movers[switch]] = best_d[switch]
        changed = changed or bool(switch.any())
    return labels, cur_d, changed


def _update(x, labels, k, dist):
    """Means of each cluster; empty clusters take the worst-quantized point."""
    counts = np.bincount(labels, minlength=k)
    labels = labels.copy()
    dist = dist.copy()
    for j in np.nonzero(counts == 0)[0]:
        far = int(np.argmax(dist))
        counts[labels[far]] -= 1
        labels[far] = j
        counts[j] = 1
        dist[far] = 0.0
    return _cluster_sums(x, labels, k) / counts[:, None], labels


def _lloyd(x, k, cfg, rng):
    x_sq = _row_sq(x)
    x32 = x.astype(np.float32)
    words = _plusplus(x, k, rng)
    labels, dist, _ = _assign(x, x32, words, None, x_sq)
    words, labels = _update(x, labels, k, dist)
    dist = _point_costs(x, words, labels)
    history = [float(dist.sum())]
    for _ in range(cfg.max_iter - 1):
        labels, dist, changed = _assign(x, x32, words, labels, x_sq, dist)
        if not changed:
            break
        words, labels = _update(x, labels, k, dist)
        dist = _point_costs(x, words, labels)
        h = float(dist.sum())
        prev = history[-1]
        history.append(h)
        if prev > 0 and (prev - h) / prev < cfg.tol:
            break
    return words, labels, history


@dataclass
class KmeansResult:
    words: np.ndarray  # (K, D)
    labels: np.ndarray  # (M,)
    history: list  # objective after every Lloyd iteration

    @property
    def objective(self) -> float:
        return self.history[-1]


def lloyd_kmeans(x: np.ndarray, k: int, cfg: KmeansConfig = KmeansConfig()) -> KmeansResult:
    """Best-of-restarts Lloyd clustering of the rows of ``x``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    m = x.shape[0]
    if k < 1 or m < k:
        raise ValueError(f"need at least K={k} features, got {m}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite feature values")
    rng = np.random.default_rng(cfg.seed)
    best = None
    for _ in range(cfg.restarts):
        res = KmeansResult(*_lloyd(x, k, cfg, rng))
        if best is None or res.objective < best.objective:
            best = res
    return best


def kmeans(features: FeatureMatrix, k: int, cfg: KmeansConfig = KmeansConfig()):
    """Cluster the columns of a feature pool; returns ``(Codebook, labels)``."""
    res = lloyd_kmeans(features.data.T, k, cfg)
    cb = Codebook(features.kind, res.words, res.objective, cfg.seed, tuple(res.history))
    return cb, res.labels


def pool_features(train, kind: Kind, cap: int | None = None, seed: int = 0) -> FeatureMatrix:
    """Concatenate training matrices in the given order, optionally capped per image."""
    mats = list(train)
    if not mats:
        raise ValueError("no training features")
    kind = Kind(kind)
    for m in mats:
        if m.kind != kind:
            raise ValueError(f"expected {kind.value} features, got {m.kind.value}")
    if cap is not None:
        rng = np.random.default_rng(seed)
        capped = []
        for m in mats:
            if m.count > cap:
                cols = np.sort(rng.choice(m.count, size=cap, replace=False))
                m = FeatureMatrix(kind, m.data[:, cols])
            capped.append(m)
        mats = capped
    return FeatureMatrix.concat(mats)


def build_single_dictionary(train, kind: Kind, k: int, cfg: KmeansConfig = KmeansConfig()) -> Codebook:
    pooled = pool_features(train, kind, cfg.per_image_cap, cfg.seed)
    return kmeans(pooled, k, cfg)[0]


def build_multiple_dictionaries(
    train: dict, k: int, cfg: KmeansConfig = KmeansConfig(), kinds=MULTIPLE_KINDS
) -> list[Codebook]:
    """One independent codebook per kind; ``train`` maps kind -> list of matrices."""
    return [build_single_dictionary(train[Kind(kd)], kd, k, cfg) for kd in kinds]
