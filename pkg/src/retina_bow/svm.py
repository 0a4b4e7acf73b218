"""Soft-margin linear SVM: binary dual solver, one-vs-one multiclass, CV grid search.

The binary trainer solves the dual

    min_a  1/2 a'Qa - e'a   s.t.  y'a = 0,  0 <= a_i <= C,   Q_ij = y_i y_j x_i.x_j

by two-coordinate descent with second-order working-set selection over a
precomputed Gram matrix; ``w = sum_i a_i y_i x_i`` is recovered at the end.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
from numba import njit

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
TAU = 1e-12
DEFAULT_C_GRID = tuple(2.0**e for e in range(-5, 16, 2))


@dataclass(frozen=True)
class BinarySvm:
    w: np.ndarray
    b: float
    C: float
    alpha: np.ndarray = field(default=None, compare=False, repr=False)
    violation: float = field(default=0.0, compare=False)
    iterations: int = field(default=0, compare=False)

    def decision(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.w.size:
            raise ValueError(f"expected {self.w.size} features, got {X.shape[1]}")
        return X @ self.w + self.b


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError("X must be (n, d) and y must be (n,)")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite training data")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("binary labels must be +1/-1")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise ValueError("both classes must be present")
    return X, y


@njit(cache=True)
def _smo(K, y, C, tol, max_iter):
    n = y.size
    alpha = np.zeros(n)
    grad = -np.ones(n)
    gap = np.inf
    it = 0
    while it < max_iter:
        gmax = -np.inf
        i = -1
        for t in range(n):
            if (y[t] > 0 and alpha[t] < C) or (y[t] < 0 and alpha[t] > 0):
                v = -y[t] * grad[t]
                if v > gmax:
                    gmax = v
                    i = t
        gmin = np.inf
        j = -1
        best = np.inf
        for t in range(n):
            if (y[t] < 0 and alpha[t] < C) or (y[t] > 0 and alpha[t] > 0):
                v = -y[t] * grad[t]
                if v < gmin:
                    gmin = v
                if i >= 0 and v < gmax:
                    diff = gmax - v
                    quad = K[i, i] + K[t, t] - 2.0 * K[i, t]
                    if quad <= 0:
                        quad = TAU
                    gain = -(diff * diff) / quad
                    if gain < best:
                        best = gain
                        j = t
        gap = gmax - gmin
        if i < 0 or j < 0 or gap < tol:
            break
        it += 1

        ai = alpha[i]
        aj = alpha[j]
        q = K[i, i] + K[j, j] - 2.0 * K[i, j]
        if q <= 0:
            q = TAU
        if y[i] != y[j]:
            delta = (-grad[i] - grad[j]) / q
            d = ai - aj
            ai += delta
            aj += delta
            if d > 0:
                if aj < 0:
                    aj = 0.0
                    ai = d
            elif ai < 0:
                ai = 0.0
                aj = -d
            if d > 0:
                if ai > C:
                    ai = C
                    aj = C - d
            elif aj > C:
                aj = C
                ai = C + d
        else:
            delta = (grad[i] - grad[j]) / q
            s = ai + aj
            ai -= delta
            aj += delta
            if s > C:
                if ai > C:
                    ai = C
                    aj = s - C
            elif aj < 0:
                aj = 0.0
                ai = s
            if s > C:
                if aj > C:
                    aj = C
                    ai = s - C
            elif ai < 0:
                ai = 0.0
                aj = s
        di = (ai - alpha[i]) * y[i]
        dj = (aj - alpha[j]) * y[j]
        alpha[i] = ai
        alpha[j] = aj
        for t in range(n):
            grad[t] += y[t] * (K[t, i] * di + K[t, j] * dj)
    return alpha, gap, it


def train_binary(X, y, C: float, tol: float = 1e-3, max_epochs: int = 10_000) -> BinarySvm:
    """Fit ``w, b`` of the soft-margin problem with penalty ``C``.

    Stops once the largest KKT violation (max over the "up" set of -y*grad
    minus min over the "low" set) drops below ``tol``.
    """
    if not C > 0:
        raise ValueError("C must be positive")
    X, y = _check_xy(X, y)
    n = X.shape[0]
    K = X @ X.T
    alpha, gap, it = _smo(K, y, float(C), float(tol), max_epochs * n)
    if gap >= tol:
        log.warning("SVM solver hit the iteration cap (violation %.3g)", gap)
    w = X.T @ (alpha * y)
    grad = y * (X @ w) - 1.0
    b = -_rho(alpha, y, grad, C)
    return BinarySvm(w, float(b), float(C), alpha, float(gap), int(it))


def _rho(alpha, y, grad, C):
    yg = y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        return float(yg[free].mean())
    at_upper = alpha >= C
    ub_set = (at_upper & (y < 0)) | (~at_upper & (y > 0))
    lb_set = ~ub_set
    ub = yg[ub_set].min() if ub_set.any() else np.inf
    lb = yg[lb_set].max() if lb_set.any() else -np.inf
    return float((ub + lb) / 2)


def predict_binary(m: BinarySvm, h) -> float:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != m.w.shape:
        raise ValueError(f"expected {m.w.size} features, got {h.shape}")
    return float(h @ m.w + m.b)


def primal_objective(m: BinarySvm, X, y) -> float:
    margins = y * (np.asarray(X) @ m.w + m.b)
    return 0.5 * float(m.w @ m.w) + m.C * float(np.maximum(0.0, 1.0 - margins).sum())


def dual_objective(m: BinarySvm) -> float:
    return float(m.alpha.sum()) - 0.5 * float(m.w @ m.w)


@dataclass(frozen=True)
class SvmModel:
    classes: tuple  # label values in the fixed class order
    pairs: tuple  # ((a, b), BinarySvm) with class a on the positive side
    dim: int
    bestc: float
    codebooks: tuple = ()  # digests of the codebooks the inputs came from

    def scores(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} features, got {X.shape[1]}")
        return np.stack([m.decision(X) for _, m in self.pairs], axis=1)

    def predict(self, X) -> list:
        s = self.scores(X)
        n_cls = len(self.classes)
        votes = np.zeros((s.shape[0], n_cls))
        margin = np.zeros((s.shape[0], n_cls))
        for p, ((a, b), _) in enumerate(self.pairs):
            pos = s[:, p] > 0
            votes[pos, a] += 1
            votes[~pos, b] += 1
            margin[:, a] += s[:, p]
            margin[:, b] -= s[:, p]
        out = []
        for v, g in zip(votes, margin):
            top = np.flatnonzero(v == v.max())
            if top.size > 1:
                best_margin = g[top].max()
                top = top[g[top] == best_margin]
            out.append(self.classes[int(top[0])])
        return out

    def to_dict(self) -> dict:
        return {
            "format": "retina-bow-svm",
            "version": FORMAT_VERSION,
            "classes": list(self.classes),
            "dim": self.dim,
            "bestc": self.bestc,
            "codebooks": list(self.codebooks),
            "pairs": [
                {"pos": a, "neg": b, "w": [float(v) for v in m.w], "b": m.b, "C": m.C}
                for (a, b), m in self.pairs
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SvmModel":
        if d.get("format") != "retina-bow-svm" or d.get("version") != FORMAT_VERSION:
            raise ValueError("not a version-1 SVM model file")
        pairs = tuple(
            ((p["pos"], p["neg"]), BinarySvm(np.asarray(p["w"], dtype=np.float64), p["b"], p["C"]))
            for p in d["pairs"]
        )
        return cls(tuple(d["classes"]), pairs, d["dim"], d["bestc"], tuple(d["codebooks"]))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "SvmModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def train_multiclass(X, labels, C: float, classes=None, tol: float = 1e-3) -> SvmModel:
    """One binary machine per unordered pair of the classes present in ``labels``."""
    X = np.asarray(X, dtype=np.float64)
    labels = list(labels)
    if classes is None:
        classes = sorted(set(labels))
    present = [c for c in classes if c in set(labels)]
    if len(present) < 2:
        raise ValueError("need at least two classes")
    lab = np.asarray([classes.index(v) for v in labels])
    pairs = []
    for a, b in combinations([classes.index(c) for c in present], 2):
        sel = (lab == a) | (lab == b)
        y = np.where(lab[sel] == a, 1.0, -1.0)
        pairs.append(((a, b), train_binary(X[sel], y, C, tol)))
    return SvmModel(tuple(classes), tuple(pairs), X.shape[1], float(C))


@dataclass(frozen=True)
class CvConfig:
    folds: int = 10
    c_grid: tuple = DEFAULT_C_GRID
    stratified: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("need at least 2 folds")
        if len(self.c_grid) == 0:
            raise ValueError("empty C grid")


def fold_ids(labels, folds: int, seed: int = 0, stratified: bool = True) -> np.ndarray:
    """Fold index per sample; classes are dealt round-robin after a seeded shuffle."""
    if folds < 2:
        raise ValueError("need at least 2 folds")
    labels = list(labels)
    n = len(labels)
    rng = np.random.default_rng(seed)
    out = np.empty(n, dtype=np.int64)
    if not stratified:
        order = rng.permutation(n)
        out[order] = np.arange(n) % folds
        return out
    offset = 0
    for cls in sorted(set(labels), key=labels.index):
        idx = np.flatnonzero([v == cls for v in labels])
        idx = idx[rng.permutation(idx.size)]
        out[idx] = (np.arange(idx.size) + offset) % folds
        offset += idx.size
    return out


def cross_validate(X, labels, folds: int, C: float, seed: int = 0, classes=None,
                   stratified: bool = True) -> float:
    """Mean per-fold accuracy (percent) of one-vs-one models trained on the other folds."""
    X = np.asarray(X, dtype=np.float64)
    labels = list(labels)
    smallest = min(labels.count(c) for c in set(labels))
    if stratified and smallest < folds:
        reduced = max(2, smallest)
        log.warning("smallest class has %d members; using %d folds instead of %d",
                    smallest, reduced, folds)
        folds = reduced
    ids = fold_ids(labels, folds, seed, stratified)
    accs = []
    for f in range(folds):
        test = ids == f
        if not test.any():
            continue
        train_lab = [v for v, t in zip(labels, test) if not t]
        if len(set(train_lab)) < 2:
            continue
        model = train_multiclass(X[~test], train_lab, C, classes)
        pred = model.predict(X[test])
        truth = [v for v, t in zip(labels, test) if t]
        accs.append(100.0 * np.mean([p == t for p, t in zip(pred, truth)]))
    if not accs:
        raise ValueError("no usable cross-validation fold")
    return float(np.mean(accs))


def grid_search_c(X, labels, cfg: CvConfig = CvConfig(), classes=None):
    """``(bestc, {C: cv accuracy})``; ties resolve to the smallest C."""
    scores = {
        float(C): cross_validate(X, labels, cfg.folds, C, cfg.seed, classes, cfg.stratified)
        for C in cfg.c_grid
    }
    top = max(scores.values())
    best = min(c for c, s in scores.items() if s == top)
    return best, scores
