"""Hard-assignment bag-of-words encoding."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codebook import Codebook, nearest_words
from .features import FeatureMatrix, Kind, MULTIPLE_KINDS, NoDescriptorsError

MULTIPLE = "multiple"
CACHE_VERSION = 1


@dataclass(frozen=True)
class BowHistogram:
    values: np.ndarray
    mode: str  # a Kind value, or "multiple"

    @property
    def k(self) -> int:
        n = self.values.size
        return n // len(MULTIPLE_KINDS) if self.mode == MULTIPLE else n

    def segment(self, kind) -> np.ndarray:
        if self.mode != MULTIPLE:
            raise ValueError("only multiple-mode histograms have segments")
        i = MULTIPLE_KINDS.index(Kind(kind))
        return self.values[i * self.k:(i + 1) * self.k]


def assign(features: FeatureMatrix, cb: Codebook) -> np.ndarray:
    """Index of the nearest word for every column; ties to the lowest index."""
    if features.dim != cb.dim:
        raise ValueError(f"feature dim {features.dim} != codebook dim {cb.dim}")
    if features.count == 0:
        raise NoDescriptorsError("cannot encode an empty feature matrix")
    return nearest_words(np.ascontiguousarray(features.data.T), cb.words)


def pool(labels, k: int) -> np.ndarray:
    """Word counts divided by their L2 norm."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise NoDescriptorsError("cannot pool an empty assignment")
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    if counts.size != k:
        raise ValueError("assignment index out of range")
    return counts / np.sqrt(np.sum(counts**2))


def encode_single(features: FeatureMatrix, cb: Codebook) -> BowHistogram:
    if features.kind != cb.kind:
        raise ValueError(f"{features.kind.value} features vs {cb.kind.value} codebook")
    return BowHistogram(pool(assign(features, cb), cb.k), cb.kind.value)


def encode_image(features: dict, codebooks, mode: str) -> BowHistogram:
    """Encode one image's per-kind features.

    ``mode`` is a kind name for a single dictionary (``codebooks`` then holds
    that one codebook) or ``"multiple"``, which concatenates the per-kind
    histograms in DSURF, HOG, LBP order, each segment unit-length on its own.
    """
    books = {cb.kind: cb for cb in codebooks}
    if mode == MULTIPLE:
        parts = []
        for kind in MULTIPLE_KINDS:
            if kind not in features:
                raise KeyError(f"missing {kind.value} features")
            if kind not in books:
                raise KeyError(f"missing {kind.value} codebook")
            parts.append(encode_single(features[kind], books[kind]).values)
        return BowHistogram(np.concatenate(parts), MULTIPLE)
    kind = Kind(mode)
    if kind not in features:
        raise KeyError(f"missing {kind.value} features")
    if kind not in books:
        raise KeyError(f"missing {kind.value} codebook")
    return encode_single(features[kind], books[kind])


def save_histograms(path, records) -> None:
    """Write ``(image_id, BowHistogram)`` pairs as a versioned JSON-lines file."""
    with Path(path).open("w") as fh:
        fh.write(json.dumps({"format": "retina-bow-histograms", "version": CACHE_VERSION}) + "\n")
        for image_id, h in records:
            fh.write(json.dumps({
                "id": image_id,
                "mode": h.mode,
                "K": h.k,
                "values": [float(v) for v in h.values],
            }) + "\n")


def load_histograms(path) -> list:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError("empty histogram cache")
    head = json.loads(lines[0])
    if head.get("format") != "retina-bow-histograms" or head.get("version") != CACHE_VERSION:
        raise ValueError("not a version-1 histogram cache")
    out = []
    for line in lines[1:]:
        rec = json.loads(line)
        out.append((rec["id"], BowHistogram(np.asarray(rec["values"]), rec["mode"])))
    return out
