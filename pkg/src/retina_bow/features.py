"""Descriptor pools shared by every extractor."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class Kind(str, Enum):
    SURF = "surf"
    DSURF = "dsurf"
    HOG = "hog"
    LBP = "lbp"

    @property
    def dim(self) -> int:
        return DIMS[self]


DIMS = {Kind.SURF: 64, Kind.DSURF: 192, Kind.HOG: 93, Kind.LBP: 174}

# order of the concatenated multiple-dictionary histogram
MULTIPLE_KINDS = (Kind.DSURF, Kind.HOG, Kind.LBP)


class NoDescriptorsError(ValueError):
    """An image produced no usable descriptor for some kind."""


@dataclass(frozen=True)
class FeatureMatrix:
    """``D x N`` pool of column descriptors of a single kind."""

    kind: Kind
    data: np.ndarray

    def __post_init__(self):
        kind = Kind(self.kind)
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 2 or data.shape[0] != kind.dim:
            raise ValueError(f"{kind.value} features need {kind.dim} rows, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("non-finite descriptor values")
        data.setflags(write=False)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "data", data)

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def count(self) -> int:
        return self.data.shape[1]

    @classmethod
    def empty(cls, kind: Kind) -> "FeatureMatrix":
        return cls(kind, np.zeros((Kind(kind).dim, 0)))

    @classmethod
    def concat(cls, mats) -> "FeatureMatrix":
        mats = list(mats)
        if not mats:
            raise ValueError("nothing to concatenate")
        kinds = {m.kind for m in mats}
        if len(kinds) != 1:
            raise ValueError(f"mixed descriptor kinds: {sorted(k.value for k in kinds)}")
        return cls(mats[0].kind, np.concatenate([m.data for m in mats], axis=1))
