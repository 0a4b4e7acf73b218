"""Image -> per-kind feature matrices, with an optional on-disk cache."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import hog, lbp, surf
from .features import FeatureMatrix, Kind, NoDescriptorsError
from .imgcore import DEFAULT_HEIGHT, RgbImage, load_image, resize_to_height
from .preprocess import NormalizationParams, prepare_channels

EXTRACTOR_VERSION = "1"
CACHE_ENV = "RETINA_BOW_CACHE"
# an input whose every pixel is below this carries no signal in any channel
BLACK_LEVEL = 1e-6


@dataclass(frozen=True)
class ExtractConfig:
    height: int = DEFAULT_HEIGHT
    hessian: surf.HessianConfig = field(default_factory=surf.HessianConfig)
    normalization: NormalizationParams = field(default_factory=NormalizationParams)

    def key(self) -> dict:
        return {"version": EXTRACTOR_VERSION, **asdict(self)}


def prepare(img: RgbImage, cfg: ExtractConfig = ExtractConfig()) -> RgbImage:
    """Resize and normalize; an all-black input is rejected up front."""
    if max(img.red.max(), img.green.max(), img.blue.max()) < BLACK_LEVEL:
        raise NoDescriptorsError("image is entirely black")
    return prepare_channels(resize_to_height(img, cfg.height), cfg.normalization)


def extract_kind(img: RgbImage, kind: Kind, cfg: ExtractConfig = ExtractConfig()) -> FeatureMatrix:
    """Descriptors of an already prepared image."""
    kind = Kind(kind)
    if kind is Kind.SURF:
        return surf.sparse_surf(img, cfg.hessian)
    if kind is Kind.DSURF:
        return surf.dense_surf(img)
    if kind is Kind.HOG:
        return hog.hog_image(img)
    return lbp.lbp_image(img)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def default_cache_root(fallback=None):
    root = os.environ.get(CACHE_ENV)
    if root:
        return Path(root)
    return Path(fallback) if fallback is not None else None


class FeatureCache:
    """``.npz`` per (image content, extractor parameters, kind)."""

    def __init__(self, root, cfg: ExtractConfig = ExtractConfig()):
        self.root = Path(root)
        self.cfg = cfg
        params = json.dumps(cfg.key(), sort_keys=True, default=str).encode()
        self.params_digest = hashlib.sha256(params).hexdigest()[:16]

    def path(self, digest: str, kind: Kind) -> Path:
        return self.root / self.params_digest / digest[:2] / f"{digest}.{Kind(kind).value}.npz"

    def get(self, digest: str, kind: Kind):
        p = self.path(digest, kind)
        if not p.exists():
            return None
        with np.load(p) as z:
            return FeatureMatrix(Kind(str(z["kind"])), z["data"])

    def put(self, digest: str, fm: FeatureMatrix) -> Path:
        p = self.path(digest, fm.kind)
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_suffix(".tmp.npz")
        np.savez(tmp, kind=fm.kind.value, data=fm.data)
        os.replace(tmp, p)
        return p


def extract_file(path, kinds, cfg: ExtractConfig = ExtractConfig(), cache: FeatureCache | None = None):
    """Features for one image file.

    Returns ``(features, errors, hits)``: kind -> FeatureMatrix for the kinds
    that succeeded, kind -> message for those that failed, and the number of
    kinds served from the cache.
    """
    kinds = [Kind(k) for k in kinds]
    feats, errors = {}, {}
    hits = 0
    try:
        digest = file_digest(path) if cache is not None else None
    except OSError as exc:
        return {}, {k: f"unreadable: {exc}" for k in kinds}, 0
    todo = []
    for k in kinds:
        fm = cache.get(digest, k) if cache is not None else None
        if fm is None:
            todo.append(k)
        else:
            feats[k] = fm
            hits += 1
    if todo:
        try:
            img = prepare(load_image(path), cfg)
        except Exception as exc:  # noqa: BLE001 - any decode failure excludes the image
            for k in todo:
                errors[k] = f"{type(exc).__name__}: {exc}"
            return feats, errors, hits
        for k in todo:
            try:
                fm = extract_kind(img, k, cfg)
            except ValueError as exc:
                errors[k] = f"{type(exc).__name__}: {exc}"
                continue
            feats[k] = fm
            if cache is not None:
                cache.put(digest, fm)
    return feats, errors, hits
