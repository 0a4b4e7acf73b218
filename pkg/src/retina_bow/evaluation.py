"""Cross-dataset protocol: manifests, metrics, and the K-sweep runner."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codebook import Codebook, KmeansConfig, build_single_dictionary
from .encoder import MULTIPLE, encode_image
from .features import Kind, MULTIPLE_KINDS
from .pipeline import ExtractConfig, FeatureCache, extract_file
from .svm import CvConfig, grid_search_c, train_multiclass

log = logging.getLogger(__name__)

CLASSES = ("normal", "drusen", "exudate")
SPLITS = ("A", "B")
MODES = ("dsurf", "surf", "hog", "lbp", MULTIPLE)
DEFAULT_K_GRID = tuple(range(10, 101, 10))
MANIFEST_FIELDS = ("path", "label", "dataset", "split")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    path: str
    label: str
    dataset: str
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    def counts(self) -> dict:
        """``{split: {label: n}}`` in fixed class order."""
        out = {}
        for s in sorted({r.split for r in self.records}):
            out[s] = {c: sum(r.split == s and r.label == c for r in self.records) for c in CLASSES}
        return out


def _validate(rows, base: Path, strict: bool) -> DatasetManifest:
    records, seen = [], set()
    for n, row in enumerate(rows, start=1):
        missing = [f for f in MANIFEST_FIELDS if not str(row.get(f, "")).strip()]
        if missing:
            raise ManifestError(f"record {n}: missing {', '.join(missing)}")
        label = str(row["label"]).strip()
        if label not in CLASSES:
            raise ManifestError(f"record {n}: unknown label {label!r}")
        split = str(row["split"]).strip()
        if split not in SPLITS:
            raise ManifestError(f"record {n}: unknown split {split!r}")
        path = Path(str(row["path"]).strip())
        if not path.is_absolute():
            path = base / path
        key = os.path.normpath(str(path))
        if key in seen:
            raise ManifestError(f"record {n}: duplicate path {key}")
        seen.add(key)
        if strict and not path.is_file():
            raise ManifestError(f"record {n}: missing file {key}")
        records.append(Record(key, label, str(row["dataset"]).strip(), split))
    if not records:
        raise ManifestError("manifest has no records")
    return DatasetManifest(tuple(records))


def load_manifest(path, strict: bool = False) -> DatasetManifest:
    """Read a CSV (``path,label,dataset,split`` header) or JSON-array manifest.

    Relative image paths are resolved against the manifest's directory.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        raise ManifestError(f"empty manifest: {path}")
    if text.lstrip().startswith("["):
        rows = json.loads(text)
        if not isinstance(rows, list) or not all(isinstance(r, dict) for r in rows):
            raise ManifestError("JSON manifest must be an array of objects")
    else:
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != list(MANIFEST_FIELDS):
            raise ManifestError(f"CSV header must be {','.join(MANIFEST_FIELDS)}")
        rows = list(reader)
    manifest = _validate(rows, path.parent, strict)
    for split, counts in manifest.counts().items():
        log.info("split %s: %s", split, ", ".join(f"{k}={v}" for k, v in counts.items()))
    return manifest


def write_manifest(path, records) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        for r in records:
            w.writerow([r.path, r.label, r.dataset, r.split])


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are actual classes, columns predicted, both in ``CLASSES`` order."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.array(self.counts, dtype=np.int64, copy=True)
        if c.shape != (len(CLASSES), len(CLASSES)) or np.any(c < 0):
            raise ValueError("confusion matrix must be 3 x 3 with non-negative counts")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_list(self) -> list:
        return self.counts.tolist()


def confusion(preds, labels) -> ConfusionMatrix:
    preds, labels = list(preds), list(labels)
    if len(preds) != len(labels):
        raise ValueError("predictions and labels differ in length")
    if not preds:
        raise ValueError("nothing to count")
    m = np.zeros((len(CLASSES), len(CLASSES)), dtype=np.int64)
    for p, t in zip(preds, labels):
        m[CLASSES.index(t), CLASSES.index(p)] += 1
    return ConfusionMatrix(m)


def accuracy(cm) -> float:
    """Correctly classified images as a percentage of all images."""
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    total = counts.sum()
    if total <= 0:
        raise ValueError("empty confusion matrix")
    return 100.0 * float(np.trace(counts)) / float(total)


def false_negative_count(cm) -> int:
    """Abnormal (drusen or exudate) images predicted normal."""
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    n = CLASSES.index("normal")
    return int(counts[CLASSES.index("drusen"), n] + counts[CLASSES.index("exudate"), n])


@dataclass(frozen=True)
class ExperimentConfig:
    modes: tuple = MODES
    k_grid: tuple = DEFAULT_K_GRID
    train_split: str = "B"
    test_split: str = "A"
    kmeans: KmeansConfig = field(default_factory=KmeansConfig)
    cv: CvConfig = field(default_factory=CvConfig)
    extract: ExtractConfig = field(default_factory=ExtractConfig)
    jobs: int = 1

    def __post_init__(self):
        if self.train_split == self.test_split:
            raise ValueError("train and test splits must differ")
        if not self.k_grid or any(int(k) != k or k < 1 for k in self.k_grid):
            raise ValueError("K grid must hold positive integers")
        for m in self.modes:
            if m not in MODES:
                raise ValueError(f"unknown mode {m!r}")


def mode_kinds(mode: str) -> tuple:
    return MULTIPLE_KINDS if mode == MULTIPLE else (Kind(mode),)


@dataclass
class Report:
    train_split: str
    test_split: str
    rows: list = field(default_factory=list)
    excluded: dict = field(default_factory=dict)  # path -> {kind: error}
    timings: dict = field(default_factory=dict)

    def max_rows(self) -> dict:
        out = {}
        for mode in dict.fromkeys(r["mode"] for r in self.rows):
            mine = [r for r in self.rows if r["mode"] == mode]
            best = max(mine, key=lambda r: (r["accuracy"], -r["K"]))
            out[mode] = {"accuracy": best["accuracy"], "K": best["K"]}
        return out

    def to_dict(self) -> dict:
        """Deterministic content; wall-clock timings live in ``timings`` only."""
        return {
            "format": "retina-bow-report",
            "version": 1,
            "train_split": self.train_split,
            "test_split": self.test_split,
            "classes": list(CLASSES),
            "rows": self.rows,
            "max": self.max_rows(),
            "excluded": self.excluded,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def accuracy_table(self) -> str:
        """CSV with one row per K, one column per mode, plus a Max row."""
        modes = list(dict.fromkeys(r["mode"] for r in self.rows))
        ks = sorted({r["K"] for r in self.rows})
        cell = {(r["mode"], r["K"]): r["accuracy"] for r in self.rows}
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["K", *modes])
        for k in ks:
            w.writerow([k, *(_fmt(cell.get((m, k))) for m in modes)])
        best = self.max_rows()
        w.writerow(["Max", *(_fmt(best[m]["accuracy"]) for m in modes)])
        return buf.getvalue()

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        (out / "confusion").mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.dumps())
        (out / "accuracy.csv").write_text(self.accuracy_table())
        (out / "timings.json").write_text(json.dumps(self.timings, indent=2, sort_keys=True))
        for r in self.rows:
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["actual\\predicted", *CLASSES])
            for c, counts in zip(CLASSES, r["confusion"]):
                w.writerow([c, *counts])
            (out / "confusion" / f"{r['mode']}_K{r['K']}.csv").write_text(buf.getvalue())
        (out / "accuracy_vs_k.svg").write_text(accuracy_svg(self))
        return out


def _fmt(v):
    return "" if v is None else f"{v:.4f}"


def _extract_one(args):
    path, kinds, cfg, cache_root = args
    cache = FeatureCache(cache_root, cfg) if cache_root is not None else None
    feats, errors, _ = extract_file(path, kinds, cfg, cache)
    return path, feats, errors


def extract_many(paths, kinds, cfg: ExtractConfig, cache_root=None, jobs: int = 1) -> tuple:
    """``({path: {kind: FeatureMatrix}}, {path: {kind: error}})`` in input order."""
    tasks = [(p, tuple(kinds), cfg, cache_root) for p in paths]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_extract_one, tasks))
    else:
        results = [_extract_one(t) for t in tasks]
    feats, errors = {}, {}
    for path, f, e in results:
        feats[path] = f
        if e:
            errors[path] = {k.value: msg for k, msg in e.items()}
            log.warning("excluding %s for %s", path, ", ".join(errors[path]))
    return feats, errors


def _usable(records, feats, kinds):
    return [r for r in records if all(k in feats[r.path] for k in kinds)]


def run_experiment(cfg: ExperimentConfig, manifest: DatasetManifest, cache_root=None) -> Report:
    """Train on one split, test on the other, for every (mode, K) cell."""
    train = manifest.split(cfg.train_split)
    test = manifest.split(cfg.test_split)
    if not train or not test:
        raise ValueError("both the train and the test split need images")
    overlap = {r.path for r in train} & {r.path for r in test}
    if overlap:
        raise ValueError(f"{len(overlap)} image(s) appear in both splits")

    kinds = tuple(dict.fromkeys(k for m in cfg.modes for k in mode_kinds(m)))
    report = Report(cfg.train_split, cfg.test_split)
    t0 = time.perf_counter()
    feats, errors = extract_many(
        [r.path for r in train + test], kinds, cfg.extract, cache_root, cfg.jobs
    )
    report.excluded = errors
    report.timings["extract"] = time.perf_counter() - t0

    books: dict = {}

    def codebook(kind, k, pool):
        if (kind, k) not in books:
            books[kind, k] = build_single_dictionary(
                [feats[r.path][kind] for r in pool], kind, k, cfg.kmeans
            )
        return books[kind, k]

    for mode in cfg.modes:
        need = mode_kinds(mode)
        tr = _usable(train, feats, need)
        te = _usable(test, feats, need)
        if len({r.label for r in tr}) < 2 or not te:
            log.warning("skipping mode %s: not enough usable images", mode)
            continue
        for k in cfg.k_grid:
            k = int(k)
            timing = {}
            t = time.perf_counter()
            cbs = [codebook(kind, k, tr) for kind in need]
            timing["codebook"] = time.perf_counter() - t
            t = time.perf_counter()
            X_tr = np.stack([encode_image(feats[r.path], cbs, mode).values for r in tr])
            X_te = np.stack([encode_image(feats[r.path], cbs, mode).values for r in te])
            timing["encode"] = time.perf_counter() - t
            t = time.perf_counter()
            y_tr = [r.label for r in tr]
            bestc, cv_scores = grid_search_c(X_tr, y_tr, cfg.cv, list(CLASSES))
            model = train_multiclass(X_tr, y_tr, bestc, list(CLASSES))
            timing["train"] = time.perf_counter() - t
            t = time.perf_counter()
            pred = model.predict(X_te)
            cm = confusion(pred, [r.label for r in te])
            timing["test"] = time.perf_counter() - t
            report.rows.append({
                "mode": mode,
                "K": k,
                "accuracy": accuracy(cm),
                "bestc": bestc,
                "cv_accuracy": cv_scores[bestc],
                "confusion": cm.to_list(),
                "false_negatives": false_negative_count(cm),
                "n_train": len(tr),
                "n_test": len(te),
                "codebooks": [cb.digest() for cb in cbs],
            })
            report.timings[f"{mode}/K{k}"] = timing
            log.info("%s K=%d: %.4f%% (bestc=%g)", mode, k, report.rows[-1]["accuracy"], bestc)
    report.timings["total"] = time.perf_counter() - t0
    return report


_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")


def accuracy_svg(report: Report, width: int = 640, height: int = 400) -> str:
    """Accuracy-vs-K line chart, one polyline per mode, maxima marked."""
    modes = list(dict.fromkeys(r["mode"] for r in report.rows))
    ks = sorted({r["K"] for r in report.rows}) or [0]
    left, right, top, bottom = 60, 130, 30, 50
    pw, ph = width - left - right, height - top - bottom
    accs = [r["accuracy"] for r in report.rows] or [0.0]
    lo = min(50.0, 10 * np.floor(min(accs) / 10))
    kmin, kmax = min(ks), max(ks)

    def px(k):
        return left + (pw * (k - kmin) / (kmax - kmin) if kmax > kmin else pw / 2)

    def py(a):
        return top + ph * (100.0 - a) / (100.0 - lo)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<title>Accuracy vs. visual words K (train {report.train_split}, '
        f'test {report.test_split})</title>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
    ]
    for k in ks:
        out.append(f'<text x="{px(k):.1f}" y="{top + ph + 16}" text-anchor="middle">{k}</text>')
    for a in np.arange(lo, 100.0 + 1e-9, 10.0):
        out.append(f'<text x="{left - 6}" y="{py(a) + 4:.1f}" text-anchor="end">{a:.0f}</text>')
        out.append(f'<line x1="{left}" x2="{left + pw}" y1="{py(a):.1f}" y2="{py(a):.1f}" '
                   f'stroke="#ddd"/>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 10}" text-anchor="middle">K</text>')
    out.append(f'<text x="14" y="{top + ph / 2}" transform="rotate(-90 14 {top + ph / 2})" '
               f'text-anchor="middle">Accuracy (%)</text>')
    best = report.max_rows()
    for i, mode in enumerate(modes):
        colour = _PALETTE[i % len(_PALETTE)]
        pts = sorted((r["K"], r["accuracy"]) for r in report.rows if r["mode"] == mode)
        coords = " ".join(f"{px(k):.1f},{py(a):.1f}" for k, a in pts)
        out.append(f'<polyline class="curve" data-mode="{mode}" points="{coords}" '
                   f'fill="none" stroke="{colour}" stroke-width="2"/>')
        for k, a in pts:
            out.append(f'<circle cx="{px(k):.1f}" cy="{py(a):.1f}" r="2.5" fill="{colour}"/>')
        bk, ba = best[mode]["K"], best[mode]["accuracy"]
        out.append(f'<circle class="max" data-mode="{mode}" data-k="{bk}" data-accuracy="{ba:.4f}" '
                   f'cx="{px(bk):.1f}" cy="{py(ba):.1f}" r="5" fill="none" stroke="{colour}"/>')
        ly = top + 14 + 16 * i
        out.append(f'<line x1="{left + pw + 10}" x2="{left + pw + 30}" y1="{ly - 4}" y2="{ly - 4}" '
                   f'stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 34}" y="{ly}">{mode} (max {ba:.2f})</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
