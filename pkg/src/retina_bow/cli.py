"""Command-line front end: ``retina-bow {extract,train,eval,predict,sweep}``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .codebook import Codebook, KmeansConfig, build_single_dictionary
from .encoder import MULTIPLE, encode_image, save_histograms
from .features import Kind, NoDescriptorsError
from .pipeline import CACHE_ENV, ExtractConfig, FeatureCache, extract_file
from .surf import HessianConfig
from .svm import DEFAULT_C_GRID, CvConfig, SvmModel, grid_search_c, train_multiclass

log = logging.getLogger("retina_bow")

BUNDLE_FORMAT = "retina-bow-bundle"
DIRECTIONS = (("B", "A"), ("A", "B"))


class CliError(Exception):
    pass


def _int_list(text: str) -> tuple:
    try:
        vals = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated integer list: {text}") from exc
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("K values must be positive integers")
    return vals


def _float_list(text: str) -> tuple:
    """Comma-separated floats; ``2^e`` terms are accepted."""
    out = []
    for tok in (t.strip() for t in text.split(",")):
        if not tok:
            continue
        try:
            if tok.startswith("2^"):
                out.append(2.0 ** float(tok[2:]))
            else:
                out.append(float(tok))
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"bad C value {tok!r}") from exc
    if not out or any(c <= 0 for c in out):
        raise argparse.ArgumentTypeError("C values must be positive")
    return tuple(out)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--strict-paper", action="store_true",
                        help="disable sub-pixel keypoint refinement")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                        help="extraction worker processes (default: logical cores)")
    common.add_argument("--cache", type=Path, default=None,
                        help=f"feature cache root (default: ${CACHE_ENV} or OUT/cache)")
    common.add_argument("--no-cache", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--manifest", type=Path, required=True)
    data.add_argument("--strict-manifest", action="store_true",
                      help="fail when a manifest path does not exist")

    learn = argparse.ArgumentParser(add_help=False)
    learn.add_argument("--c-grid", type=_float_list, default=DEFAULT_C_GRID)
    learn.add_argument("--folds", type=int, default=10)
    learn.add_argument("--restarts", type=int, default=3, help="k-means restarts")
    learn.add_argument("--per-image-cap", type=int, default=None,
                       help="max descriptors drawn per training image for k-means")

    p = argparse.ArgumentParser(prog="retina-bow", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("extract", parents=[common, data], help="fill the descriptor cache")
    s.add_argument("--mode", action="append", choices=ev.MODES,
                   help="restrict to the kinds of these modes (default: all kinds)")

    s = sub.add_parser("train", parents=[common, data, learn], help="codebooks and one model")
    s.add_argument("--mode", choices=ev.MODES, default=MULTIPLE)
    s.add_argument("--k", type=int, default=100)
    s.add_argument("--train-split", choices=ev.SPLITS, default="B")

    for name, text in (("eval", "one cross-dataset direction"), ("sweep", "both directions")):
        s = sub.add_parser(name, parents=[common, data, learn], help=text)
        s.add_argument("--mode", action="append", choices=ev.MODES,
                       help="repeatable (default: all five modes)")
        s.add_argument("--k-grid", type=_int_list, default=ev.DEFAULT_K_GRID)
        if name == "eval":
            s.add_argument("--train-split", choices=ev.SPLITS, default="B")
            s.add_argument("--model", type=Path, default=None,
                           help="evaluate a trained bundle on the test split instead of sweeping")

    s = sub.add_parser("predict", parents=[common], help="classify one image")
    s.add_argument("--model", type=Path, required=True)
    s.add_argument("--image", type=Path, required=True)
    s.add_argument("--dump-histogram", action="store_true", help="print the BoW histogram")
    return p


def _extract_config(args) -> ExtractConfig:
    return ExtractConfig(hessian=HessianConfig(refine=not args.strict_paper))


def _cache_root(args):
    if args.no_cache:
        return None
    if args.cache is not None:
        return args.cache
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else args.out / "cache"


def _kmeans_config(args) -> KmeansConfig:
    return KmeansConfig(restarts=args.restarts, seed=args.seed, per_image_cap=args.per_image_cap)


def _cv_config(args) -> CvConfig:
    return CvConfig(folds=args.folds, c_grid=tuple(args.c_grid), seed=args.seed)


def _write_json(path: Path, obj) -> str:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    path.write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def _warn_excluded(log_entries: dict, excluded: dict):
    for path, kinds in excluded.items():
        for kind, msg in kinds.items():
            log_entries["warnings"].append({"path": path, "kind": kind, "message": msg})


def cmd_extract(args, entries) -> None:
    manifest = ev.load_manifest(args.manifest, args.strict_manifest)
    kinds = tuple(dict.fromkeys(k for m in (args.mode or ev.MODES) for k in ev.mode_kinds(m)))
    root = _cache_root(args)
    if root is None:
        raise CliError("extract needs a cache (drop --no-cache)")
    cfg = _extract_config(args)
    cache = FeatureCache(root, cfg)
    written = hits = 0
    for r in manifest.records:
        feats, errors, h = extract_file(r.path, kinds, cfg, cache)
        hits += h
        written += len(feats) - h
        for kind, msg in errors.items():
            entries["warnings"].append({"path": r.path, "kind": kind.value, "message": msg})
            log.warning("%s (%s): %s", r.path, kind.value, msg)
    summary = {
        "images": len(manifest.records),
        "kinds": [k.value for k in kinds],
        "computed": written,
        "cache_hits": hits,
        "cache": str(cache.root / cache.params_digest),
    }
    _write_json(args.out / "extract.json", summary)
    print(f"extracted {written} matrices, {hits} cache hits, {len(entries['warnings'])} warnings")


def _split_features(args, records, kinds):
    feats, excluded = ev.extract_many(
        [r.path for r in records], kinds, _extract_config(args), _cache_root(args), args.jobs
    )
    return feats, excluded


def cmd_train(args, entries) -> None:
    manifest = ev.load_manifest(args.manifest, args.strict_manifest)
    train = manifest.split(args.train_split)
    if not train:
        raise CliError(f"split {args.train_split} is empty")
    kinds = ev.mode_kinds(args.mode)
    feats, excluded = _split_features(args, train, kinds)
    _warn_excluded(entries, excluded)
    usable = [r for r in train if all(k in feats[r.path] for k in kinds)]
    kcfg = _kmeans_config(args)
    books, files = [], []
    for kind in kinds:
        cb = build_single_dictionary([feats[r.path][kind] for r in usable], kind, args.k, kcfg)
        name = f"codebook_{kind.value}_K{args.k}.json"
        cb.save(args.out / name)
        books.append(cb)
        files.append({"kind": kind.value, "file": name, "sha256": cb.digest()})
    X = np.stack([encode_image(feats[r.path], books, args.mode).values for r in usable])
    y = [r.label for r in usable]
    bestc, scores = grid_search_c(X, y, _cv_config(args), list(ev.CLASSES))
    model = train_multiclass(X, y, bestc, list(ev.CLASSES))
    model = replace(model, codebooks=tuple(cb.digest() for cb in books))
    bundle = {
        "format": BUNDLE_FORMAT,
        "version": 1,
        "mode": args.mode,
        "K": args.k,
        "train_split": args.train_split,
        "strict_paper": bool(args.strict_paper),
        "codebooks": files,
        "cv_accuracy": {repr(c): s for c, s in scores.items()},
        "svm": model.to_dict(),
    }
    digest = _write_json(args.out / "model.json", bundle)
    pred = model.predict(X)
    save_histograms(args.out / "train_histograms.jsonl",
                    [(r.path, encode_image(feats[r.path], books, args.mode)) for r in usable])
    print(f"mode={args.mode} K={args.k} bestc={bestc:g} "
          f"train_accuracy={100.0 * np.mean([p == t for p, t in zip(pred, y)]):.4f} "
          f"model_sha256={digest}")


def load_bundle(path: Path):
    """``(bundle dict, [Codebook], SvmModel)`` with codebook hashes verified."""
    path = Path(path)
    try:
        bundle = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read model {path}: {exc}") from exc
    if bundle.get("format") != BUNDLE_FORMAT or bundle.get("version") != 1:
        raise CliError(f"{path} is not a version-1 model bundle")
    model = SvmModel.from_dict(bundle["svm"])
    books = []
    for entry, expected in zip(bundle["codebooks"], model.codebooks):
        cb_path = path.parent / entry["file"]
        try:
            cb = Codebook.load(cb_path)
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(f"cannot read codebook {cb_path}: {exc}") from exc
        if cb.digest() != expected:
            raise CliError(f"codebook {cb_path} does not match the model (hash mismatch)")
        books.append(cb)
    if len(books) != len(ev.mode_kinds(bundle["mode"])):
        raise CliError("model bundle lists the wrong number of codebooks")
    return bundle, books, model


def cmd_predict(args, entries) -> None:
    bundle, books, model = load_bundle(args.model)
    mode = bundle["mode"]
    cfg = ExtractConfig(hessian=HessianConfig(refine=not bundle.get("strict_paper", False)))
    feats, errors, _ = extract_file(args.image, ev.mode_kinds(mode), cfg, None)
    if errors:
        msg = "; ".join(f"{k.value}: {m}" for k, m in errors.items())
        raise CliError(f"no descriptors for {args.image}: {msg}")
    h = encode_image(feats, books, mode)
    scores = model.scores(h.values)[0]
    label = model.predict(h.values)[0]
    print(f"predicted: {label}")
    for ((a, b), _), s in zip(model.pairs, scores):
        print(f"score {model.classes[a]}/{model.classes[b]}: {s:.12g}")
    if args.dump_histogram:
        print("histogram: " + " ".join(f"{v:.12g}" for v in h.values))


def _experiment_config(args, train_split, test_split) -> ev.ExperimentConfig:
    return ev.ExperimentConfig(
        modes=tuple(dict.fromkeys(args.mode or ev.MODES)),
        k_grid=tuple(args.k_grid),
        train_split=train_split,
        test_split=test_split,
        kmeans=_kmeans_config(args),
        cv=_cv_config(args),
        extract=_extract_config(args),
        jobs=args.jobs,
    )


def _run_direction(args, manifest, train_split, test_split, out: Path, entries) -> ev.Report:
    cfg = _experiment_config(args, train_split, test_split)
    report = ev.run_experiment(cfg, manifest, _cache_root(args))
    _warn_excluded(entries, report.excluded)
    report.write(out)
    digest = hashlib.sha256((out / "report.json").read_bytes()).hexdigest()
    print(f"train {train_split} / test {test_split}: report sha256 {digest}")
    print(report.accuracy_table(), end="")
    return report


def _evaluate_bundle(args, manifest, entries) -> None:
    bundle, books, model = load_bundle(args.model)
    # extract with the settings the bundle was trained with
    args.strict_paper = bool(bundle.get("strict_paper", False))
    test_split = "A" if bundle["train_split"] == "B" else "B"
    test = manifest.split(test_split)
    if not test:
        raise CliError(f"test split {test_split} is empty")
    kinds = ev.mode_kinds(bundle["mode"])
    feats, excluded = _split_features(args, test, kinds)
    _warn_excluded(entries, excluded)
    usable = [r for r in test if all(k in feats[r.path] for k in kinds)]
    X = np.stack([encode_image(feats[r.path], books, bundle["mode"]).values for r in usable])
    cm = ev.confusion(model.predict(X), [r.label for r in usable])
    result = {
        "mode": bundle["mode"],
        "K": bundle["K"],
        "bestc": model.bestc,
        "test_split": test_split,
        "accuracy": ev.accuracy(cm),
        "confusion": cm.to_list(),
        "false_negatives": ev.false_negative_count(cm),
        "excluded": excluded,
    }
    _write_json(args.out / "eval.json", result)
    print(f"accuracy {result['accuracy']:.4f}% on {len(usable)} images "
          f"({result['false_negatives']} false negatives)")


def cmd_eval(args, entries) -> None:
    manifest = ev.load_manifest(args.manifest, args.strict_manifest)
    if args.model is not None:
        _evaluate_bundle(args, manifest, entries)
        return
    test_split = "A" if args.train_split == "B" else "B"
    if not manifest.split(test_split):
        raise CliError(f"test split {test_split} is empty")
    _run_direction(args, manifest, args.train_split, test_split, args.out, entries)


def cmd_sweep(args, entries) -> None:
    manifest = ev.load_manifest(args.manifest, args.strict_manifest)
    for split in ev.SPLITS:
        if not manifest.split(split):
            raise CliError(f"split {split} is empty")
    hashes = {}
    for train_split, test_split in DIRECTIONS:
        name = f"train{train_split}_test{test_split}"
        _run_direction(args, manifest, train_split, test_split, args.out / name, entries)
        hashes[name] = hashlib.sha256((args.out / name / "report.json").read_bytes()).hexdigest()
    _write_json(args.out / "sweep.json", {"reports": hashes})


COMMANDS = {
    "extract": cmd_extract,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args.out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create {args.out}: {exc}", file=sys.stderr)
        return 2
    entries = {"errors": [], "warnings": []}
    status = 0
    try:
        COMMANDS[args.command](args, entries)
    except (CliError, ev.ManifestError, NoDescriptorsError, ValueError, KeyError, OSError) as exc:
        entries["errors"].append({"command": args.command, "message": str(exc)})
        print(f"error: {exc}", file=sys.stderr)
        status = 1
    _write_json(args.out / "errors.json", entries)
    return status


if __name__ == "__main__":
    sys.exit(main())
