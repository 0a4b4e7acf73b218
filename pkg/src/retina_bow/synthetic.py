"""Synthetic fundus-like corpus for desk-scale end-to-end runs.

Each image has a dark surround, a circular field of view with uneven
illumination, an optic disc and a vessel tree. Drusen images add soft round
yellowish blobs; exudate images add clusters of small hard-edged bright
spots. The two sites differ in colour balance, illumination gradient, blur
and noise, so training on one site and testing on the other is a real
domain shift.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .evaluation import CLASSES, Record, write_manifest

SIZE = 512


@dataclass(frozen=True)
class Site:
    name: str
    split: str
    tint: tuple  # background RGB in [0, 1]
    gain: float
    illum_angle: float  # direction of the illumination gradient (radians)
    illum_strength: float
    noise: float
    blur: float


SITES = (
    Site("synth-a", "A", (0.72, 0.33, 0.16), 1.00, 0.6, 0.35, 0.012, 1.0),
    Site("synth-b", "B", (0.62, 0.30, 0.20), 0.85, 2.4, 0.25, 0.015, 1.0),
)


def _field_of_view(rng):
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    cy = SIZE / 2 + rng.uniform(-6, 6)
    cx = SIZE / 2 + rng.uniform(-6, 6)
    r = SIZE * rng.uniform(0.45, 0.48)
    d = np.hypot(yy - cy, xx - cx)
    # soft rim
    mask = np.clip((r - d) / 4.0, 0.0, 1.0)
    return yy, xx, (cy, cx, r), mask


def _vessels(rng, disc, shape):
    layer = np.zeros(shape, dtype=np.float32)
    dy, dx = disc
    for _ in range(rng.integers(7, 11)):
        angle = rng.uniform(0, 2 * np.pi)
        pts = [(dx, dy)]
        x, y = dx, dy
        width = int(rng.integers(3, 6))
        for _ in range(14):
            angle += rng.normal(0, 0.25)
            step = rng.uniform(14, 24)
            x, y = x + step * np.cos(angle), y + step * np.sin(angle)
            pts.append((x, y))
        poly = np.round(np.array(pts)).astype(np.int32)
        cv2.polylines(layer, [poly], False, 1.0, thickness=width, lineType=cv2.LINE_AA)
    return cv2.GaussianBlur(layer, (0, 0), 1.2).astype(np.float64)


def _drusen(rng, yy, xx, centre, radius):
    layer = np.zeros_like(yy)
    cy, cx = centre
    for _ in range(rng.integers(45, 75)):
        rr = radius * np.sqrt(rng.uniform(0, 0.75))
        t = rng.uniform(0, 2 * np.pi)
        by, bx = cy + rr * np.sin(t), cx + rr * np.cos(t)
        s = rng.uniform(4.0, 8.0)
        layer += rng.uniform(0.5, 0.9) * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * s * s))
    return np.clip(layer, 0.0, 1.0)


def _exudates(rng, centre, radius, shape):
    layer = np.zeros(shape, dtype=np.float32)
    cy, cx = centre
    for _ in range(rng.integers(7, 11)):
        rr = radius * np.sqrt(rng.uniform(0.02, 0.75))
        t = rng.uniform(0, 2 * np.pi)
        gy, gx = cy + rr * np.sin(t), cx + rr * np.cos(t)
        for _ in range(rng.integers(8, 18)):
            py = int(round(gy + rng.normal(0, 12)))
            px = int(round(gx + rng.normal(0, 12)))
            axes = (int(rng.integers(2, 6)), int(rng.integers(2, 5)))
            cv2.ellipse(layer, (px, py), axes, rng.uniform(0, 180), 0, 360, 1.0, -1)
    return layer.astype(np.float64)


def render(label: str, site: Site, seed: int) -> np.ndarray:
    """One 512 x 512 RGB uint8 image."""
    if label not in CLASSES:
        raise ValueError(f"unknown label {label!r}")
    rng = np.random.default_rng(seed)
    yy, xx, (cy, cx, r), mask = _field_of_view(rng)
    tint = np.asarray(site.tint) * rng.uniform(0.95, 1.05, 3)
    ramp = ((xx - cx) * np.cos(site.illum_angle) + (yy - cy) * np.sin(site.illum_angle)) / r
    illum = site.gain * (1.0 + site.illum_strength * ramp) * (1.0 - 0.25 * ((yy - cy) ** 2 + (xx - cx) ** 2) / r**2)
    texture = cv2.GaussianBlur(rng.normal(0, 1, (SIZE, SIZE)), (0, 0), 6.0)
    base = illum[..., None] * tint[None, None, :] * (1.0 + 0.04 * texture[..., None])

    side = rng.choice([-1.0, 1.0])
    disc = (cy + rng.uniform(-20, 20), cx + side * r * rng.uniform(0.5, 0.6))
    d_disc = np.hypot(yy - disc[0], xx - disc[1])
    disc_layer = 1.0 / (1.0 + np.exp((d_disc - rng.uniform(34, 42)) / 3.0))
    img = base + disc_layer[..., None] * np.array([0.25, 0.30, 0.15])

    vessels = _vessels(rng, disc, (SIZE, SIZE))
    img *= 1.0 - 0.45 * vessels[..., None]

    macula = (cy + rng.uniform(-15, 15), cx - side * r * rng.uniform(0.05, 0.15))
    if label == "drusen":
        lesion = _drusen(rng, yy, xx, macula, r)
        img += lesion[..., None] * np.array([0.22, 0.22, 0.06])
    elif label == "exudate":
        lesion = _exudates(rng, macula, r, (SIZE, SIZE))
        lesion = cv2.GaussianBlur(lesion, (0, 0), 0.6)
        img = img * (1.0 - lesion[..., None]) + lesion[..., None] * np.array([0.95, 0.85, 0.35])

    img = cv2.GaussianBlur(img, (0, 0), site.blur)
    img += rng.normal(0, site.noise, img.shape)
    img *= mask[..., None]
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def generate_corpus(out_dir, per_class: int = 15, seed: int = 0) -> Path:
    """Write ``per_class`` images per (site, class) and a ``manifest.csv``.

    The default gives 90 images: 45 in split A and 45 in split B.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for s, site in enumerate(SITES):
        for c, label in enumerate(CLASSES):
            for i in range(per_class):
                name = f"{site.split}_{label}_{i:02d}.png"
                img = render(label, site, seed * 1_000_003 + (s * 3 + c) * 10_007 + i)
                if not cv2.imwrite(str(out / name), cv2.cvtColor(img, cv2.COLOR_RGB2BGR)):
                    raise OSError(f"could not write {out / name}")
                records.append(Record(name, label, site.name, site.split))
    path = out / "manifest.csv"
    write_manifest(path, records)
    return path


def main(argv=None) -> int:
    import argparse

    p = argparse.ArgumentParser(description="Generate the synthetic fundus corpus.")
    p.add_argument("out", type=Path)
    p.add_argument("--per-class", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    print(generate_corpus(args.out, args.per_class, args.seed))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
