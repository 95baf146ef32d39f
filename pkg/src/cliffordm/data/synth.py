"""Procedural 8-label fundus-like dataset used in place of ODIR-5K.

Every class owns one pattern generator; an image is the shared background
with the patterns of all active labels drawn on top. Generation is a pure
function of :class:`SynthSpec`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np
from PIL import Image

from .cmt import cmt_write
from .manifest import SampleRecord, write_manifest

PATTERNS = (
    "bright_disc",
    "dark_blob",
    "ring",
    "oriented_stripes",
    "checker",
    "gradient",
    "speckle_cluster",
    "border_band",
)


@dataclass(frozen=True)
class SynthSpec:
    num_patients: int = 800
    image_size: int = 128
    label_prior: Tuple[float, ...] = (0.3,) * 8
    two_eye_prob: float = 0.25
    noise: float = 0.03
    seed: int = 0
    patterns: Tuple[str, ...] = field(default=PATTERNS)

    def __post_init__(self):
        if self.num_patients < 1 or self.image_size < 32:
            raise ValueError("need at least one patient and image_size >= 32")
        if len(self.label_prior) != len(self.patterns) or len(set(self.patterns)) != len(self.patterns):
            raise ValueError("one distinct pattern and one prior per class required")


def _grid(n):
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float32)
    return yy, xx


def background(n: int, rng: np.random.Generator, noise: float) -> np.ndarray:
    yy, xx = _grid(n)
    c = (n - 1) / 2
    r = np.hypot(yy - c, xx - c) / (n / 2)
    inside = (r < 0.95).astype(np.float32)
    shade = (1.0 - 0.35 * r**2)[..., None]
    img = inside[..., None] * shade * np.array([0.62, 0.28, 0.14], np.float32)
    img += noise * rng.standard_normal(img.shape).astype(np.float32) * inside[..., None]
    return img


def _center(rng, n, margin):
    return rng.uniform(margin, n - margin, size=2)


def _paint(img, mask, color):
    mask = mask[..., None]
    img *= 1 - mask
    img += mask * np.asarray(color, np.float32)


def bright_disc(img, rng):
    n = img.shape[0]
    yy, xx = _grid(n)
    cy, cx = _center(rng, n, 0.25 * n)
    rad = n * rng.uniform(0.06, 0.09)
    _paint(img, (np.hypot(yy - cy, xx - cx) < rad).astype(np.float32), (1.0, 0.95, 0.7))


def dark_blob(img, rng):
    n = img.shape[0]
    yy, xx = _grid(n)
    cy, cx = _center(rng, n, 0.25 * n)
    sig = n * rng.uniform(0.05, 0.07)
    g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2))
    img *= (1 - 0.85 * g)[..., None]


def ring(img, rng):
    n = img.shape[0]
    yy, xx = _grid(n)
    cy, cx = _center(rng, n, 0.25 * n)
    rad = n * rng.uniform(0.1, 0.13)
    d = np.abs(np.hypot(yy - cy, xx - cx) - rad)
    _paint(img, (d < max(1.5, n / 64)).astype(np.float32), (0.3, 0.9, 0.4))


def oriented_stripes(img, rng):
    n = img.shape[0]
    yy, xx = _grid(n)
    cy, cx = _center(rng, n, 0.25 * n)
    half = 0.15 * n
    box = ((np.abs(yy - cy) < half) & (np.abs(xx - cx) < half)).astype(np.float32)
    period = max(4.0, n / 21)
    stripe = (np.sin(2 * np.pi * (xx + yy) / (period * np.sqrt(2))) > 0).astype(np.float32)
    _paint(img, 0.8 * box * stripe, (0.9, 0.9, 1.0))


def checker(img, rng):
    n = img.shape[0]
    yy, xx = _grid(n)
    cy, cx = _center(rng, n, 0.25 * n)
    half = 0.12 * n
    box = ((np.abs(yy - cy) < half) & (np.abs(xx - cx) < half)).astype(np.float32)
    cell = max(2, n // 32)
    chk = (((yy // cell) + (xx // cell)) % 2).astype(np.float32)
    _paint(img, box * chk, (0.1, 0.8, 0.9))


def gradient(img, rng):
    n = img.shape[0]
    _, xx = _grid(n)
    ramp = xx / (n - 1)
    if rng.random() < 0.5:
        ramp = ramp[:, ::-1]
    img[..., 2] += 0.55 * ramp


def speckle_cluster(img, rng):
    n = img.shape[0]
    cy, cx = _center(rng, n, 0.25 * n)
    spread = 0.1 * n
    pts = rng.normal(0, spread / 2, size=(40, 2)) + (cy, cx)
    for py, px in np.clip(np.round(pts), 0, n - 2).astype(int):
        img[py : py + 2, px : px + 2] = (1.0, 0.3, 1.0)


def border_band(img, rng):
    n = img.shape[0]
    w = max(2, int(round(n * rng.uniform(0.04, 0.07))))
    mask = np.zeros((n, n), np.float32)
    mask[:w], mask[-w:], mask[:, :w], mask[:, -w:] = 1, 1, 1, 1
    _paint(img, mask, (0.2, 0.25, 1.0))


GENERATORS: dict = {
    "bright_disc": bright_disc,
    "dark_blob": dark_blob,
    "ring": ring,
    "oriented_stripes": oriented_stripes,
    "checker": checker,
    "gradient": gradient,
    "speckle_cluster": speckle_cluster,
    "border_band": border_band,
}


def render(labels, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """One uint8 ``S x S x 3`` image with the patterns of the active labels."""
    img = background(spec.image_size, rng, spec.noise)
    for active, name in zip(labels, spec.patterns):
        if active:
            GENERATORS[name](img, rng)
    return (np.clip(img, 0.0, 1.0) * 255 + 0.5).astype(np.uint8)


def patient_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def synth_records(spec: SynthSpec) -> List[Tuple[SampleRecord, List[np.ndarray]]]:
    """Records and their images, in memory."""
    out = []
    prior = np.asarray(spec.label_prior)
    width = len(str(spec.num_patients - 1))
    for i in range(spec.num_patients):
        rng = patient_rng(spec.seed, i)
        labels = tuple(int(v) for v in (rng.random(len(prior)) < prior))
        both = rng.random() < spec.two_eye_prob
        pid = f"p{i:0{width}d}"
        eyes = ["L", "R"] if both else [("L", "R")[int(rng.integers(2))]]
        images = [render(labels, spec, rng) for _ in eyes]
        left = f"images/{pid}_L.png" if "L" in eyes else None
        right = f"images/{pid}_R.png" if "R" in eyes else None
        out.append((SampleRecord(pid, left, right, labels), images))
    return out


def synth_generate(spec: SynthSpec, out_dir) -> Path:
    """Write images (PNG and CMT1) plus ``manifest.csv``; returns the manifest path."""
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for rec, images in synth_records(spec):
        for rel, img in zip(rec.paths, images):
            Image.fromarray(img, "RGB").save(root / rel, format="PNG", optimize=False)
            cmt_write((root / rel).with_suffix(".cmt"), img)
        records.append(rec)
    manifest = root / "manifest.csv"
    write_manifest(manifest, records)
    return manifest
