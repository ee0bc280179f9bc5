"""Procedural glyph dataset for desk-scale runs.

Each class is a fixed set of three pen strokes chosen from a small catalogue;
no two classes share more than one stroke. Every sample re-draws its class's
strokes with jittered endpoints and pen width, then rotates and shifts the
whole glyph a little. Output is deterministic for a given seed.
"""
from __future__ import annotations

import os
from itertools import combinations
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from config import IMAGE_SIZE, SPLIT_FRACTIONS, TOY_CLASSES, TOY_PER_CLASS
from data_ingestion import DatasetManifest, ImageRecord, stratified_split, write_manifest
from logger_setup import get_logger

log = get_logger(__name__)

MANIFEST_NAME = "manifest.txt"
INK, PAPER = 0, 255

# strokes on a unit square: ("line", x0, y0, x1, y1) or ("arc", x0, y0, x1, y1, start, end)
STROKES: Tuple[tuple, ...] = (
    ("line", 0.20, 0.22, 0.80, 0.22),          # top bar
    ("line", 0.20, 0.50, 0.80, 0.50),          # middle bar
    ("line", 0.20, 0.78, 0.80, 0.78),          # bottom bar
    ("line", 0.25, 0.18, 0.25, 0.82),          # left stem
    ("line", 0.50, 0.18, 0.50, 0.82),          # centre stem
    ("line", 0.75, 0.18, 0.75, 0.82),          # right stem
    ("line", 0.22, 0.20, 0.78, 0.80),          # falling diagonal
    ("line", 0.22, 0.80, 0.78, 0.20),          # rising diagonal
    ("arc", 0.28, 0.28, 0.72, 0.72, 0, 360),   # loop
    ("arc", 0.20, 0.45, 0.80, 0.95, 180, 360), # hook
)


def class_templates(classes: int) -> List[Tuple[int, int, int]]:
    """Greedy pick of 3-stroke sets sharing at most one stroke pairwise."""
    chosen: List[Tuple[int, int, int]] = []
    for combo in combinations(range(len(STROKES)), 3):
        if all(len(set(combo) & set(c)) <= 1 for c in chosen):
            chosen.append(combo)
            if len(chosen) == classes:
                return chosen
    raise ValueError(f"only {len(chosen)} distinct templates available, asked for {classes}")


def render_glyph(template: Sequence[int], rng: np.random.Generator, size: int = IMAGE_SIZE) -> Image.Image:
    img = Image.new("L", (size, size), PAPER)
    draw = ImageDraw.Draw(img)
    scale = size - 1
    for idx in template:
        kind, *coords = STROKES[idx]
        box = [c * scale + rng.uniform(-1.5, 1.5) for c in coords[:4]]
        width = int(rng.integers(2, 4))
        if kind == "line":
            draw.line(box, fill=INK, width=width)
        else:
            x0, y0, x1, y1 = box
            draw.arc([min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1)],
                     coords[4], coords[5], fill=INK, width=width)
    angle = float(rng.uniform(-8.0, 8.0))
    shift = tuple(int(v) for v in rng.integers(-2, 3, size=2))
    return img.rotate(angle, resample=Image.Resampling.BILINEAR, translate=shift, fillcolor=PAPER)


def make_toy_glyph_dataset(
    out_dir: str,
    classes: int = TOY_CLASSES,
    per_class: int = TOY_PER_CLASS,
    seed: int = 0,
    fractions: Sequence[float] = SPLIT_FRACTIONS,
    image_size: int = IMAGE_SIZE,
) -> Tuple[DatasetManifest, str]:
    """Render ``classes × per_class`` PNGs under ``out_dir/images`` and write a stratified manifest."""
    if classes < 2:
        raise ValueError(f"classes must be ≥ 2, got {classes}")
    if per_class < 10:
        raise ValueError(f"per_class must be ≥ 10, got {per_class}")
    templates = class_templates(classes)
    names = [f"glyph_{c:02d}" for c in range(classes)]

    records = []
    for c, (name, template) in enumerate(zip(names, templates)):
        folder = os.path.join(out_dir, "images", name)
        os.makedirs(folder, exist_ok=True)
        for i in range(per_class):
            rng = np.random.default_rng([seed, c, i])
            path = os.path.abspath(os.path.join(folder, f"{name}_{i:04d}.png"))
            render_glyph(template, rng, image_size).save(path)
            records.append(ImageRecord(path, c, "train"))

    manifest = stratified_split(records, fractions, seed, classes, names, image_size,
                                os.path.abspath(out_dir))
    manifest_path = write_manifest(manifest, os.path.join(out_dir, MANIFEST_NAME))
    log.info("Toy glyphs: %d classes × %d ➜ %s", classes, per_class, manifest_path)
    return manifest, manifest_path
