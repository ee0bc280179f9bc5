"""Load labelled glyph images and return manifests / pixel arrays.

• A manifest is a UTF-8 text file: one header line
  ``classes=<K>;image_size=<S>;seed=<n>[;names=a|b|…][;train=<n>;val=<n>;test=<n>]``
  followed by one ``path,label,split,origin`` record per line (paths relative to
  the manifest's directory).
• Every image is reduced to one channel, resized (bilinear) to S×S and mapped
  from [0, 255] to [-1, +1].
• Stratified splits use largest-remainder apportionment per class, so split
  counts are exact and reproducible for a given seed.
"""
from __future__ import annotations

import hashlib
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Dict, List, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from PIL import Image, UnidentifiedImageError

from config import IMAGE_SIZE, SPLIT_FRACTIONS
from errors import (
    ClassMismatch,
    ClassTooSmall,
    DuplicatePath,
    LabelOutOfRange,
    ManifestError,
    MissingFile,
    ParseError,
    UndecodableImage,
)
from logger_setup import get_logger

if TYPE_CHECKING:
    from sampler import SyntheticSampleRecord

log = get_logger(__name__)

SPLITS = ("train", "val", "test")
ORIGINS = ("real", "synthetic")
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff")


# ─────────────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class ImageRecord:
    path: str           # absolute in memory; relative to the manifest on disk
    label: int
    split: str
    origin: str = "real"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(f"{self.path}: unknown split {self.split!r}")
        if self.origin not in ORIGINS:
            raise ManifestError(f"{self.path}: unknown origin {self.origin!r}")
        if self.origin == "synthetic" and self.split == "test":
            raise ManifestError(f"{self.path}: synthetic records cannot be in the test split")

    @property
    def key(self) -> int:
        """Stable identity of the record (used to key validation noise)."""
        digest = hashlib.sha256(os.path.normpath(self.path).encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little") % (2**63)


@dataclass(frozen=True)
class DatasetManifest:
    class_count: int
    class_names: Tuple[str, ...]
    records: Tuple[ImageRecord, ...]
    image_size: int = IMAGE_SIZE
    seed: int = 0
    root: str = "."
    split_header: Dict[str, int] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.class_count < 2:
            raise ManifestError(f"class_count must be ≥ 2, got {self.class_count}")
        if len(self.class_names) != self.class_count:
            raise ManifestError(
                f"{len(self.class_names)} class names for {self.class_count} classes"
            )
        seen = set()
        for rec in self.records:
            if not 0 <= rec.label < self.class_count:
                raise LabelOutOfRange(
                    f"{rec.path}: label {rec.label} outside [0, {self.class_count})"
                )
            norm = os.path.normpath(rec.path)
            if norm in seen:
                raise DuplicatePath(f"duplicate path {rec.path}")
            seen.add(norm)
        if self.split_header is not None:
            actual = self.split_counts()
            for split, expected in self.split_header.items():
                if actual[split] != expected:
                    raise ManifestError(
                        f"header says {split}={expected} but manifest has {actual[split]}"
                    )

    def split(self, name: str) -> List[ImageRecord]:
        return [r for r in self.records if r.split == name]

    def split_counts(self) -> Dict[str, int]:
        counts = Counter(r.split for r in self.records)
        return {s: counts.get(s, 0) for s in SPLITS}

    def class_counts(self, split: str) -> Dict[int, int]:
        counts = Counter(r.label for r in self.records if r.split == split)
        return {k: counts.get(k, 0) for k in range(self.class_count)}


def _default_names(k: int) -> Tuple[str, ...]:
    return tuple(f"class_{i}" for i in range(k))


# ─── manifest I/O ────────────────────────────────────────────────────
def _parse_header(line: str) -> Dict[str, str]:
    fields: Dict[str, str] = {}
    for part in line.strip().split(";"):
        if not part:
            continue
        if "=" not in part:
            raise ParseError(1, f"header field without '=': {part!r}")
        key, value = part.split("=", 1)
        fields[key.strip()] = value.strip()
    for required in ("classes", "image_size", "seed"):
        if required not in fields:
            raise ParseError(1, f"header missing {required!r}")
    return fields


def load_manifest(
    path: str, check_files: bool = True, verify_images: bool = True, n_jobs: int = 1
) -> DatasetManifest:
    """Parse and validate a manifest file; every invariant is checked here."""
    if not os.path.isfile(path):
        raise MissingFile(f"manifest not found: {path}")
    root = os.path.dirname(os.path.abspath(path))

    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise ManifestError(f"{path}: {exc}") from exc
    if not lines:
        raise ParseError(1, "empty manifest")

    header = _parse_header(lines[0])
    try:
        k = int(header["classes"])
        image_size = int(header["image_size"])
        seed = int(header["seed"])
    except ValueError as exc:
        raise ParseError(1, f"non-integer header value ({exc})") from exc
    names = tuple(header["names"].split("|")) if "names" in header else _default_names(k)
    split_header = None
    if all(s in header for s in SPLITS):
        try:
            split_header = {s: int(header[s]) for s in SPLITS}
        except ValueError as exc:
            raise ParseError(1, f"non-integer split count ({exc})") from exc

    records: List[ImageRecord] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise ParseError(lineno, f"expected 4 comma-separated fields, got {len(parts)}")
        rel, label, split, origin = (p.strip() for p in parts)
        try:
            label_i = int(label)
        except ValueError as exc:
            raise ParseError(lineno, f"label is not an integer: {label!r}") from exc
        if not 0 <= label_i < k:
            raise LabelOutOfRange(f"line {lineno}: label {label_i} outside [0, {k})")
        try:
            records.append(ImageRecord(os.path.join(root, rel), label_i, split, origin))
        except ManifestError as exc:
            raise ParseError(lineno, str(exc)) from exc

    manifest = DatasetManifest(
        class_count=k,
        class_names=names,
        records=tuple(records),
        image_size=image_size,
        seed=seed,
        root=root,
        split_header=split_header,
    )
    if check_files:
        missing = [r.path for r in manifest.records if not os.path.isfile(r.path)]
        if missing:
            raise MissingFile(f"{len(missing)} image(s) missing, first: {missing[0]}")
    if check_files and verify_images:
        Parallel(n_jobs=n_jobs)(delayed(_verify_image)(r.path) for r in manifest.records)
    log.info("Loaded manifest %s  (%d records, K=%d, %s)",
             path, len(records), k, manifest.split_counts())
    return manifest


def write_manifest(manifest: DatasetManifest, path: str) -> str:
    """Write *manifest* to *path*; record paths are stored relative to it."""
    root = os.path.dirname(os.path.abspath(path))
    os.makedirs(root, exist_ok=True)
    counts = manifest.split_counts()
    header = (
        f"classes={manifest.class_count};image_size={manifest.image_size};seed={manifest.seed}"
        f";names={'|'.join(manifest.class_names)}"
        f";train={counts['train']};val={counts['val']};test={counts['test']}"
    )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for r in manifest.records:
            rel = os.path.relpath(r.path, root).replace(os.sep, "/")
            fh.write(f"{rel},{r.label},{r.split},{r.origin}\n")
    return path


# ─── images ──────────────────────────────────────────────────────────
def _verify_image(path: str) -> None:
    try:
        with Image.open(path) as img:
            img.verify()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise UndecodableImage(f"{path}: {exc}") from exc


def preprocess_image(raw, image_size: int = IMAGE_SIZE) -> np.ndarray:
    """Decoded image (PIL image or H×W[×C] array, 0‥255) → float32 (1, S, S) in [-1, 1]."""
    if isinstance(raw, Image.Image):
        if raw.mode in ("P", "PA"):
            raw = raw.convert("RGBA")
        arr = np.asarray(raw, dtype=np.float32)
    else:
        arr = np.asarray(raw, dtype=np.float32)

    if arr.ndim == 3:
        channels = arr.shape[2]
        if channels in (2, 4):          # drop alpha
            arr = arr[..., : channels - 1]
        arr = arr.mean(axis=2)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise UndecodableImage(f"unsupported image shape {arr.shape}")

    if arr.shape != (image_size, image_size):
        img = Image.fromarray(arr.astype(np.float32))  # 2-D float32 → mode "F"
        img = img.resize((image_size, image_size), resample=Image.Resampling.BILINEAR)
        arr = np.asarray(img, dtype=np.float32)

    out = arr / 127.5 - 1.0
    return np.clip(out, -1.0, 1.0).astype(np.float32)[None, :, :]


def load_image(path: str, image_size: int = IMAGE_SIZE) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            return preprocess_image(img, image_size)
    except FileNotFoundError as exc:
        raise MissingFile(path) from exc
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise UndecodableImage(f"{path}: {exc}") from exc


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """[-1, 1] → [0, 255] with round-half-even; drops the channel axis."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[0]
    return np.round((np.clip(arr, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def load_split(
    manifest: DatasetManifest, split: str, n_jobs: int = 1
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decode every record of *split* → (images[N,1,S,S], labels[N], keys[N])."""
    records = manifest.split(split)
    s = manifest.image_size
    if not records:
        return (np.zeros((0, 1, s, s), np.float32), np.zeros(0, np.int64), np.zeros(0, np.int64))
    images = Parallel(n_jobs=n_jobs)(delayed(load_image)(r.path, s) for r in records)
    labels = np.array([r.label for r in records], dtype=np.int64)
    keys = np.array([r.key for r in records], dtype=np.int64)
    return np.stack(images).astype(np.float32), labels, keys


# ─── splitting / fusion ──────────────────────────────────────────────
def apportion(n: int, fractions: Sequence[float]) -> List[int]:
    """Largest-remainder apportionment of n items; ties go to the earlier slot."""
    quotas = [n * f for f in fractions]
    counts = [int(np.floor(q)) for q in quotas]
    leftover = n - sum(counts)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def stratified_split(
    records: Sequence[ImageRecord],
    fractions: Sequence[float] = SPLIT_FRACTIONS,
    seed: int = 0,
    class_count: int | None = None,
    class_names: Sequence[str] | None = None,
    image_size: int = IMAGE_SIZE,
    root: str = ".",
) -> DatasetManifest:
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ManifestError(f"fractions must be 3 values summing to 1, got {tuple(fractions)}")

    by_class: Dict[int, List[ImageRecord]] = defaultdict(list)
    for r in records:
        by_class[r.label].append(r)
    if class_count is None:
        class_count = max(by_class) + 1 if by_class else 0
    small = {c: len(rs) for c, rs in by_class.items() if len(rs) < 3}
    if small:
        raise ClassTooSmall(f"classes with fewer than 3 records: {small}")

    out: List[ImageRecord] = []
    for label in sorted(by_class):
        members = sorted(by_class[label], key=lambda r: r.path)
        rng = np.random.default_rng([seed, label])
        perm = rng.permutation(len(members))
        counts = apportion(len(members), fractions)
        bounds = np.cumsum([0] + counts)
        for split_idx, split in enumerate(SPLITS):
            for i in perm[bounds[split_idx]: bounds[split_idx + 1]]:
                out.append(replace(members[i], split=split))

    names = tuple(class_names) if class_names is not None else _default_names(class_count)
    manifest = DatasetManifest(class_count, names, tuple(out), image_size, seed, root)
    log.info("Stratified split (seed %d): %s", seed, manifest.split_counts())
    return manifest


def subsample_train(manifest: DatasetManifest, per_class: int, seed: int = 0) -> DatasetManifest:
    """Keep at most *per_class* seeded-random train records per class; val/test unchanged."""
    kept: List[ImageRecord] = []
    by_class: Dict[int, List[ImageRecord]] = defaultdict(list)
    for r in manifest.records:
        if r.split == "train":
            by_class[r.label].append(r)
        else:
            kept.append(r)
    for label in sorted(by_class):
        members = sorted(by_class[label], key=lambda r: r.path)
        perm = np.random.default_rng([seed, label]).permutation(len(members))
        kept.extend(members[i] for i in sorted(perm[:per_class]))
    return replace(manifest, records=tuple(kept), split_header=None)


def fuse_datasets(
    real: DatasetManifest, synthetic: Sequence["SyntheticSampleRecord"]
) -> DatasetManifest:
    """Train split = real train ∪ synthetic; val/test copied unchanged.

    Real records keep their order and synthetic records are appended, so an
    empty pool returns a manifest equal to ``real``.
    """
    extra: List[ImageRecord] = []
    for rec in synthetic:
        if not 0 <= rec.intended_class < real.class_count:
            raise ClassMismatch(
                f"synthetic class {rec.intended_class} outside [0, {real.class_count})"
            )
        if rec.path is None:
            raise ManifestError("synthetic record has no saved image path; save samples first")
        extra.append(ImageRecord(os.path.abspath(rec.path), rec.intended_class, "train", "synthetic"))

    fused = replace(real, records=real.records + tuple(extra), split_header=None)
    log.info("Fused %d real + %d synthetic train records", len(real.split("train")), len(extra))
    return fused


def manifest_from_folders(
    root: str,
    fractions: Sequence[float] = SPLIT_FRACTIONS,
    seed: int = 0,
    image_size: int = IMAGE_SIZE,
) -> DatasetManifest:
    """Build a stratified manifest from a ``root/<class_name>/*.png`` tree."""
    if not os.path.isdir(root):
        raise MissingFile(f"image folder not found: {root}")
    names = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    records = []
    for label, name in enumerate(names):
        folder = os.path.join(root, name)
        for fname in sorted(os.listdir(folder)):
            if fname.lower().endswith(IMAGE_EXTENSIONS):
                records.append(ImageRecord(os.path.abspath(os.path.join(folder, fname)), label, "train"))
    return stratified_split(records, fractions, seed, len(names), names, image_size, os.path.abspath(root))
