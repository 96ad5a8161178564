"""Labeled fundus manifests, stratified folds and a synthetic fundus generator.

Randomness everywhere in this package comes from numpy's PCG64 bit
generator, seeded explicitly, so fold assignments and synthetic images are
reproducible from the recorded seeds alone.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

NUM_GRADES = 5


class Source(str, Enum):
    APTOS = "APTOS"
    IDRID = "IDRID"
    SYNTH = "SYNTH"


class ManifestError(ValueError):
    """Malformed manifest row, out-of-range grade, or id collision."""


class GenerationError(ValueError):
    """The synthetic generator cannot satisfy its parameters."""


@dataclass(frozen=True)
class Sample:
    id: str
    source: Source
    grade: int
    pixels: np.ndarray | str | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.grade not in range(NUM_GRADES):
            raise ManifestError(f"sample {self.id!r}: grade {self.grade} outside 0..4")


@dataclass(frozen=True)
class Manifest:
    samples: tuple[Sample, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        seen: set[tuple[Source, str]] = set()
        for s in self.samples:
            key = (s.source, s.id)
            if key in seen:
                raise ManifestError(f"duplicate sample {s.source.value}:{s.id}")
            seen.add(key)

    @property
    def counts(self) -> list[int]:
        c = [0] * NUM_GRADES
        for s in self.samples:
            c[s.grade] += 1
        return c

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.grade for s in self.samples], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, indices) -> Manifest:
        return Manifest(tuple(self.samples[int(i)] for i in indices))


def load_manifest(
    text: str,
    source: Source | str,
    id_column: str = "id_code",
    grade_column: str = "diagnosis",
    image_dir: str | Path | None = None,
    extension: str = ".png",
) -> Manifest:
    """Parse CSV text (header row, id column, integer grade column).

    Data rows are numbered from 1 in error messages.
    """
    source = Source(source)
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestError("manifest is empty (no header row)") from None
    header = [h.strip().lstrip("﻿") for h in header]
    for col in (id_column, grade_column):
        if col not in header:
            raise ManifestError(f"manifest header lacks column {col!r}: {header}")
    id_at, grade_at = header.index(id_column), header.index(grade_column)
    samples = []
    seen: set[str] = set()
    for row_no, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ManifestError(f"row {row_no}: expected {len(header)} fields, got {len(row)}")
        sid = row[id_at].strip()
        if not sid:
            raise ManifestError(f"row {row_no}: empty id")
        try:
            grade = int(row[grade_at].strip())
        except ValueError:
            raise ManifestError(f"row {row_no}: grade {row[grade_at]!r} is not an integer") from None
        if not 0 <= grade < NUM_GRADES:
            raise ManifestError(f"row {row_no}: grade {grade} outside 0..4")
        if sid in seen:
            raise ManifestError(f"row {row_no}: duplicate id {sid!r}")
        seen.add(sid)
        pixels = str(Path(image_dir) / f"{sid}{extension}") if image_dir is not None else None
        samples.append(Sample(sid, source, grade, pixels))
    return Manifest(tuple(samples))


def load_manifest_file(path: str | Path, source: Source | str, **kwargs) -> Manifest:
    return load_manifest(Path(path).read_text(encoding="utf-8"), source, **kwargs)


def bundled_manifest(name: str) -> Manifest:
    """Label-only manifests matching the published APTOS 2019 / IDRiD class counts.

    The ids are placeholders; pixel data is not bundled.
    """
    files = {
        "aptos": ("aptos2019_labels.csv", Source.APTOS, "id_code", "diagnosis"),
        "idrid": ("idrid_labels.csv", Source.IDRID, "Image name", "Retinopathy grade"),
    }
    fname, source, id_col, grade_col = files[name.lower()]
    text = resources.files("drtriage.data").joinpath(fname).read_text(encoding="utf-8")
    return load_manifest(text, source, id_col, grade_col)


def merge(a: Manifest, b: Manifest) -> Manifest:
    """Concatenate a then b; a (source, id) present in both is an error."""
    keys = {(s.source, s.id) for s in a.samples}
    for s in b.samples:
        if (s.source, s.id) in keys:
            raise ManifestError(f"id collision on merge: {s.source.value}:{s.id}")
    return Manifest(a.samples + b.samples)


def write_manifest(manifest: Manifest, path: str | Path, id_column: str = "id_code", grade_column: str = "diagnosis") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([id_column, grade_column])
        for s in manifest.samples:
            w.writerow([s.id, s.grade])


def stratified_folds(labels: Sequence[int], k: int, seed: int = 0) -> np.ndarray:
    """Fold index per sample, balanced within every class.

    Indices of each class (ascending grade) are permuted with a PCG64
    generator seeded by ``seed``, the per-class lists are concatenated and
    position i receives fold i mod k. Per-class fold sizes therefore differ
    by at most one, and so do total fold sizes.
    """
    y = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise ValueError("k must be >= 2")
    if y.size == 0:
        raise ValueError("no labels to split")
    rng = np.random.Generator(np.random.PCG64(seed))
    classes = np.unique(y)
    smallest = min(int((y == c).sum()) for c in classes)
    if k > smallest:
        warnings.warn(
            f"k={k} exceeds the {smallest} samples of the smallest class; some folds lack that class",
            stacklevel=2,
        )
    order = np.concatenate([rng.permutation(np.flatnonzero(y == c)) for c in classes])
    folds = np.empty(y.size, dtype=np.int64)
    folds[order] = np.arange(y.size) % k
    return folds


@dataclass(frozen=True)
class SynthParams:
    image_side: int = 64
    lesions_per_grade: int = 3
    vessel_walks: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.image_side < 32:
            raise ValueError("image_side must be >= 32")
        if self.lesions_per_grade < 1:
            raise ValueError("lesions_per_grade must be >= 1")
        if self.vessel_walks < 0:
            raise ValueError("vessel_walks must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def lesion_radius(side: int) -> float:
    return max(1.5, side / 40)


def synth_image(grade: int, params: SynthParams, rng: np.random.Generator | int | None = None) -> tuple[np.ndarray, int]:
    """Render a graded synthetic fundus photograph.

    A warm retina disk with a soft illumination gradient sits on a near-black
    frame; dark random-walk vessels radiate from an off-centre disc; exactly
    ``grade * lesions_per_grade`` bright, mutually separated lesions lie
    inside the disk.
    """
    if grade not in range(NUM_GRADES):
        raise ValueError(f"grade {grade} outside 0..4")
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.Generator(np.random.PCG64(params.seed if rng is None else int(rng)))
    side = params.image_side
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)

    R = side * rng.uniform(0.40, 0.45)
    cx = (side - 1) / 2 + rng.uniform(-0.03, 0.03) * side
    cy = (side - 1) / 2 + rng.uniform(-0.03, 0.03) * side
    dist = np.hypot(xx - cx, yy - cy)
    disk = dist <= R

    base = np.array([175.0, 88.0, 42.0]) * rng.uniform(0.85, 1.1)
    angle = rng.uniform(0, 2 * math.pi)
    ramp = ((xx - cx) * math.cos(angle) + (yy - cy) * math.sin(angle)) / R
    shade = 1.0 - 0.25 * (dist / R) ** 2 + 0.12 * ramp
    img = base[None, None, :] * shade[..., None]
    img += rng.normal(0, 3.0, size=img.shape)
    img = np.where(disk[..., None], img, rng.uniform(0, 6, size=img.shape))

    # vessels: darkened random walks starting near an optic disc
    vessel = np.zeros((side, side), dtype=bool)
    ox, oy = cx + 0.35 * R * math.cos(angle + math.pi), cy + 0.35 * R * math.sin(angle + math.pi)
    for _ in range(params.vessel_walks):
        x, y = ox, oy
        heading = rng.uniform(0, 2 * math.pi)
        for _ in range(int(1.5 * R)):
            heading += rng.normal(0, 0.25)
            x += math.cos(heading)
            y += math.sin(heading)
            ix, iy = int(round(x)), int(round(y))
            if not (0 <= ix < side and 0 <= iy < side) or not disk[iy, ix]:
                break
            vessel[iy, ix] = True
    img[vessel] *= 0.55

    # lesions: disjoint bright blobs, kept apart so each is its own component
    n = grade * params.lesions_per_grade
    rad = lesion_radius(side)
    spacing = 2 * rad + 2.5
    inner = 0.8 * R - rad
    centers: list[tuple[float, float]] = []
    attempts = 0
    while len(centers) < n:
        attempts += 1
        if attempts > 200 * max(n, 1):
            raise GenerationError(f"cannot place {n} lesions in a {side}px image")
        r = inner * math.sqrt(rng.uniform(0, 1))
        t = rng.uniform(0, 2 * math.pi)
        px, py = cx + r * math.cos(t), cy + r * math.sin(t)
        if all(math.hypot(px - qx, py - qy) >= spacing for qx, qy in centers):
            centers.append((px, py))
    lesion_rgb = np.array([250.0, 235.0, 130.0])
    for px, py in centers:
        blob = np.hypot(xx - px, yy - py) <= rad
        img[blob] = lesion_rgb + rng.normal(0, 2.0, size=(int(blob.sum()), 3))

    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8), grade


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent per-sample stream derived from (seed, index)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def synth_manifest(per_grade: int, params: SynthParams) -> Manifest:
    """``per_grade`` in-memory synthetic images per grade, grades interleaved."""
    samples = []
    for i in range(per_grade * NUM_GRADES):
        grade = i % NUM_GRADES
        img, _ = synth_image(grade, params, sample_rng(params.seed, i))
        samples.append(Sample(f"synth_{i:05d}", Source.SYNTH, grade, img))
    return Manifest(tuple(samples))


def read_png(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_png(path: str | Path, img: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path, format="PNG")


def load_pixels(sample: Sample) -> np.ndarray:
    if isinstance(sample.pixels, np.ndarray):
        return sample.pixels
    if sample.pixels is None:
        raise ValueError(f"sample {sample.id!r} has no pixel data")
    return read_png(sample.pixels)


def with_pixels(sample: Sample, pixels) -> Sample:
    return replace(sample, pixels=pixels)
