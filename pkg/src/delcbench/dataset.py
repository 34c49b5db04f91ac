"""Dataset assembly: manifest I/O, shape statistics, resolution filtering,
repeated stratified fold planning, and a synthetic fixture generator."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import save_image

logger = logging.getLogger(__name__)

LABELS = ("positive", "negative")
SOURCES = ("DELC_ULPGC", "AWE", "synthetic")


class ManifestError(ValueError):
    """Manifest file is malformed or violates its invariants."""


@dataclass
class ImageRecord:
    """One labeled ear image: identity, location, size, and provenance."""

    id: str
    path: str
    label: str
    width: int
    height: int
    source: str

    def validate(self) -> None:
        if self.label not in LABELS:
            raise ManifestError(f"record {self.id!r}: unknown label {self.label!r}")
        if self.source not in SOURCES:
            raise ManifestError(f"record {self.id!r}: unknown source {self.source!r}")
        if self.width < 1 or self.height < 1:
            raise ManifestError(f"record {self.id!r}: non-positive dimensions")


@dataclass
class DatasetManifest:
    """Inventory of labeled images plus per-label counts.

    ``root`` anchors relative record paths; ``missing`` lists ids whose image
    file could not be found at load time (reported, not fatal).
    """

    records: list[ImageRecord]
    counts: dict[str, int]
    root: Path = field(default_factory=Path)
    missing: list[str] = field(default_factory=list)

    @classmethod
    def from_records(cls, records: list[ImageRecord], root: Path = Path(".")) -> "DatasetManifest":
        seen = set()
        counts = {label: 0 for label in LABELS}
        for rec in records:
            rec.validate()
            if rec.id in seen:
                raise ManifestError(f"duplicate id {rec.id!r}")
            seen.add(rec.id)
            counts[rec.label] += 1
        return cls(records=records, counts=counts, root=Path(root))

    def resolve_path(self, record: ImageRecord) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p

    def by_label(self, label: str) -> list[ImageRecord]:
        return [r for r in self.records if r.label == label]

    def ids(self) -> list[str]:
        return [r.id for r in self.records]


@dataclass
class ShapeStats:
    """Mean and population standard deviation of image widths/heights.

    The std fields are None when computed from fewer than two records.
    """

    mean_width: float
    mean_height: float
    std_width: float | None
    std_height: float | None


@dataclass
class FoldPlan:
    """A single train/test split of one repetition of k-fold CV."""

    repetition: int
    fold: int
    train_ids: list[str]
    test_ids: list[str]


def load_manifest(path: Path | str, require_both_classes: bool = True) -> DatasetManifest:
    """Read a JSONL manifest (one record object per line).

    Relative record paths are resolved against the manifest's directory.
    Records whose image file is absent are collected in ``manifest.missing``
    and logged, not rejected.
    """
    path = Path(path)
    records: list[ImageRecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                rec = ImageRecord(
                    id=str(row["id"]),
                    path=str(row["path"]),
                    label=str(row["label"]),
                    width=int(row["width"]),
                    height=int(row["height"]),
                    source=str(row["source"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: bad record: {exc}") from exc
            records.append(rec)

    if not records:
        raise ManifestError(f"{path}: zero records")
    manifest = DatasetManifest.from_records(records, root=path.parent)
    if require_both_classes:
        for label in LABELS:
            if manifest.counts[label] == 0:
                raise ManifestError(f"{path}: zero records with label {label!r}")

    manifest.missing = [r.id for r in records if not manifest.resolve_path(r).exists()]
    if manifest.missing:
        logger.warning(
            "%s: %d of %d records point to missing files (first: %s)",
            path, len(manifest.missing), len(records), manifest.missing[0],
        )
    return manifest


def save_manifest(manifest: DatasetManifest, path: Path | str) -> None:
    """Write records as JSONL, one object per line, in record order."""
    path = Path(path)
    lines = []
    for r in manifest.records:
        lines.append(json.dumps(
            {"id": r.id, "path": r.path, "label": r.label,
             "width": r.width, "height": r.height, "source": r.source},
            sort_keys=True,
        ))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def compute_shape_stats(records: list[ImageRecord]) -> ShapeStats:
    """Arithmetic mean and population std of record widths and heights."""
    if not records:
        raise ValueError("compute_shape_stats: empty record list")
    widths = np.array([r.width for r in records], dtype=np.float64)
    heights = np.array([r.height for r in records], dtype=np.float64)
    if len(records) < 2:
        return ShapeStats(float(widths.mean()), float(heights.mean()), None, None)
    return ShapeStats(
        mean_width=float(widths.mean()),
        mean_height=float(heights.mean()),
        std_width=float(widths.std(ddof=0)),
        std_height=float(heights.std(ddof=0)),
    )


def filter_negatives(candidates: list[ImageRecord], stats: ShapeStats, k: float) -> list[ImageRecord]:
    """Keep candidates whose width and height lie within mean +/- k*std.

    ``k = inf`` is the no-filtering sentinel and accepts everything. Input
    order is preserved; the result is monotone in k.
    """
    if k <= 0:
        raise ValueError("tolerance multiplier k must be > 0")
    if math.isinf(k):
        return list(candidates)
    if stats.std_width is None or stats.std_height is None:
        raise ValueError("shape stats have undefined std; cannot apply k-based filtering")

    lo_w, hi_w = stats.mean_width - k * stats.std_width, stats.mean_width + k * stats.std_width
    lo_h, hi_h = stats.mean_height - k * stats.std_height, stats.mean_height + k * stats.std_height
    return [
        r for r in candidates
        if lo_w <= r.width <= hi_w and lo_h <= r.height <= hi_h
    ]


def make_fold_plans(manifest: DatasetManifest, k: int, repetitions: int, seed: int) -> list[FoldPlan]:
    """Repeated stratified k-fold plans: per repetition, each class is
    shuffled (seeded) and dealt round-robin onto the k test folds.

    Per repetition the k test sets partition the manifest, and per-class
    test counts differ by at most one across folds.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    ids_by_label = {label: [r.id for r in manifest.by_label(label)] for label in LABELS}
    for label, ids in ids_by_label.items():
        if 0 < len(ids) < k:
            raise ValueError(f"class {label!r} has {len(ids)} members, fewer than k={k}")

    all_ids = manifest.ids()
    plans: list[FoldPlan] = []
    for rep in range(repetitions):
        rng = np.random.default_rng([seed, rep])
        fold_of: dict[str, int] = {}
        for label in LABELS:
            ids = ids_by_label[label]
            order = rng.permutation(len(ids))
            for pos, idx in enumerate(order):
                fold_of[ids[int(idx)]] = pos % k
        for fold in range(k):
            test = [i for i in all_ids if fold_of[i] == fold]
            train = [i for i in all_ids if fold_of[i] != fold]
            plans.append(FoldPlan(repetition=rep, fold=fold, train_ids=train, test_ids=test))
    return plans


def fold_plans_to_json(plans: list[FoldPlan]) -> str:
    rows = [
        {"repetition": p.repetition, "fold": p.fold,
         "train_ids": p.train_ids, "test_ids": p.test_ids}
        for p in plans
    ]
    return json.dumps(rows, indent=2, sort_keys=True) + "\n"


def fold_plans_from_json(text: str) -> list[FoldPlan]:
    rows = json.loads(text)
    return [
        FoldPlan(repetition=int(r["repetition"]), fold=int(r["fold"]),
                 train_ids=list(r["train_ids"]), test_ids=list(r["test_ids"]))
        for r in rows
    ]


def _dist_to_segment(xx: np.ndarray, yy: np.ndarray, p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    """Pixelwise Euclidean distance to the segment p0-p1 (points in xy)."""
    d = p1 - p0
    length_sq = float(d @ d)
    t = ((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / length_sq
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(xx - (p0[0] + t * d[0]), yy - (p0[1] + t * d[1]))


def crease_endpoints(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Endpoints of the synthetic crease segment, relative to image size."""
    p0 = np.array([0.32 * width, 0.60 * height])
    p1 = np.array([0.72 * width, 0.88 * height])
    return p0, p1


def _render_ear(rng: np.random.Generator, width: int, height: int, crease: bool) -> np.ndarray:
    """Draw an ellipse-textured ear-like image; positives get a dark
    diagonal crease band across the lower (lobe) region."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0

    background = np.array([208.0, 188.0, 174.0])
    ear = np.array([197.0, 158.0, 131.0])
    ell = ((xx - cx) / (0.46 * width)) ** 2 + ((yy - cy) / (0.47 * height)) ** 2
    img = np.where(ell[..., None] <= 1.0, ear, background)
    # mild radial shading so the ellipse is not flat
    img -= np.clip(1.0 - ell, 0.0, 1.0)[..., None] * 14.0
    img += rng.normal(0.0, 6.0, size=(height, width, 3))

    if crease:
        p0, p1 = crease_endpoints(width, height)
        dist = _dist_to_segment(xx, yy, p0, p1)
        depth = rng.uniform(70.0, 95.0)
        img -= (depth * np.exp(-((dist / 2.0) ** 2)))[..., None]

    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def synth_generate(n_per_class: int, seed: int, out_dir: Path | str) -> DatasetManifest:
    """Write a deterministic synthetic two-class fixture dataset.

    Images land in ``out_dir/images``, the manifest in ``out_dir/manifest.jsonl``
    with paths relative to ``out_dir``. Reruns with identical arguments produce
    byte-identical trees.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    records: list[ImageRecord] = []
    for label_idx, label in enumerate(LABELS):
        for i in range(n_per_class):
            rng = np.random.default_rng([seed, label_idx, i])
            width = int(rng.integers(80, 113))
            height = int(rng.integers(144, 177))
            img = _render_ear(rng, width, height, crease=(label == "positive"))
            rec_id = f"{label[:3]}_{i:04d}"
            rel_path = f"images/{rec_id}.png"
            save_image(img, images_dir / f"{rec_id}.png")
            records.append(ImageRecord(
                id=rec_id, path=rel_path, label=label,
                width=width, height=height, source="synthetic",
            ))

    manifest = DatasetManifest.from_records(records, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
