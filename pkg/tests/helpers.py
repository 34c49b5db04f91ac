"""Shared builders for test fixtures."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from delcbench.dataset import DatasetManifest, ImageRecord


def make_records(sizes, label="positive", prefix="rec", source="synthetic"):
    """Records with given (width, height) pairs; paths are placeholders."""
    return [
        ImageRecord(id=f"{prefix}_{i:04d}", path=f"images/{prefix}_{i:04d}.png",
                    label=label, width=w, height=h, source=source)
        for i, (w, h) in enumerate(sizes)
    ]


def make_manifest(n_positive, n_negative, width=90, height=150):
    """In-memory manifest; image files do not exist (fold planning only)."""
    records = (
        make_records([(width, height)] * n_positive, "positive", "pos")
        + make_records([(width, height)] * n_negative, "negative", "neg")
    )
    return DatasetManifest.from_records(records)


def write_manifest_lines(path: Path, rows: list[dict]) -> Path:
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
    return path


def random_image(rng: np.random.Generator, height=32, width=32) -> np.ndarray:
    return rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)


def constant_image(value, height=8, width=8) -> np.ndarray:
    return np.full((height, width, 3), value, dtype=np.uint8)


def tree_bytes(root: Path) -> dict[str, bytes]:
    """Relative path -> content for directory-equality checks."""
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


# published benchmark rows used as report-arithmetic fixtures:
# name -> (validation accuracy %, test accuracy %, params in millions)
REFERENCE_RESULTS = {
    "Xception": (95.1, 94.1, 22.9),
    "VGG16": (96.5, 93.9, 138.4),
    "VGG19": (95.1, 92.7, 143.7),
    "ResNet50": (98.1, 95.8, 25.6),
    "ResNet101": (97.5, 94.8, 44.7),
    "ResNet152": (97.8, 95.1, 60.4),
    "MobileNet": (98.7, 96.7, 4.3),
    "InceptionV3": (98.9, 97.7, 23.9),
    "DenseNet121": (96.4, 95.5, 8.1),
    "DenseNet169": (88.7, 88.1, 14.3),
    "DenseNet201": (95.1, 93.4, 20.2),
}
