"""Pretrained-encoder registry, per-backbone preprocessing, feature
extraction (ONNX models or a deterministic stub), and the binary feature
cache."""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

CACHE_MAGIC = b"DELCFEAT"
CACHE_VERSION = 1

# Keras-style "caffe" preprocessing: BGR order, per-channel mean subtraction
# on the 0-255 scale.
_CAFFE_MEAN = (103.939, 116.779, 123.68)
_ONES = (1.0, 1.0, 1.0)
# "torch" preprocessing expressed on the 0-255 scale.
_TORCH_MEAN = (123.675, 116.28, 103.53)
_TORCH_STD = (58.395, 57.12, 57.375)


class CacheFormatError(ValueError):
    """Feature-cache file has a corrupt or incompatible header/body."""


@dataclass(frozen=True)
class BackboneSpec:
    """Descriptor of one pretrained encoder: published parameter count and
    the preprocessing convention its family expects.

    ``pixel_scaling`` is one of "unit_interval" (v/255), "signed_unit"
    (v/127.5 - 1), or "mean_std" ((v - mean)/std with mean/std in 0-255
    units, applied after any channel reorder).
    """

    name: str
    param_count: float  # millions
    input_size: int
    pixel_scaling: str
    channel_order: str = "RGB"
    mean: tuple[float, float, float] | None = None
    std: tuple[float, float, float] | None = None
    model_path: Path | None = None


_REGISTRY: tuple[BackboneSpec, ...] = (
    BackboneSpec("Xception", 22.9, 299, "signed_unit"),
    BackboneSpec("VGG16", 138.4, 224, "mean_std", "BGR", _CAFFE_MEAN, _ONES),
    BackboneSpec("VGG19", 143.7, 224, "mean_std", "BGR", _CAFFE_MEAN, _ONES),
    BackboneSpec("ResNet50", 25.6, 224, "mean_std", "BGR", _CAFFE_MEAN, _ONES),
    BackboneSpec("ResNet101", 44.7, 224, "mean_std", "BGR", _CAFFE_MEAN, _ONES),
    BackboneSpec("ResNet152", 60.4, 224, "mean_std", "BGR", _CAFFE_MEAN, _ONES),
    BackboneSpec("MobileNet", 4.3, 224, "signed_unit"),
    BackboneSpec("InceptionV3", 23.9, 299, "signed_unit"),
    BackboneSpec("DenseNet121", 8.1, 224, "mean_std", "RGB", _TORCH_MEAN, _TORCH_STD),
    BackboneSpec("DenseNet169", 14.3, 224, "mean_std", "RGB", _TORCH_MEAN, _TORCH_STD),
    BackboneSpec("DenseNet201", 20.2, 224, "mean_std", "RGB", _TORCH_MEAN, _TORCH_STD),
)


def registry() -> list[BackboneSpec]:
    """The eleven compared encoders with their published parameter counts."""
    return list(_REGISTRY)


def get_spec(name: str, model_dir: Path | str | None = None) -> BackboneSpec:
    """Look up a registry entry, optionally attaching <model_dir>/<name>.onnx."""
    for spec in _REGISTRY:
        if spec.name == name:
            if model_dir is not None:
                return replace(spec, model_path=Path(model_dir) / f"{name}.onnx")
            return spec
    raise KeyError(f"unknown backbone {name!r}")


@dataclass
class FeatureVector:
    backbone_name: str
    image_id: str
    values: np.ndarray  # float32, finite

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 1 or self.values.size == 0:
            raise ValueError("feature vector must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"non-finite feature values for image {self.image_id!r}")


def preprocess(img: np.ndarray, spec: BackboneSpec) -> np.ndarray:
    """Bilinear-resize to the encoder's square input, reorder channels, and
    scale pixels per the spec. Returns float32 (input_size, input_size, 3)."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (h, w, 3) image, got {img.shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError("zero-area image")
    size = spec.input_size
    if img.shape[0] != size or img.shape[1] != size:
        arr = np.asarray(Image.fromarray(img).resize((size, size), Image.BILINEAR))
    else:
        arr = img
    x = arr.astype(np.float32)
    if spec.channel_order == "BGR":
        x = x[..., ::-1]
    if spec.pixel_scaling == "unit_interval":
        x = x / 255.0
    elif spec.pixel_scaling == "signed_unit":
        x = x / 127.5 - 1.0
    elif spec.pixel_scaling == "mean_std":
        if spec.mean is None or spec.std is None:
            raise ValueError(f"{spec.name}: mean_std scaling requires mean and std")
        x = (x - np.asarray(spec.mean, dtype=np.float32)) / np.asarray(spec.std, dtype=np.float32)
    else:
        raise ValueError(f"unknown pixel_scaling {spec.pixel_scaling!r}")
    return np.ascontiguousarray(x)


def global_average_pool(output: np.ndarray, channels_first: bool) -> np.ndarray:
    """Reduce a spatial (N, C, H, W) or (N, H, W, C) map to (N, C)."""
    if output.ndim != 4:
        raise ValueError("global_average_pool expects a rank-4 tensor")
    axes = (2, 3) if channels_first else (1, 2)
    return output.mean(axis=axes)


def _dims_channels_first(shape) -> bool:
    # Rank-4 shape with a literal 3 in position 1 means NCHW; otherwise NHWC.
    return len(shape) == 4 and shape[1] == 3


def pool_session_output(output: np.ndarray, channels_first: bool) -> np.ndarray:
    """Collapse a session output to (N, D) vectors per the pooling rule:
    spatial rank-4 outputs are globally average-pooled, rank-2 pass through."""
    if output.ndim == 4:
        return global_average_pool(output, channels_first)
    if output.ndim == 2:
        return output
    raise ValueError(f"unsupported encoder output rank {output.ndim}")


def run_session(session, batch: np.ndarray) -> np.ndarray:
    """Run an inference session on a preprocessed NHWC float32 batch and
    return pooled (N, D) features. The session's declared input shape decides
    whether the batch is fed NCHW or NHWC."""
    if batch.ndim != 4 or batch.shape[3] != 3:
        raise ValueError(f"expected (n, size, size, 3) batch, got {batch.shape}")
    meta = session.get_inputs()[0]
    channels_first = _dims_channels_first(meta.shape)
    arr = np.ascontiguousarray(batch.transpose(0, 3, 1, 2)) if channels_first else batch
    raw = session.run(None, {meta.name: arr.astype(np.float32)})[0]
    pooled = pool_session_output(np.asarray(raw), channels_first)
    if not np.all(np.isfinite(pooled)):
        raise ValueError("encoder produced non-finite outputs")
    return pooled.astype(np.float32)


def load_session(spec: BackboneSpec):
    """Create an onnxruntime session for the spec's model file."""
    if spec.model_path is None:
        raise ValueError(f"{spec.name}: no model_path configured")
    if not Path(spec.model_path).exists():
        raise FileNotFoundError(f"{spec.name}: model file not found: {spec.model_path}")
    try:
        import onnxruntime as ort
    except ImportError as exc:
        raise RuntimeError(
            "onnxruntime is required for ONNX feature extraction; "
            "install the 'onnx' extra"
        ) from exc
    try:
        return ort.InferenceSession(str(spec.model_path), providers=["CPUExecutionProvider"])
    except Exception as exc:
        raise RuntimeError(f"{spec.name}: failed to load model: {exc}") from exc


def extract(spec: BackboneSpec, batch: np.ndarray, ids: list[str]) -> list[FeatureVector]:
    """Run the pretrained encoder over a preprocessed batch."""
    if len(ids) != batch.shape[0]:
        raise ValueError("ids/batch length mismatch")
    if batch.shape[1] != spec.input_size or batch.shape[2] != spec.input_size:
        raise ValueError(
            f"batch spatial size {batch.shape[1:3]} does not match input_size {spec.input_size}"
        )
    pooled = run_session(load_session(spec), batch)
    return [FeatureVector(spec.name, image_id, row) for image_id, row in zip(ids, pooled)]


STUB_GRID = 16


def _stable_seed(text: str) -> int:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@lru_cache(maxsize=8)
def _stub_projection(name: str, dim: int) -> np.ndarray:
    rng = np.random.default_rng(_stable_seed(f"stub:{name}"))
    return rng.standard_normal((STUB_GRID * STUB_GRID, dim))


def stub_extract(img: np.ndarray, name: str, dim: int, image_id: str = "") -> FeatureVector:
    """Model-free extractor: project the 16x16-downsampled gray image through
    a fixed pseudo-random matrix seeded from ``name``. Deterministic across
    processes (the seed comes from a cryptographic hash, not ``hash()``)."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    gray = img.astype(np.float32).mean(axis=2)
    small = np.asarray(
        Image.fromarray(gray, mode="F").resize((STUB_GRID, STUB_GRID), Image.BILINEAR)
    )
    g = small.reshape(-1).astype(np.float64) / 255.0
    values = (g @ _stub_projection(name, dim)) / np.sqrt(STUB_GRID * STUB_GRID)
    return FeatureVector(name, image_id, values.astype(np.float32))


class StubBackbone:
    """Duck-typed extractor used wherever a real encoder would be."""

    param_count = 0.01  # nominal millions, keeps report arithmetic well-defined

    def __init__(self, dim: int, name: str = "stub"):
        self.name = name
        self.dim = dim

    def extract_many(self, images: list[np.ndarray], ids: list[str]) -> np.ndarray:
        rows = [stub_extract(img, self.name, self.dim, image_id).values
                for img, image_id in zip(images, ids)]
        return np.stack(rows, axis=0)


class OnnxBackbone:
    """Extractor backed by a registry spec and its ONNX model file."""

    def __init__(self, spec: BackboneSpec):
        if spec.model_path is None:
            raise ValueError(f"{spec.name}: spec has no model_path")
        self.spec = spec
        self.name = spec.name
        self.param_count = spec.param_count
        self._session = None

    def _ensure_session(self):
        if self._session is None:
            self._session = load_session(self.spec)
        return self._session

    def extract_many(self, images: list[np.ndarray], ids: list[str],
                     batch_size: int = 16) -> np.ndarray:
        session = self._ensure_session()
        chunks = []
        for start in range(0, len(images), batch_size):
            batch = np.stack(
                [preprocess(img, self.spec) for img in images[start:start + batch_size]]
            )
            chunks.append(run_session(session, batch))
        return np.concatenate(chunks, axis=0)


class FeatureCache:
    """Ordered image_id -> float32 vector store with a fixed dimension."""

    def __init__(self, backbone_name: str, dim: int):
        if dim < 1:
            raise ValueError("cache dimension must be >= 1")
        self.backbone_name = backbone_name
        self.dim = dim
        self.vectors: dict[str, np.ndarray] = {}

    def add(self, image_id: str, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float32)
        if values.shape != (self.dim,):
            raise ValueError(
                f"dimension mismatch: cache holds {self.dim}, got {values.shape}"
            )
        if image_id in self.vectors:
            raise ValueError(f"duplicate image_id {image_id!r} in cache")
        self.vectors[image_id] = values

    def get(self, image_id: str) -> np.ndarray | None:
        return self.vectors.get(image_id)

    def __len__(self) -> int:
        return len(self.vectors)


def cache_write(cache: FeatureCache, path: Path | str) -> None:
    """Serialize a cache to its binary format, atomically.

    Layout: magic "DELCFEAT", u32 version, u32 dimension, then per entry a
    u16 id byte-length, the UTF-8 id, and dimension little-endian f32 values.
    All integers little-endian.
    """
    path = Path(path)
    blob = bytearray()
    blob += CACHE_MAGIC
    blob += struct.pack("<II", CACHE_VERSION, cache.dim)
    for image_id, values in cache.vectors.items():
        encoded = image_id.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"image id too long: {image_id!r}")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += values.astype("<f4").tobytes()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(bytes(blob))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cache_read(path: Path | str, backbone_name: str | None = None) -> FeatureCache:
    """Read a cache file back; exact inverse of cache_write."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < len(CACHE_MAGIC) + 8 or data[: len(CACHE_MAGIC)] != CACHE_MAGIC:
        raise CacheFormatError(f"{path}: bad magic or truncated header")
    version, dim = struct.unpack_from("<II", data, len(CACHE_MAGIC))
    if version != CACHE_VERSION:
        raise CacheFormatError(f"{path}: unsupported version {version}")
    if dim < 1:
        raise CacheFormatError(f"{path}: invalid dimension {dim}")
    cache = FeatureCache(backbone_name or path.stem, dim)
    offset = len(CACHE_MAGIC) + 8
    vec_bytes = 4 * dim
    while offset < len(data):
        if offset + 2 > len(data):
            raise CacheFormatError(f"{path}: truncated entry header")
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if offset + id_len + vec_bytes > len(data):
            raise CacheFormatError(f"{path}: truncated entry body")
        image_id = data[offset:offset + id_len].decode("utf-8")
        offset += id_len
        values = np.frombuffer(data, dtype="<f4", count=dim, offset=offset).copy()
        offset += vec_bytes
        cache.add(image_id, values)
    return cache


def update_cache(manifest, backbone, cache_path: Path | str,
                 load_image_fn=None) -> int:
    """Extract features for manifest images absent from the cache file.

    Returns the number of newly computed entries; rerunning on a complete
    cache performs zero extractions. New entries follow manifest order.
    """
    from .augment import load_image

    load_image_fn = load_image_fn or load_image
    cache_path = Path(cache_path)
    cache: FeatureCache | None = None
    if cache_path.exists():
        cache = cache_read(cache_path, backbone.name)

    pending = [
        r for r in manifest.records
        if cache is None or cache.get(r.id) is None
    ]
    if not pending:
        return 0

    images = [load_image_fn(manifest.resolve_path(r)) for r in pending]
    rows = backbone.extract_many(images, [r.id for r in pending])
    if cache is None:
        cache = FeatureCache(backbone.name, rows.shape[1])
    elif rows.shape[1] != cache.dim:
        raise ValueError(
            f"extractor dimension {rows.shape[1]} does not match cache dimension {cache.dim}"
        )
    for rec, row in zip(pending, rows):
        cache.add(rec.id, row)
    cache_write(cache, cache_path)
    return len(pending)
