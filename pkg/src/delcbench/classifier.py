"""The trainable head: two 1024-unit dense layers with ReLU, a sigmoid
output, binary cross-entropy, analytic backprop, and Adam with inverse-time
learning-rate decay."""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HIDDEN_UNITS = 1024

HEAD_MAGIC = b"DELCHEAD"
HEAD_VERSION = 1


@dataclass
class MLPParams:
    """Weights of the head. Shapes: W1 (D, 1024), b1 (1024,), W2 (1024, 1024),
    b2 (1024,), w3 (1024, 1), b3 (1,)."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    def fields(self) -> list[tuple[str, np.ndarray]]:
        return [("W1", self.W1), ("b1", self.b1), ("W2", self.W2),
                ("b2", self.b2), ("w3", self.w3), ("b3", self.b3)]

    @property
    def feature_dim(self) -> int:
        return self.W1.shape[0]

    def copy(self) -> "MLPParams":
        return MLPParams(*(arr.copy() for _, arr in self.fields()))


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    decay: float = 0.4  # inverse-time, per epoch
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    prob_clip: float = 1e-7

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1/beta2 must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class AdamState:
    """First/second moment accumulators (same shapes as the params) and the
    step counter, which advances by exactly one per adam_step."""

    m: MLPParams
    v: MLPParams
    t: int = 0


@dataclass
class Batch:
    features: np.ndarray  # (N, D)
    labels: np.ndarray    # (N,), values in {0, 1}

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64).ravel()
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("features must be a non-empty (N, D) matrix")
        if self.labels.shape[0] != self.features.shape[0]:
            raise ValueError("features/labels length mismatch")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite feature rows")
        if not np.all((self.labels == 0.0) | (self.labels == 1.0)):
            raise ValueError("labels must be 0 or 1")


@dataclass
class HistoryEntry:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float


def init_params(feature_dim: int, seed: int) -> MLPParams:
    """He-initialized weights (std sqrt(2/fan_in)), zero biases."""
    if feature_dim < 1:
        raise ValueError("feature_dim must be >= 1")
    rng = np.random.default_rng(seed)
    return MLPParams(
        W1=rng.standard_normal((feature_dim, HIDDEN_UNITS)) * np.sqrt(2.0 / feature_dim),
        b1=np.zeros(HIDDEN_UNITS),
        W2=rng.standard_normal((HIDDEN_UNITS, HIDDEN_UNITS)) * np.sqrt(2.0 / HIDDEN_UNITS),
        b2=np.zeros(HIDDEN_UNITS),
        w3=rng.standard_normal((HIDDEN_UNITS, 1)) * np.sqrt(2.0 / HIDDEN_UNITS),
        b3=np.zeros(1),
    )


def init_adam_state(params: MLPParams) -> AdamState:
    def zeros() -> MLPParams:
        return MLPParams(*(np.zeros_like(arr) for _, arr in params.fields()))

    return AdamState(m=zeros(), v=zeros(), t=0)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_full(params: MLPParams, features: np.ndarray):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.feature_dim:
        raise ValueError(
            f"feature matrix shape {x.shape} incompatible with D={params.feature_dim}"
        )
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input features")
    z1 = x @ params.W1 + params.b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ params.W2 + params.b2
    a2 = np.maximum(z2, 0.0)
    z3 = (a2 @ params.w3).ravel() + params.b3[0]
    return x, z1, a1, z2, a2, z3, _sigmoid(z3)


def forward(params: MLPParams, features: np.ndarray, prob_clip: float = 1e-7) -> np.ndarray:
    """Probabilities sigmoid(relu(relu(X W1 + b1) W2 + b2) w3 + b3), clipped
    into [prob_clip, 1 - prob_clip] so downstream logs stay finite."""
    p = _forward_full(params, features)[-1]
    return np.clip(p, prob_clip, 1.0 - prob_clip)


def bce_loss(p: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross-entropy, natural log."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: p {p.shape}, y {y.shape}")
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def backward(params: MLPParams, batch: Batch) -> MLPParams:
    """Analytic gradient of bce_loss(forward(.)) for every parameter.

    The sigmoid+BCE composite is differentiated in its stable (p - y)/N form;
    probability clipping is a loss-evaluation guard only and does not enter
    the gradient.
    """
    x, z1, a1, z2, a2, z3, p = _forward_full(params, batch.features)
    n = x.shape[0]
    y = batch.labels

    d3 = ((p - y) / n)[:, None]            # (N, 1)
    gw3 = a2.T @ d3
    gb3 = np.array([d3.sum()])
    d2 = (d3 @ params.w3.T) * (z2 > 0.0)   # (N, 1024)
    gW2 = a1.T @ d2
    gb2 = d2.sum(axis=0)
    d1 = (d2 @ params.W2.T) * (z1 > 0.0)
    gW1 = x.T @ d1
    gb1 = d1.sum(axis=0)

    grads = MLPParams(W1=gW1, b1=gb1, W2=gW2, b2=gb2, w3=gw3, b3=gb3)
    for name, arr in grads.fields():
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite gradient in {name}")
    return grads


def effective_learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Inverse-time schedule: learning_rate / (1 + decay * epoch)."""
    return cfg.learning_rate / (1.0 + cfg.decay * epoch)


def _adam_update_inplace(params: MLPParams, grads: MLPParams, state: AdamState,
                         cfg: TrainConfig, epoch: int) -> None:
    """Hot-path Adam update mutating params and state; consumes grads.

    Avoids the per-step allocation of fresh moment/parameter arrays, which
    dominates runtime at the 1024x1024 layer sizes.
    """
    if state.t < 0:
        raise ValueError("adam state step counter must be >= 0")
    state.t += 1
    lr = effective_learning_rate(cfg, epoch)
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t

    for (_, theta), (_, g), (_, m), (_, v) in zip(
        params.fields(), grads.fields(), state.m.fields(), state.v.fields()
    ):
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        np.square(g, out=g)
        v *= cfg.beta2
        g *= 1.0 - cfg.beta2
        v += g
        # step = (lr/bc1) * m / (sqrt(v/bc2) + eps)
        denom = np.sqrt(v / bc2)
        denom += cfg.epsilon
        np.divide(m, denom, out=denom)
        denom *= lr / bc1
        theta -= denom


def adam_step(params: MLPParams, grads: MLPParams, state: AdamState,
              cfg: TrainConfig, epoch: int) -> tuple[MLPParams, AdamState]:
    """One bias-corrected Adam update at the epoch's effective rate.

    Functional: inputs are left untouched and fresh (params, state) returned.
    """
    new_params = params.copy()
    new_state = AdamState(m=state.m.copy(), v=state.v.copy(), t=state.t)
    _adam_update_inplace(new_params, grads.copy(), new_state, cfg, epoch)
    return new_params, new_state


def predict(params: MLPParams, features: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Hard labels; ties at the threshold go to class 1 (p >= threshold)."""
    return (forward(params, features) >= threshold).astype(np.int64)


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    predictions = np.asarray(predictions).ravel()
    labels = np.asarray(labels).ravel()
    if predictions.shape != labels.shape:
        raise ValueError("predictions/labels length mismatch")
    return float(np.mean(predictions == labels))


def train(train_features: np.ndarray, train_labels: np.ndarray,
          val_features: np.ndarray, val_labels: np.ndarray,
          cfg: TrainConfig) -> tuple[MLPParams, list[HistoryEntry]]:
    """Minibatch Adam training with per-epoch seeded shuffling.

    Returns the parameters of the epoch with the best validation accuracy
    (first such epoch on ties; final epoch when the validation set is empty)
    plus the per-epoch history. Deterministic given the data and cfg.seed.
    """
    cfg.validate()
    train_features = np.asarray(train_features, dtype=np.float64)
    train_labels = np.asarray(train_labels, dtype=np.float64).ravel()
    val_features = np.asarray(val_features, dtype=np.float64)
    val_labels = np.asarray(val_labels, dtype=np.float64).ravel()
    if train_features.shape[0] == 0:
        raise ValueError("empty training set")
    classes = np.unique(train_labels)
    if len(classes) < 2:
        raise ValueError("training set contains a single class")

    n = train_features.shape[0]
    params = init_params(train_features.shape[1], cfg.seed)
    state = init_adam_state(params)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])

    has_val = val_features.shape[0] > 0
    best_params = params
    best_val = -np.inf
    history: list[HistoryEntry] = []

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = Batch(train_features[idx], train_labels[idx])
            p = forward(params, batch.features, cfg.prob_clip)
            batch_losses.append(bce_loss(p, batch.labels))
            grads = backward(params, batch)
            _adam_update_inplace(params, grads, state, cfg, epoch)

        train_acc = accuracy(predict(params, train_features), train_labels)
        val_acc = accuracy(predict(params, val_features), val_labels) if has_val else float("nan")
        history.append(HistoryEntry(
            epoch=epoch,
            lr=effective_learning_rate(cfg, epoch),
            train_loss=float(np.mean(batch_losses)),
            train_acc=train_acc,
            val_acc=val_acc,
        ))
        if has_val and val_acc > best_val:
            best_val = val_acc
            best_params = params.copy()

    if not has_val:
        best_params = params
    return best_params, history


def save_head(params: MLPParams, path: Path | str) -> None:
    """Serialize: magic "DELCHEAD", u32 version, u32 D, then W1, b1, W2, b2,
    w3, b3 as row-major little-endian f32."""
    path = Path(path)
    blob = bytearray()
    blob += HEAD_MAGIC
    blob += struct.pack("<II", HEAD_VERSION, params.feature_dim)
    for _, arr in params.fields():
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(bytes(blob))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_head(path: Path | str) -> MLPParams:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < len(HEAD_MAGIC) + 8 or data[: len(HEAD_MAGIC)] != HEAD_MAGIC:
        raise ValueError(f"{path}: bad magic or truncated header")
    version, dim = struct.unpack_from("<II", data, len(HEAD_MAGIC))
    if version != HEAD_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    shapes = [(dim, HIDDEN_UNITS), (HIDDEN_UNITS,), (HIDDEN_UNITS, HIDDEN_UNITS),
              (HIDDEN_UNITS,), (HIDDEN_UNITS, 1), (1,)]
    offset = len(HEAD_MAGIC) + 8
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        if offset + 4 * count > len(data):
            raise ValueError(f"{path}: truncated parameter block")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        arrays.append(arr.astype(np.float64).reshape(shape))
        offset += 4 * count
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after parameters")
    return MLPParams(*arrays)


def write_history(history: list[HistoryEntry], path: Path | str) -> None:
    """Training history as CSV: epoch, lr, train_loss, train_acc, val_acc."""
    lines = ["epoch,lr,train_loss,train_acc,val_acc"]
    for h in history:
        lines.append(f"{h.epoch},{h.lr!r},{h.train_loss!r},{h.train_acc!r},{h.val_acc!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
