"""Benchmark orchestration: repeated stratified CV per backbone, accuracy
and confusion metrics, absolute/relative comparison reports, and optional
throughput measurement."""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .augment import AugmentConfig, augment_class_to_count, load_image
from .classifier import TrainConfig, accuracy, predict, train
from .dataset import LABELS, DatasetManifest, FoldPlan, make_fold_plans

POSITIVE = "positive"


class LeakageError(AssertionError):
    """A test-fold image leaked into training data or augmentation sources."""


class FoldEvaluationError(RuntimeError):
    """Training or extraction failed inside one fold; carries its identity."""

    def __init__(self, repetition: int, fold: int, message: str):
        super().__init__(f"repetition {repetition}, fold {fold}: {message}")
        self.repetition = repetition
        self.fold = fold


@dataclass
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else float("nan")

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


@dataclass
class FoldResult:
    repetition: int
    fold: int
    val_accuracy: float
    test_accuracy: float


@dataclass
class FoldAudit:
    """Which ids fed one fold, for external leakage verification."""

    repetition: int
    fold: int
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]
    augment_source_ids: list[str]
    augmented_count: int


@dataclass
class BackboneReport:
    backbone_name: str
    val_accuracy: float
    test_accuracy: float
    per_fold: list[FoldResult]
    confusion: ConfusionMatrix
    param_count: float

    @property
    def per_fold_val(self) -> list[float]:
        return [f.val_accuracy for f in self.per_fold]

    @property
    def per_fold_test(self) -> list[float]:
        return [f.test_accuracy for f in self.per_fold]

    def to_dict(self) -> dict:
        return {
            "backbone_name": self.backbone_name,
            "val_accuracy": self.val_accuracy,
            "test_accuracy": self.test_accuracy,
            "per_fold": [
                {"repetition": f.repetition, "fold": f.fold,
                 "val_accuracy": f.val_accuracy, "test_accuracy": f.test_accuracy}
                for f in self.per_fold
            ],
            "confusion": self.confusion.to_dict(),
            "param_count": self.param_count,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "BackboneReport":
        return cls(
            backbone_name=row["backbone_name"],
            val_accuracy=float(row["val_accuracy"]),
            test_accuracy=float(row["test_accuracy"]),
            per_fold=[
                FoldResult(int(f["repetition"]), int(f["fold"]),
                           float(f["val_accuracy"]), float(f["test_accuracy"]))
                for f in row["per_fold"]
            ],
            confusion=ConfusionMatrix(**{k: int(v) for k, v in row["confusion"].items()}),
            param_count=float(row["param_count"]),
        )


@dataclass
class ComparisonEntry:
    backbone_name: str
    val_accuracy: float
    test_accuracy: float
    param_count: float
    relative_performance: float
    relative_size: float


@dataclass
class ComparisonReport:
    entries: list[ComparisonEntry]
    best_performance: str  # first argmax in input order on ties
    largest_model: str

    def entry(self, name: str) -> ComparisonEntry:
        for e in self.entries:
            if e.backbone_name == name:
                return e
        raise KeyError(name)


def confusion(predictions: np.ndarray, labels: np.ndarray) -> ConfusionMatrix:
    """Count the four outcomes; class 1 is positive."""
    predictions = np.asarray(predictions).ravel()
    labels = np.asarray(labels).ravel()
    if predictions.shape != labels.shape:
        raise ValueError("predictions/labels length mismatch")
    return ConfusionMatrix(
        tp=int(np.sum((predictions == 1) & (labels == 1))),
        fp=int(np.sum((predictions == 1) & (labels == 0))),
        fn=int(np.sum((predictions == 0) & (labels == 1))),
        tn=int(np.sum((predictions == 0) & (labels == 0))),
    )


def relative_report(reports: list[BackboneReport]) -> ComparisonReport:
    """Normalize test accuracy and parameter count by their maxima."""
    if not reports:
        raise ValueError("relative_report: no reports")
    max_acc = max(r.test_accuracy for r in reports)
    max_params = max(r.param_count for r in reports)
    if max_acc <= 0 or max_params <= 0:
        raise ValueError("relative_report: non-positive maxima")
    entries = [
        ComparisonEntry(
            backbone_name=r.backbone_name,
            val_accuracy=r.val_accuracy,
            test_accuracy=r.test_accuracy,
            param_count=r.param_count,
            relative_performance=r.test_accuracy / max_acc,
            relative_size=r.param_count / max_params,
        )
        for r in reports
    ]
    best = next(r.backbone_name for r in reports if r.test_accuracy == max_acc)
    largest = next(r.backbone_name for r in reports if r.param_count == max_params)
    return ComparisonReport(entries=entries, best_performance=best, largest_model=largest)


def overfit_gap(report: BackboneReport) -> float:
    """Validation minus test accuracy, in percentage points (signed)."""
    return (report.val_accuracy - report.test_accuracy) * 100.0


def _stratified_val_split(train_ids: list[str], label_of: dict[str, str],
                          val_fraction: float, rng: np.random.Generator,
                          ) -> tuple[list[str], list[str]]:
    """Carve a stratified validation subset out of a fold's training ids."""
    val_ids: set[str] = set()
    for label in LABELS:
        ids = [i for i in train_ids if label_of[i] == label]
        if not ids:
            continue
        n_val = max(1, int(round(val_fraction * len(ids))))
        n_val = min(n_val, len(ids) - 1) if len(ids) > 1 else 0
        picked = rng.permutation(len(ids))[:n_val]
        val_ids.update(ids[int(x)] for x in picked)
    val = [i for i in train_ids if i in val_ids]
    fit = [i for i in train_ids if i not in val_ids]
    return val, fit


def _original_features(backbone, cache, manifest: DatasetManifest, ids: list[str],
                       records_by_id: dict) -> np.ndarray:
    """Features for original manifest images, served from the cache when
    possible and extracted live otherwise."""
    rows: dict[str, np.ndarray] = {}
    pending = []
    for image_id in ids:
        hit = cache.get(image_id) if cache is not None else None
        if hit is not None:
            rows[image_id] = hit
        else:
            pending.append(image_id)
    if pending:
        images = [load_image(manifest.resolve_path(records_by_id[i])) for i in pending]
        fresh = backbone.extract_many(images, pending)
        for image_id, row in zip(pending, fresh):
            rows[image_id] = row
    return np.stack([rows[i] for i in ids]).astype(np.float64)


def _fold_seed(base: int, repetition: int, fold: int, salt: int) -> int:
    # distinct deterministic streams per (fold, purpose)
    return base + salt * (repetition * 1000 + fold + 1)


def _evaluate_fold(plan: FoldPlan, manifest: DatasetManifest, backbone,
                   augment_cfg: AugmentConfig, train_cfg: TrainConfig,
                   cache, val_fraction: float,
                   ) -> tuple[FoldResult, ConfusionMatrix, FoldAudit]:
    records_by_id = {r.id: r for r in manifest.records}
    label_of = {r.id: r.label for r in manifest.records}
    rep, fold = plan.repetition, plan.fold

    rng = np.random.default_rng([train_cfg.seed, 101, rep, fold])
    val_ids, fit_ids = _stratified_val_split(plan.train_ids, label_of, val_fraction, rng)

    fit_rows, fit_labels = [], []
    provenance_sources: set[str] = set()
    augmented_count = 0
    for label in LABELS:
        recs = [records_by_id[i] for i in fit_ids if label_of[i] == label]
        fold_cfg = replace(augment_cfg, seed=_fold_seed(augment_cfg.seed, rep, fold, 7919))
        images, provenance = augment_class_to_count(recs, fold_cfg, root=manifest.root)
        provenance_sources.update(p.source_id for p in provenance)
        augmented_count += len(images)
        feats = backbone.extract_many([im.pixels for im in images], [im.id for im in images])
        fit_rows.append(np.asarray(feats, dtype=np.float64))
        fit_labels.append(np.full(len(images), 1.0 if label == POSITIVE else 0.0))

    leaked = set(plan.test_ids) & (set(plan.train_ids) | provenance_sources)
    if leaked:
        raise LeakageError(
            f"repetition {rep}, fold {fold}: test ids leaked into training: {sorted(leaked)[:5]}"
        )

    fit_x = np.concatenate(fit_rows, axis=0)
    fit_y = np.concatenate(fit_labels)
    if val_ids:
        val_x = _original_features(backbone, cache, manifest, val_ids, records_by_id)
        val_y = np.array([1.0 if label_of[i] == POSITIVE else 0.0 for i in val_ids])
    else:
        val_x = np.zeros((0, fit_x.shape[1]))
        val_y = np.zeros(0)
    test_x = _original_features(backbone, cache, manifest, plan.test_ids, records_by_id)
    test_y = np.array([1.0 if label_of[i] == POSITIVE else 0.0 for i in plan.test_ids])

    # per-feature standardization fitted on the training features only;
    # encoder embeddings vary wildly in scale and the head trains poorly
    # on raw values
    mean = fit_x.mean(axis=0)
    std = fit_x.std(axis=0) + 1e-8
    fit_x = (fit_x - mean) / std
    val_x = (val_x - mean) / std
    test_x = (test_x - mean) / std

    fold_train_cfg = replace(train_cfg, seed=_fold_seed(train_cfg.seed, rep, fold, 104729))
    params, _history = train(fit_x, fit_y, val_x, val_y, fold_train_cfg)

    val_acc = accuracy(predict(params, val_x), val_y) if val_ids else float("nan")
    conf = confusion(predict(params, test_x), test_y)
    result = FoldResult(repetition=rep, fold=fold,
                        val_accuracy=val_acc, test_accuracy=conf.accuracy)
    audit = FoldAudit(
        repetition=rep, fold=fold,
        train_ids=list(plan.train_ids), val_ids=list(val_ids),
        test_ids=list(plan.test_ids),
        augment_source_ids=sorted(provenance_sources),
        augmented_count=augmented_count,
    )
    return result, conf, audit


def run_cv(manifest: DatasetManifest, backbone, augment_cfg: AugmentConfig,
           train_cfg: TrainConfig, k: int = 9, repetitions: int = 5, *,
           feature_cache=None, val_fraction: float = 0.1,
           jobs: int = 1, audit_log: list[FoldAudit] | None = None) -> BackboneReport:
    """Run the full repeated-CV benchmark for one backbone.

    Per fold: split per the plan, carve a stratified validation subset from
    the training portion, augment only the remaining training originals (so
    no variant of a test image ever reaches training), train the head, and
    record validation/test accuracy. Folds are independent, so ``jobs`` may
    parallelize them without changing any result. Passing ``audit_log``
    collects per-fold id/provenance records for leakage verification.
    """
    plans = make_fold_plans(manifest, k, repetitions, seed=train_cfg.seed)

    def evaluate(plan: FoldPlan):
        try:
            return _evaluate_fold(plan, manifest, backbone, augment_cfg,
                                  train_cfg, feature_cache, val_fraction)
        except LeakageError:
            raise
        except Exception as exc:
            raise FoldEvaluationError(plan.repetition, plan.fold, str(exc)) from exc

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(evaluate, plans))
    else:
        outcomes = [evaluate(plan) for plan in plans]

    results = [r for r, _, _ in outcomes]
    total_conf = ConfusionMatrix()
    for _, conf, audit in outcomes:
        total_conf = total_conf + conf
        if audit_log is not None:
            audit_log.append(audit)
    return BackboneReport(
        backbone_name=backbone.name,
        val_accuracy=float(np.mean([r.val_accuracy for r in results])),
        test_accuracy=float(np.mean([r.test_accuracy for r in results])),
        per_fold=results,
        confusion=total_conf,
        param_count=float(getattr(backbone, "param_count", 0.0)),
    )


def throughput(backbone, images: list[np.ndarray], iterations: int = 5) -> float:
    """Median images/second over ``iterations`` timed passes after one
    warm-up pass. Hardware-dependent; never asserted in the test suite."""
    if not images:
        raise ValueError("throughput: no images")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    ids = [f"bench_{i}" for i in range(len(images))]
    backbone.extract_many(images, ids)  # warm-up
    rates = []
    for _ in range(iterations):
        start = time.perf_counter()
        backbone.extract_many(images, ids)
        elapsed = time.perf_counter() - start
        rates.append(len(images) / elapsed if elapsed > 0 else float("inf"))
    return float(np.median(rates))


def backbone_report_json(report: BackboneReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def comparison_to_dict(comparison: ComparisonReport) -> dict:
    return {
        "best_performance": comparison.best_performance,
        "largest_model": comparison.largest_model,
        "entries": [
            {"backbone_name": e.backbone_name, "val_accuracy": e.val_accuracy,
             "test_accuracy": e.test_accuracy, "param_count": e.param_count,
             "relative_performance": e.relative_performance,
             "relative_size": e.relative_size}
            for e in comparison.entries
        ],
    }


def comparison_csv(comparison: ComparisonReport) -> str:
    """One row per backbone: name, val_acc, test_acc, params_millions,
    rel_perf, rel_size."""
    lines = ["name,val_acc,test_acc,params_millions,rel_perf,rel_size"]
    for e in comparison.entries:
        lines.append(
            f"{e.backbone_name},{e.val_accuracy!r},{e.test_accuracy!r},"
            f"{e.param_count!r},{e.relative_performance!r},{e.relative_size!r}"
        )
    return "\n".join(lines) + "\n"


def confusion_csv(conf: ConfusionMatrix) -> str:
    """2x2 CSV, actual on rows, predicted on columns."""
    return (
        "actual\\predicted,positive,negative\n"
        f"positive,{conf.tp},{conf.fn}\n"
        f"negative,{conf.fp},{conf.tn}\n"
    )
