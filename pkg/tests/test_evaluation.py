import numpy as np
import pytest

from delcbench.augment import AugmentConfig
from delcbench.backbone import StubBackbone, cache_read, update_cache
from delcbench.classifier import TrainConfig
from delcbench.dataset import FoldPlan, synth_generate
from delcbench.evaluation import (BackboneReport, ComparisonReport,
                                  ConfusionMatrix, FoldEvaluationError,
                                  LeakageError, _evaluate_fold, comparison_csv,
                                  confusion, confusion_csv, overfit_gap,
                                  relative_report, run_cv, throughput)

from helpers import REFERENCE_RESULTS


def reference_reports() -> list[BackboneReport]:
    return [
        BackboneReport(
            backbone_name=name,
            val_accuracy=val / 100.0,
            test_accuracy=test / 100.0,
            per_fold=[],
            confusion=ConfusionMatrix(),
            param_count=params,
        )
        for name, (val, test, params) in REFERENCE_RESULTS.items()
    ]


class TestConfusion:
    def test_all_correct(self):
        conf = confusion(np.array([1, 0, 1]), np.array([1, 0, 1]))
        assert (conf.tp, conf.tn, conf.fp, conf.fn) == (2, 1, 0, 0)
        assert conf.accuracy == 1.0

    def test_all_inverted(self):
        labels = np.array([1, 0, 1, 0])
        conf = confusion(1 - labels, labels)
        assert conf.accuracy == 0.0

    def test_four_cases_enumerated(self):
        conf = confusion(np.array([1, 1, 0, 0]), np.array([1, 0, 1, 0]))
        assert (conf.tp, conf.fp, conf.fn, conf.tn) == (1, 1, 1, 1)
        assert conf.total == 4

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            confusion(np.array([1, 0]), np.array([1]))

    def test_aggregation(self):
        total = ConfusionMatrix(1, 2, 3, 4) + ConfusionMatrix(10, 20, 30, 40)
        assert (total.tp, total.fp, total.fn, total.tn) == (11, 22, 33, 44)


class TestRelativeReport:
    def test_reference_ratios(self):
        comparison = relative_report(reference_reports())
        assert comparison.best_performance == "InceptionV3"
        assert comparison.largest_model == "VGG19"
        assert comparison.entry("InceptionV3").relative_performance == 1.0
        assert comparison.entry("VGG19").relative_size == 1.0
        mobilenet = comparison.entry("MobileNet")
        assert mobilenet.relative_performance == pytest.approx(96.7 / 97.7, abs=1e-12)
        assert mobilenet.relative_size == pytest.approx(4.3 / 143.7, abs=1e-12)

    def test_exactly_one_maximum_each(self):
        comparison = relative_report(reference_reports())
        assert sum(1 for e in comparison.entries if e.relative_performance == 1.0) == 1
        assert sum(1 for e in comparison.entries if e.relative_size == 1.0) == 1

    def test_values_in_unit_interval(self):
        comparison = relative_report(reference_reports())
        for e in comparison.entries:
            assert 0.0 < e.relative_performance <= 1.0
            assert 0.0 < e.relative_size <= 1.0

    def test_scale_invariance_of_relative_size(self):
        reports = reference_reports()
        baseline = relative_report(reports)
        scaled = [BackboneReport(r.backbone_name, r.val_accuracy, r.test_accuracy,
                                 [], ConfusionMatrix(), r.param_count * 1000.0)
                  for r in reports]
        rescaled = relative_report(scaled)
        for a, b in zip(baseline.entries, rescaled.entries):
            assert a.relative_size == pytest.approx(b.relative_size, rel=1e-12)

    def test_empty_input(self):
        with pytest.raises(ValueError):
            relative_report([])

    def test_tie_designates_first_in_input_order(self):
        reports = reference_reports()[:2]
        reports[0].test_accuracy = reports[1].test_accuracy = 0.9
        comparison = relative_report(reports)
        assert comparison.best_performance == reports[0].backbone_name


class TestOverfitGap:
    def test_inceptionv3_gap(self):
        report = next(r for r in reference_reports() if r.backbone_name == "InceptionV3")
        assert overfit_gap(report) == pytest.approx(1.2, abs=1e-9)

    def test_val_equals_test(self):
        report = BackboneReport("x", 0.9, 0.9, [], ConfusionMatrix(), 1.0)
        assert overfit_gap(report) == 0.0

    def test_reference_band_excluding_densenet169(self):
        for report in reference_reports():
            if report.backbone_name == "DenseNet169":
                continue
            gap = overfit_gap(report)
            assert 0.6 <= gap <= 3.0, report.backbone_name


@pytest.fixture(scope="module")
def small_benchmark(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    manifest = synth_generate(12, seed=31, out_dir=root)
    backbone = StubBackbone(dim=16)
    cache_path = root / "stub.feat"
    update_cache(manifest, backbone, cache_path)
    cache = cache_read(cache_path)
    augment_cfg = AugmentConfig(target_per_class=12, seed=3)
    train_cfg = TrainConfig(epochs=4, batch_size=16, seed=5)
    return manifest, backbone, cache, augment_cfg, train_cfg


class TestRunCV:
    def test_report_structure(self, small_benchmark):
        manifest, backbone, cache, augment_cfg, train_cfg = small_benchmark
        audit = []
        report = run_cv(manifest, backbone, augment_cfg, train_cfg,
                        k=3, repetitions=2, feature_cache=cache, audit_log=audit)
        assert report.backbone_name == "stub"
        assert len(report.per_fold) == 6
        assert len(audit) == 6
        # aggregated confusion covers every test sample of every repetition
        assert report.confusion.total == 2 * len(manifest.records)
        assert 0.0 <= report.test_accuracy <= 1.0

    def test_mean_equals_arithmetic_mean(self, small_benchmark):
        manifest, backbone, cache, augment_cfg, train_cfg = small_benchmark
        report = run_cv(manifest, backbone, augment_cfg, train_cfg,
                        k=3, repetitions=2, feature_cache=cache)
        assert abs(report.test_accuracy - sum(report.per_fold_test) / 6) <= 1e-12
        assert abs(report.val_accuracy - sum(report.per_fold_val) / 6) <= 1e-12

    def test_no_leakage_in_audit(self, small_benchmark):
        manifest, backbone, cache, augment_cfg, train_cfg = small_benchmark
        audit = []
        run_cv(manifest, backbone, augment_cfg, train_cfg,
               k=3, repetitions=2, feature_cache=cache, audit_log=audit)
        for fold in audit:
            test = set(fold.test_ids)
            assert not (test & set(fold.train_ids))
            assert not (test & set(fold.augment_source_ids))
            assert set(fold.augment_source_ids) <= set(fold.train_ids)
            assert set(fold.val_ids) <= set(fold.train_ids)
            assert not (set(fold.val_ids) & set(fold.augment_source_ids))

    def test_deterministic_and_jobs_invariant(self, small_benchmark):
        manifest, backbone, cache, augment_cfg, train_cfg = small_benchmark
        one = run_cv(manifest, backbone, augment_cfg, train_cfg,
                     k=3, repetitions=1, feature_cache=cache)
        two = run_cv(manifest, backbone, augment_cfg, train_cfg,
                     k=3, repetitions=1, feature_cache=cache)
        parallel = run_cv(manifest, backbone, augment_cfg, train_cfg,
                          k=3, repetitions=1, feature_cache=cache, jobs=3)
        assert one.to_dict() == two.to_dict() == parallel.to_dict()

    def test_separable_synthetic_high_accuracy(self, small_benchmark):
        manifest, backbone, cache, augment_cfg, _ = small_benchmark
        train_cfg = TrainConfig(epochs=6, batch_size=16, seed=5)
        report = run_cv(manifest, backbone, augment_cfg, train_cfg,
                        k=3, repetitions=1, feature_cache=cache)
        assert report.test_accuracy >= 0.9

    def test_doctored_plan_triggers_leakage_error(self, small_benchmark):
        manifest, backbone, cache, augment_cfg, train_cfg = small_benchmark
        ids = manifest.ids()
        bad_plan = FoldPlan(repetition=0, fold=0,
                            train_ids=ids, test_ids=ids[:4])  # overlap
        with pytest.raises(LeakageError):
            _evaluate_fold(bad_plan, manifest, backbone, augment_cfg,
                           train_cfg, cache, val_fraction=0.1)

    def test_failure_carries_fold_identity(self, small_benchmark):
        manifest, _, cache, augment_cfg, train_cfg = small_benchmark

        class _Broken(StubBackbone):
            def extract_many(self, images, ids):
                raise RuntimeError("backend exploded")

        with pytest.raises(FoldEvaluationError, match="repetition 0, fold 0"):
            run_cv(manifest, _Broken(dim=16), augment_cfg, train_cfg,
                   k=3, repetitions=1, feature_cache=cache)

    def test_confusion_accuracy_cross_check(self, small_benchmark):
        # confusion-derived accuracy equals a directly computed agreement rate
        manifest, backbone, cache, augment_cfg, train_cfg = small_benchmark
        rng = np.random.default_rng(0)
        preds = rng.integers(0, 2, size=50)
        labels = rng.integers(0, 2, size=50)
        conf = confusion(preds, labels)
        assert conf.accuracy == pytest.approx(float(np.mean(preds == labels)), abs=1e-15)


class TestThroughput:
    def test_returns_positive_finite_rate(self):
        rng = np.random.default_rng(1)
        images = [rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8) for _ in range(8)]
        rate = throughput(StubBackbone(dim=8), images, iterations=3)
        assert rate > 0 and np.isfinite(rate)

    def test_rejects_empty_input(self):
        with pytest.raises(ValueError):
            throughput(StubBackbone(dim=8), [], iterations=1)


class TestSerializationFormats:
    def test_report_dict_round_trip(self, small_benchmark):
        manifest, backbone, cache, augment_cfg, train_cfg = small_benchmark
        report = run_cv(manifest, backbone, augment_cfg, train_cfg,
                        k=3, repetitions=1, feature_cache=cache)
        back = BackboneReport.from_dict(report.to_dict())
        assert back == report

    def test_comparison_csv_layout(self):
        comparison = relative_report(reference_reports())
        lines = comparison_csv(comparison).splitlines()
        assert lines[0] == "name,val_acc,test_acc,params_millions,rel_perf,rel_size"
        assert len(lines) == 12
        first = lines[1].split(",")
        assert first[0] == "Xception"
        assert float(first[3]) == 22.9

    def test_confusion_csv_layout(self):
        text = confusion_csv(ConfusionMatrix(tp=5, fp=2, fn=1, tn=7))
        lines = text.splitlines()
        assert lines[0] == "actual\\predicted,positive,negative"
        assert lines[1] == "positive,5,1"
        assert lines[2] == "negative,2,7"

    def test_comparison_report_entry_lookup(self):
        comparison = relative_report(reference_reports())
        assert isinstance(comparison, ComparisonReport)
        with pytest.raises(KeyError):
            comparison.entry("nope")
