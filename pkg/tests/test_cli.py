import json

import pytest

from delcbench.backbone import cache_read
from delcbench.cli import (RunConfig, config_from_values, load_config, main,
                           parse_config_text)
from delcbench.dataset import load_manifest, synth_generate

from helpers import tree_bytes, write_manifest_lines


def run(argv):
    return main(argv)


class TestDatasetCommands:
    def test_synth_twice_identical_trees(self, tmp_path):
        assert run(["dataset", "synth", "--n", "10", "--seed", "7",
                    "--out", str(tmp_path / "one")]) == 0
        assert run(["dataset", "synth", "--n", "10", "--seed", "7",
                    "--out", str(tmp_path / "two")]) == 0
        assert tree_bytes(tmp_path / "one") == tree_bytes(tmp_path / "two")

    def test_stats_prints_mean(self, tmp_path, capsys):
        rows = [
            {"id": "a", "path": "a.png", "label": "positive",
             "width": 80, "height": 150, "source": "DELC_ULPGC"},
            {"id": "b", "path": "b.png", "label": "positive",
             "width": 84, "height": 168, "source": "DELC_ULPGC"},
        ]
        path = write_manifest_lines(tmp_path / "pos.jsonl", rows)
        assert run(["dataset", "stats", "--manifest", str(path)]) == 0
        out = capsys.readouterr().out
        assert "mean: 82.00 x 159.00" in out
        assert "std: 2.00 x 9.00" in out

    def test_filter_output_subset_of_input(self, tmp_path, capsys):
        positives = [
            {"id": f"p{i}", "path": f"p{i}.png", "label": "positive",
             "width": w, "height": h, "source": "DELC_ULPGC"}
            for i, (w, h) in enumerate([(62, 119), (102, 199)])
        ]
        negatives = [
            {"id": f"n{i}", "path": f"n{i}.png", "label": "negative",
             "width": w, "height": h, "source": "AWE"}
            for i, (w, h) in enumerate([(15, 29), (100, 180), (473, 1022), (82, 159)])
        ]
        pos_path = write_manifest_lines(tmp_path / "pos.jsonl", positives)
        neg_path = write_manifest_lines(tmp_path / "neg.jsonl", negatives)
        out_path = tmp_path / "filtered.jsonl"
        assert run(["dataset", "filter", "--manifest", str(neg_path),
                    "--stats-from", str(pos_path), "--k", "1",
                    "--out", str(out_path)]) == 0
        kept = load_manifest(out_path, require_both_classes=False)
        in_ids = {r["id"] for r in negatives}
        assert {r.id for r in kept.records} <= in_ids
        assert {r.id for r in kept.records} == {"n1", "n3"}

    def test_synth_invalid_count_exits_nonzero(self, tmp_path, capsys):
        assert run(["dataset", "synth", "--n", "0", "--out", str(tmp_path)]) == 1
        assert "error:" in capsys.readouterr().err


class TestExtractCommand:
    def test_extract_stub_then_idempotent(self, tmp_path, capsys):
        data = tmp_path / "data"
        synth_generate(4, seed=3, out_dir=data)
        cache_dir = tmp_path / "caches"
        argv = ["extract", "--manifest", str(data / "manifest.jsonl"),
                "--backbone", "stub", "--dim", "64",
                "--cache-dir", str(cache_dir)]
        assert run(argv) == 0
        first = capsys.readouterr().out
        assert "computed 8 new" in first
        cache = cache_read(cache_dir / "stub.feat")
        assert cache.dim == 64
        assert len(cache) == 8

        assert run(argv) == 0
        second = capsys.readouterr().out
        assert "computed 0 new" in second

    def test_missing_model_files_named(self, tmp_path, capsys):
        data = tmp_path / "data"
        synth_generate(3, seed=4, out_dir=data)
        assert run(["extract", "--manifest", str(data / "manifest.jsonl"),
                    "--backbone", "MobileNet",
                    "--cache-dir", str(tmp_path / "caches"),
                    "--model-dir", str(tmp_path / "models")]) == 1
        err = capsys.readouterr().err
        assert "MobileNet" in err

    def test_model_dir_env_override(self, tmp_path, capsys, monkeypatch):
        data = tmp_path / "data"
        synth_generate(3, seed=4, out_dir=data)
        monkeypatch.setenv("DELCBENCH_MODEL_DIR", str(tmp_path / "env_models"))
        assert run(["extract", "--manifest", str(data / "manifest.jsonl"),
                    "--backbone", "VGG16",
                    "--cache-dir", str(tmp_path / "caches")]) == 1
        assert "env_models" in capsys.readouterr().err

    def test_unknown_backbone(self, tmp_path, capsys):
        data = tmp_path / "data"
        synth_generate(3, seed=4, out_dir=data)
        assert run(["extract", "--manifest", str(data / "manifest.jsonl"),
                    "--backbone", "AlexNet",
                    "--cache-dir", str(tmp_path / "caches")]) == 1
        assert "unknown backbone" in capsys.readouterr().err


def _prepare_benchmark(tmp_path, n=8):
    data = tmp_path / "data"
    synth_generate(n, seed=5, out_dir=data)
    cache_dir = tmp_path / "caches"
    assert run(["extract", "--manifest", str(data / "manifest.jsonl"),
                "--backbone", "stub", "--dim", "16",
                "--cache-dir", str(cache_dir)]) == 0
    return data / "manifest.jsonl", cache_dir


BENCH_ARGS = ["--backbone", "stub", "--dim", "16", "--k", "2",
              "--repetitions", "1", "--seed", "9", "--epochs", "3",
              "--batch-size", "8", "--target-per-class", "10"]


class TestBenchmarkCommand:
    def test_end_to_end_outputs(self, tmp_path, capsys):
        manifest, cache_dir = _prepare_benchmark(tmp_path)
        out_dir = tmp_path / "runs"
        assert run(["benchmark", "--manifest", str(manifest),
                    "--cache-dir", str(cache_dir), "--out", str(out_dir),
                    *BENCH_ARGS]) == 0
        for name in ("report_stub.json", "confusion_stub.csv",
                     "comparison.json", "comparison.csv", "run_manifest.json"):
            assert (out_dir / name).exists(), name
        report = json.loads((out_dir / "report_stub.json").read_text())
        assert len(report["per_fold"]) == 2
        run_manifest = json.loads((out_dir / "run_manifest.json").read_text())
        assert run_manifest["seed"] == 9
        assert run_manifest["completed"] == ["stub"]
        assert run_manifest["config_sha256"]

    def test_byte_identical_reports_across_runs(self, tmp_path):
        manifest, cache_dir = _prepare_benchmark(tmp_path)
        outs = []
        for sub in ("one", "two"):
            out_dir = tmp_path / sub
            assert run(["benchmark", "--manifest", str(manifest),
                        "--cache-dir", str(cache_dir), "--out", str(out_dir),
                        *BENCH_ARGS]) == 0
            outs.append(out_dir)
        for name in ("report_stub.json", "comparison.json", "comparison.csv",
                     "confusion_stub.csv"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()

    def test_missing_cache_is_an_error(self, tmp_path, capsys):
        data = tmp_path / "data"
        synth_generate(6, seed=5, out_dir=data)
        assert run(["benchmark", "--manifest", str(data / "manifest.jsonl"),
                    "--cache-dir", str(tmp_path / "nowhere"),
                    "--out", str(tmp_path / "runs"), *BENCH_ARGS]) == 1
        err = capsys.readouterr().err
        assert "caches missing" in err and "extract" in err

    def test_run_manifest_config_round_trip(self, tmp_path):
        manifest, cache_dir = _prepare_benchmark(tmp_path)
        out_dir = tmp_path / "runs"
        assert run(["benchmark", "--manifest", str(manifest),
                    "--cache-dir", str(cache_dir), "--out", str(out_dir),
                    *BENCH_ARGS]) == 0
        row = json.loads((out_dir / "run_manifest.json").read_text())
        cfg = RunConfig.from_dict(row["config"])
        assert cfg.to_dict() == row["config"]
        assert cfg.sha256() == row["config_sha256"]

    def test_jobs_flag_does_not_change_results(self, tmp_path):
        manifest, cache_dir = _prepare_benchmark(tmp_path)
        seq, par = tmp_path / "seq", tmp_path / "par"
        for out_dir, jobs in ((seq, "1"), (par, "3")):
            assert run(["benchmark", "--manifest", str(manifest),
                        "--cache-dir", str(cache_dir), "--out", str(out_dir),
                        "--jobs", jobs, *BENCH_ARGS]) == 0
        assert ((seq / "report_stub.json").read_bytes()
                == (par / "report_stub.json").read_bytes())


class TestReportCommand:
    def test_rebuild_comparison(self, tmp_path):
        manifest, cache_dir = _prepare_benchmark(tmp_path)
        out_dir = tmp_path / "runs"
        assert run(["benchmark", "--manifest", str(manifest),
                    "--cache-dir", str(cache_dir), "--out", str(out_dir),
                    *BENCH_ARGS]) == 0
        original = (out_dir / "comparison.json").read_bytes()
        (out_dir / "comparison.json").unlink()
        assert run(["report", "--out", str(out_dir)]) == 0
        assert (out_dir / "comparison.json").read_bytes() == original

    def test_no_reports_is_an_error(self, tmp_path, capsys):
        assert run(["report", "--out", str(tmp_path)]) == 1
        assert "no report_" in capsys.readouterr().err


class TestThroughputCommand:
    def test_stub_throughput_runs(self, tmp_path, capsys):
        data = tmp_path / "data"
        synth_generate(4, seed=2, out_dir=data)
        assert run(["throughput", "--manifest", str(data / "manifest.jsonl"),
                    "--backbone", "stub", "--dim", "8",
                    "--iterations", "2", "--limit", "4"]) == 0
        assert "images/s" in capsys.readouterr().out


class TestBackboneSelection:
    def test_all_selects_the_eleven_registry_entries(self):
        from delcbench.backbone import registry
        from delcbench.cli import _select_backbones

        names = _select_backbones(["all"])
        assert len(names) == 11
        assert names == [s.name for s in registry()]

    def test_explicit_names_validated(self):
        from delcbench.cli import _select_backbones

        assert _select_backbones(["stub", "MobileNet"]) == ["stub", "MobileNet"]
        with pytest.raises(ValueError, match="unknown backbone"):
            _select_backbones(["SqueezeNet"])


class TestConfigParsing:
    def test_sections_and_dotted_keys(self):
        text = """
        # benchmark configuration
        manifest = data/manifest.jsonl
        backbones = MobileNet, InceptionV3
        k = 9
        repetitions = 5
        seed = 42
        train.epochs = 12

        [augment]
        target_per_class = 2100
        brightness_limit = 0.25
        """
        cfg = config_from_values(parse_config_text(text))
        assert cfg.manifest == "data/manifest.jsonl"
        assert cfg.backbones == ["MobileNet", "InceptionV3"]
        assert cfg.k == 9 and cfg.repetitions == 5 and cfg.seed == 42
        assert cfg.train.epochs == 12
        assert cfg.augment.target_per_class == 2100
        assert cfg.augment.brightness_limit == 0.25

    def test_round_trip_through_dict(self):
        cfg = config_from_values(parse_config_text("seed = 3\nstub_dim = 32\n"))
        assert RunConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config key"):
            config_from_values({"bogus": 1})
        with pytest.raises(ValueError, match="unknown config key"):
            config_from_values({"train.bogus": 1})

    def test_malformed_line_rejected(self):
        with pytest.raises(ValueError, match="expected 'key = value'"):
            parse_config_text("just some words\n")

    def test_flags_override_config_file(self, tmp_path, capsys):
        data = tmp_path / "data"
        synth_generate(8, seed=5, out_dir=data)
        cache_dir = tmp_path / "caches"
        assert run(["extract", "--manifest", str(data / "manifest.jsonl"),
                    "--backbone", "stub", "--dim", "16",
                    "--cache-dir", str(cache_dir)]) == 0
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text(
            f"manifest = {data / 'manifest.jsonl'}\n"
            f"backbones = stub\n"
            f"stub_dim = 16\n"
            f"cache_dir = {cache_dir}\n"
            f"k = 4\nrepetitions = 2\nseed = 1\n"
            f"out_dir = {tmp_path / 'runs'}\n"
            "train.epochs = 2\ntrain.batch_size = 8\n"
            "augment.target_per_class = 10\n"
        )
        # --k 2 and --repetitions 1 must win over the file's 4 and 2
        assert run(["benchmark", "--config", str(cfg_file),
                    "--k", "2", "--repetitions", "1"]) == 0
        report = json.loads((tmp_path / "runs" / "report_stub.json").read_text())
        assert len(report["per_fold"]) == 2

    def test_load_config_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_config(tmp_path / "absent.cfg")
