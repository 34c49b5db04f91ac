"""Command-line entry point: dataset tooling, cached feature extraction,
config-driven benchmark runs, and report aggregation."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import backbone as bb
from . import dataset as ds
from .augment import AugmentConfig, load_image
from .classifier import TrainConfig
from .evaluation import (BackboneReport, backbone_report_json, comparison_csv,
                         comparison_to_dict, confusion_csv, relative_report,
                         run_cv, throughput)

MODEL_DIR_ENV = "DELCBENCH_MODEL_DIR"


@dataclass
class RunConfig:
    """Everything a benchmark run needs; reproducible from its dict form."""

    manifest: str = ""
    backbones: list[str] = field(default_factory=lambda: ["all"])
    out_dir: str = "runs"
    cache_dir: str = "caches"
    model_dir: str = "models"
    stub_dim: int = 64
    k: int = 9
    repetitions: int = 5
    seed: int = 0
    jobs: int = 1
    val_fraction: float = 0.1
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        row = asdict(self)
        return row

    @classmethod
    def from_dict(cls, row: dict) -> "RunConfig":
        row = dict(row)
        augment = AugmentConfig(**row.pop("augment", {}))
        train = TrainConfig(**row.pop("train", {}))
        return cls(augment=augment, train=train, **row)

    def sha256(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _parse_scalar(text: str):
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        return text[1:-1]
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if "," in text:
        return [part.strip() for part in text.split(",") if part.strip()]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_config_text(text: str) -> dict:
    """Key-value config format: ``key = value`` lines, optional ``[section]``
    headers (or dotted keys), ``#`` comments, comma-separated lists."""
    values: dict[str, object] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        full = f"{section}.{key}" if section else key
        values[full] = _parse_scalar(value)
    return values


_SUBCONFIGS = {"augment": AugmentConfig, "train": TrainConfig}


def config_from_values(values: dict) -> RunConfig:
    cfg = RunConfig()
    for full, value in values.items():
        section, _, key = full.partition(".")
        if key and section in _SUBCONFIGS:
            target = getattr(cfg, section)
            if not hasattr(target, key):
                raise ValueError(f"unknown config key {full!r}")
            setattr(target, key, value)
        elif not key:
            name = section
            if name == "backbones" and isinstance(value, str):
                value = [value]
            if not hasattr(cfg, name) or name in _SUBCONFIGS:
                raise ValueError(f"unknown config key {name!r}")
            setattr(cfg, name, value)
        else:
            raise ValueError(f"unknown config key {full!r}")
    return cfg


def load_config(path: Path | str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return config_from_values(parse_config_text(Path(path).read_text(encoding="utf-8")))


def write_text_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _resolve_model_dir(cfg: RunConfig, flag_value: str | None) -> str:
    # precedence: explicit flag, then environment, then config
    if flag_value:
        return flag_value
    return os.environ.get(MODEL_DIR_ENV, cfg.model_dir)


def _select_backbones(names: list[str]) -> list[str]:
    if "all" in names:
        return [spec.name for spec in bb.registry()]
    known = {spec.name for spec in bb.registry()} | {"stub"}
    for name in names:
        if name not in known:
            raise ValueError(f"unknown backbone {name!r}; registry has {sorted(known)}")
    return names


def _build_extractor(name: str, cfg: RunConfig, model_dir: str):
    if name == "stub":
        return bb.StubBackbone(cfg.stub_dim)
    return bb.OnnxBackbone(bb.get_spec(name, model_dir))


def cmd_dataset(args: argparse.Namespace) -> int:
    if args.dataset_cmd == "stats":
        manifest = ds.load_manifest(args.manifest, require_both_classes=False)
        records = manifest.by_label(args.label)
        stats = ds.compute_shape_stats(records)
        print(f"label={args.label} n={len(records)}")
        print(f"mean: {stats.mean_width:.2f} x {stats.mean_height:.2f}")
        if stats.std_width is None:
            print("std: undefined (fewer than 2 records)")
        else:
            print(f"std: {stats.std_width:.2f} x {stats.std_height:.2f}")
        return 0

    if args.dataset_cmd == "filter":
        manifest = ds.load_manifest(args.manifest, require_both_classes=False)
        stats_source = (ds.load_manifest(args.stats_from, require_both_classes=False)
                        if args.stats_from else manifest)
        stats = ds.compute_shape_stats(stats_source.by_label(args.stats_label))
        candidates = manifest.by_label(args.label)
        kept = ds.filter_negatives(candidates, stats, args.k)
        out = Path(args.out)
        filtered = ds.DatasetManifest.from_records(kept, root=manifest.root)
        ds.save_manifest(filtered, out)
        print(f"kept {len(kept)} of {len(candidates)} candidates -> {out}")
        return 0

    if args.dataset_cmd == "synth":
        manifest = ds.synth_generate(args.n, args.seed, args.out)
        print(f"wrote {len(manifest.records)} images "
              f"({manifest.counts['positive']} positive / "
              f"{manifest.counts['negative']} negative) under {args.out}")
        return 0

    raise ValueError(f"unknown dataset subcommand {args.dataset_cmd!r}")


def cmd_extract(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.dim:
        cfg.stub_dim = args.dim
    cache_dir = Path(args.cache_dir or cfg.cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    model_dir = _resolve_model_dir(cfg, args.model_dir)
    manifest = ds.load_manifest(args.manifest or cfg.manifest)
    names = _select_backbones(args.backbone or cfg.backbones)

    missing_models = [
        name for name in names
        if name != "stub" and not (Path(model_dir) / f"{name}.onnx").exists()
    ]
    if missing_models:
        raise FileNotFoundError(
            f"missing model files under {model_dir} for: {', '.join(missing_models)}"
        )

    for name in names:
        extractor = _build_extractor(name, cfg, model_dir)
        cache_path = cache_dir / f"{name}.feat"
        fresh = bb.update_cache(manifest, extractor, cache_path)
        cached = len(bb.cache_read(cache_path, name))
        print(f"{name}: computed {fresh} new vectors ({cached - fresh} already cached) "
              f"-> {cache_path}")
    return 0


def _benchmark_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    if args.manifest:
        cfg.manifest = args.manifest
    if args.backbone:
        cfg.backbones = args.backbone
    if args.k is not None:
        cfg.k = args.k
    if args.repetitions is not None:
        cfg.repetitions = args.repetitions
    if args.seed is not None:
        cfg.seed = args.seed
    if args.jobs is not None:
        cfg.jobs = args.jobs
    if args.out:
        cfg.out_dir = args.out
    if args.cache_dir:
        cfg.cache_dir = args.cache_dir
    if args.dim:
        cfg.stub_dim = args.dim
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.batch_size is not None:
        cfg.train.batch_size = args.batch_size
    if args.target_per_class is not None:
        cfg.augment.target_per_class = args.target_per_class
    if args.val_fraction is not None:
        cfg.val_fraction = args.val_fraction
    cfg.model_dir = _resolve_model_dir(cfg, args.model_dir)
    # one global seed drives fold planning, augmentation, and training
    cfg.train = replace(cfg.train, seed=cfg.seed)
    cfg.augment = replace(cfg.augment, seed=cfg.seed)
    return cfg


def cmd_benchmark(args: argparse.Namespace) -> int:
    cfg = _benchmark_config(args)
    if not cfg.manifest:
        raise ValueError("no manifest given (config 'manifest' key or --manifest)")
    manifest = ds.load_manifest(cfg.manifest)
    names = _select_backbones(cfg.backbones)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    cache_dir = Path(cfg.cache_dir)
    absent = [name for name in names if not (cache_dir / f"{name}.feat").exists()]
    if absent:
        raise FileNotFoundError(
            f"feature caches missing under {cache_dir} for: {', '.join(absent)}; "
            f"run 'delcbench extract' first"
        )

    reports: list[BackboneReport] = []
    failures: dict[str, str] = {}
    for name in names:
        extractor = _build_extractor(name, cfg, cfg.model_dir)
        cache = bb.cache_read(cache_dir / f"{name}.feat", name)
        try:
            report = run_cv(
                manifest, extractor, cfg.augment, cfg.train,
                k=cfg.k, repetitions=cfg.repetitions,
                feature_cache=cache, val_fraction=cfg.val_fraction, jobs=cfg.jobs,
            )
        except Exception as exc:
            failures[name] = str(exc)
            print(f"{name}: FAILED: {exc}", file=sys.stderr)
            continue
        reports.append(report)
        write_text_atomic(out_dir / f"report_{name}.json", backbone_report_json(report))
        write_text_atomic(out_dir / f"confusion_{name}.csv", confusion_csv(report.confusion))
        print(f"{name}: val_acc={report.val_accuracy:.4f} test_acc={report.test_accuracy:.4f}")

    if reports:
        comparison = relative_report(reports)
        write_text_atomic(
            out_dir / "comparison.json",
            json.dumps(comparison_to_dict(comparison), indent=2, sort_keys=True) + "\n",
        )
        write_text_atomic(out_dir / "comparison.csv", comparison_csv(comparison))

    run_manifest = {
        "config": cfg.to_dict(),
        "config_sha256": cfg.sha256(),
        "seed": cfg.seed,
        "completed": [r.backbone_name for r in reports],
        "failed": failures,
    }
    write_text_atomic(
        out_dir / "run_manifest.json",
        json.dumps(run_manifest, indent=2, sort_keys=True) + "\n",
    )
    return 1 if failures else 0


def cmd_report(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    paths = sorted(out_dir.glob("report_*.json"))
    if not paths:
        raise FileNotFoundError(f"no report_*.json files under {out_dir}")
    reports = [BackboneReport.from_dict(json.loads(p.read_text(encoding="utf-8")))
               for p in paths]
    comparison = relative_report(reports)
    write_text_atomic(
        out_dir / "comparison.json",
        json.dumps(comparison_to_dict(comparison), indent=2, sort_keys=True) + "\n",
    )
    write_text_atomic(out_dir / "comparison.csv", comparison_csv(comparison))
    print(f"aggregated {len(reports)} reports; best={comparison.best_performance} "
          f"largest={comparison.largest_model}")
    return 0


def cmd_throughput(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.dim:
        cfg.stub_dim = args.dim
    model_dir = _resolve_model_dir(cfg, args.model_dir)
    manifest = ds.load_manifest(args.manifest or cfg.manifest)
    records = manifest.records[: args.limit]
    images = [load_image(manifest.resolve_path(r)) for r in records]
    extractor = _build_extractor(args.backbone, cfg, model_dir)
    rate = throughput(extractor, images, iterations=args.iterations)
    print(f"{args.backbone}: {rate:.1f} images/s "
          f"(median of {args.iterations} runs, batch of {len(images)})")
    return 0


def _common_flags() -> argparse.ArgumentParser:
    # a fresh parent per subparser: argparse shares action objects across
    # parents, so a per-subparser set_defaults would otherwise leak into
    # every other subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="run configuration file")
    common.add_argument("--seed", type=int, default=None, help="global RNG seed")
    common.add_argument("--jobs", type=int, default=None, help="parallel fold workers")
    common.add_argument("--out", default=None, help="output directory")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="delcbench",
        description="Earlobe-crease detection benchmark: dataset tooling, "
                    "feature extraction, and backbone comparison runs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_dataset = sub.add_parser("dataset", help="manifest statistics, filtering, fixtures")
    dsub = p_dataset.add_subparsers(dest="dataset_cmd", required=True)

    p_stats = dsub.add_parser("stats", parents=[_common_flags()],
                              help="print shape statistics")
    p_stats.add_argument("--manifest", required=True)
    p_stats.add_argument("--label", default="positive", choices=ds.LABELS)

    p_filter = dsub.add_parser("filter", parents=[_common_flags()],
                               help="keep candidates within mean +/- k*std")
    p_filter.add_argument("--manifest", required=True, help="candidate manifest")
    p_filter.add_argument("--stats-from", default=None,
                          help="manifest supplying the reference shape stats")
    p_filter.add_argument("--stats-label", default="positive", choices=ds.LABELS)
    p_filter.add_argument("--label", default="negative", choices=ds.LABELS)
    p_filter.add_argument("--k", type=float, default=2.0, help="tolerance multiplier")
    p_filter.set_defaults(out="filtered.jsonl")

    p_synth = dsub.add_parser("synth", parents=[_common_flags()],
                              help="generate a synthetic fixture set")
    p_synth.add_argument("--n", type=int, required=True, help="images per class")
    p_synth.set_defaults(seed=7, out="synth_data")

    p_extract = sub.add_parser("extract", parents=[_common_flags()],
                               help="extract features into per-backbone caches")
    p_extract.add_argument("--manifest", default=None)
    p_extract.add_argument("--backbone", action="append", default=None,
                           help="registry name, 'stub', or 'all' (repeatable)")
    p_extract.add_argument("--dim", type=int, default=None, help="stub feature dimension")
    p_extract.add_argument("--cache-dir", default=None)
    p_extract.add_argument("--model-dir", default=None)

    p_bench = sub.add_parser("benchmark", parents=[_common_flags()],
                             help="run the repeated-CV benchmark and write reports")
    p_bench.add_argument("--manifest", default=None)
    p_bench.add_argument("--backbone", action="append", default=None)
    p_bench.add_argument("--k", type=int, default=None, help="folds per repetition")
    p_bench.add_argument("--repetitions", type=int, default=None)
    p_bench.add_argument("--cache-dir", default=None)
    p_bench.add_argument("--model-dir", default=None)
    p_bench.add_argument("--dim", type=int, default=None)
    p_bench.add_argument("--epochs", type=int, default=None)
    p_bench.add_argument("--batch-size", type=int, default=None)
    p_bench.add_argument("--target-per-class", type=int, default=None)
    p_bench.add_argument("--val-fraction", type=float, default=None)

    p_report = sub.add_parser("report", parents=[_common_flags()],
                              help="rebuild the comparison from report_*.json files")
    p_report.set_defaults(out="runs")

    p_tp = sub.add_parser("throughput", parents=[_common_flags()],
                          help="measure extractor throughput (timing, not a correctness check)")
    p_tp.add_argument("--manifest", default=None)
    p_tp.add_argument("--backbone", required=True)
    p_tp.add_argument("--dim", type=int, default=None)
    p_tp.add_argument("--model-dir", default=None)
    p_tp.add_argument("--iterations", type=int, default=5)
    p_tp.add_argument("--limit", type=int, default=16)

    return parser


_HANDLERS = {
    "dataset": cmd_dataset,
    "extract": cmd_extract,
    "benchmark": cmd_benchmark,
    "report": cmd_report,
    "throughput": cmd_throughput,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
