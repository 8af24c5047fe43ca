"""Command line for the cloud-to-edge diagnosis pipeline.

Subcommands cover the whole workflow: synthetic data generation, cloud
training, edge knowledge transfer (full method or either ablation),
evaluation, static complexity analysis, latency benchmarking, and a
reproduce command that runs the complete ablation grid over several
seeds and summarizes it.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
divergence, 5 archive/integrity error. Every failure prints one
machine-parsable line naming the stage, then the resolved config echo.
Outputs are deterministic for fixed inputs; wall-clock measurements are
segregated under timings/ so the metrics and reports trees stay
byte-reproducible.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .archive import (
    ArchiveError,
    Manifest,
    load_archive,
    read_manifest,
    save_archive,
)
from .complexity import analyze, bench_inference, format_comparison
from .config import ConfigError, ExperimentConfig, default_config_text
from .datagen import DataError, load_splits, make_splits, save_splits
from .layers import BuildError
from .models import build_model, freeze_pre_fe, share_pre_fe
from .training import (
    TrainingDiverged,
    evaluate,
    run_ablation,
    train_cloud,
    transfer_edge,
    write_reports,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_ARCHIVE = 5

WORKERS_ENV = "EDGEDIAG_WORKERS"

VARIANT_NAMES = {
    "proposed": "proposed",
    "wo-da": "wo_domain_adaptation",
    "wo-aa": "wo_adaptation_adjustment",
}


def _edge_seed(seed: int) -> int:
    # fixed convention so CLI runs and library runs line up exactly
    return seed + 1


def _ensure_dir(path) -> None:
    os.makedirs(path, exist_ok=True)


def _prepare_file(path) -> str:
    _ensure_dir(os.path.dirname(path) or ".")
    return path


def _echo_config(cfg: ExperimentConfig, out_dir) -> None:
    _ensure_dir(out_dir)
    with open(os.path.join(out_dir, "config-echo.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.echo_text())


def _dataset_manifest(cfg: ExperimentConfig, seed: int) -> Manifest:
    return Manifest(kind="dataset", config_hash=cfg.data_hash(), seed=seed)


def _model_manifest(cfg: ExperimentConfig, kind: str, seed: int) -> Manifest:
    return Manifest(kind=kind, config_hash=cfg.model_hash(), seed=seed)


def _load_dataset(cfg: ExperimentConfig, path):
    if not os.path.exists(path):
        raise DataError(f"dataset archive not found: {path}")
    return load_splits(path, _dataset_manifest(cfg, 0))


def _apply_weights(model, store) -> None:
    for name in model.store.names():
        if name not in store:
            raise ArchiveError(f"archive is missing entry {name!r}")
        src = store[name].data
        dst = model.store[name].data
        if src.shape != dst.shape:
            raise ArchiveError(
                f"entry {name!r} has shape {list(src.shape)}, model needs {list(dst.shape)}"
            )
        dst[...] = src


def _load_model(cfg: ExperimentConfig, path, kind=None):
    if not os.path.exists(path):
        raise ArchiveError(f"weights archive not found: {path}")
    manifest = read_manifest(path)
    kind = kind or manifest.kind
    store = load_archive(path, _model_manifest(cfg, kind, manifest.seed))
    model = build_model(cfg.model_config(), kind, seed=manifest.seed)
    _apply_weights(model, store)
    return model, manifest


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    _echo_config(cfg, args.out)
    seed = cfg["run.seed"] if args.seed is None else args.seed
    src, tgt = cfg.conditions()
    splits = make_splits(src, tgt, cfg.faults(), cfg.split_counts(), seed=seed)
    path = os.path.join(args.out, "dataset.edgewts")
    save_splits(splits, path, _dataset_manifest(cfg, seed))
    print(f"dataset written: {path} "
          f"({len(splits.d_training)} train / {len(splits.d_finetune_src)}+"
          f"{len(splits.d_finetune_tgt)} fine-tune / {len(splits.d_test)} test)")
    return EXIT_OK


def cmd_train_cloud(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    _echo_config(cfg, os.path.dirname(args.out_weights) or ".")
    seed = cfg["run.seed"] if args.seed is None else args.seed
    splits = _load_dataset(cfg, args.data)
    model = build_model(cfg.model_config(), "cloud", seed=seed)
    reports = train_cloud(model, splits.d_training, cfg.cloud_train_config(seed))
    save_archive(model.store, _model_manifest(cfg, "cloud", seed), _prepare_file(args.out_weights))
    write_reports(reports, _prepare_file(args.metrics), args.metrics + ".timing")
    final = reports[-1].train_accuracy if reports else float("nan")
    print(f"cloud model written: {args.out_weights} (train accuracy {final:.4f})")
    return EXIT_OK


def cmd_transfer(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    _echo_config(cfg, os.path.dirname(args.out_weights) or ".")
    seed = cfg["run.seed"] if args.seed is None else args.seed
    splits = _load_dataset(cfg, args.data)
    c_model, _ = _load_model(cfg, args.cloud_weights, kind="cloud")
    e_model = build_model(cfg.model_config(), "edge", seed=_edge_seed(seed))
    share_pre_fe(c_model, e_model)
    freeze_pre_fe(e_model)
    reports = transfer_edge(
        c_model,
        e_model,
        splits.d_finetune_src,
        splits.d_finetune_tgt,
        cfg.transfer_train_config(seed),
        variant=VARIANT_NAMES[args.variant],
    )
    save_archive(e_model.store, _model_manifest(cfg, "edge", seed), _prepare_file(args.out_weights))
    write_reports(reports, _prepare_file(args.metrics), args.metrics + ".timing")
    print(f"edge model written: {args.out_weights} (variant {args.variant})")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    splits = _load_dataset(cfg, args.data)
    model, _ = _load_model(cfg, args.weights)
    accuracy, conf = evaluate(model, splits.d_test)
    names = [f.name for f in cfg.faults()]
    text = conf.to_text(names)
    if args.report:
        _ensure_dir(os.path.dirname(args.report) or ".")
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        with open(args.report + ".jsonl", "w", encoding="utf-8") as fh:
            fh.write(json.dumps(
                {"accuracy": accuracy, "confusion": conf.counts.tolist()},
                sort_keys=True,
            ) + "\n")
    print(text)
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    model = build_model(cfg.model_config(), args.kind, seed=cfg["run.seed"])
    stats = analyze(model)
    print(stats.to_text())
    if args.report:
        _ensure_dir(os.path.dirname(args.report) or ".")
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(stats.to_text() + "\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    model, manifest = _load_model(cfg, args.weights)
    report = bench_inference(
        model, repeats=args.repeats, iters=args.iters, warmup=args.warmup
    )
    print(f"model kind: {manifest.kind}")
    print(report.to_text())
    if args.report:
        _ensure_dir(os.path.dirname(args.report) or ".")
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(report.to_record()) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# the full ablation grid

def _run_seed(cfg: ExperimentConfig, seed: int, out_dir: str) -> dict:
    src, tgt = cfg.conditions()
    splits = make_splits(src, tgt, cfg.faults(), cfg.split_counts(), seed=seed)
    c_model = build_model(cfg.model_config(), "cloud", seed=seed)
    cloud_reports = train_cloud(c_model, splits.d_training, cfg.cloud_train_config(seed))
    tag = f"seed{seed:03d}"
    save_archive(
        c_model.store, _model_manifest(cfg, "cloud", seed),
        os.path.join(out_dir, "weights", f"{tag}_cloud.edgewts"),
    )
    write_reports(
        cloud_reports,
        os.path.join(out_dir, "metrics", f"{tag}_cloud.jsonl"),
        os.path.join(out_dir, "timings", f"{tag}_cloud.jsonl"),
    )
    result = {"cloud_train_accuracy": cloud_reports[-1].train_accuracy if cloud_reports else 0.0}
    for cli_name, variant in VARIANT_NAMES.items():
        accuracy, conf, e_model, reports = run_ablation(
            variant, c_model, splits, e_seed=_edge_seed(seed),
            cfg=cfg.transfer_train_config(seed),
        )
        save_archive(
            e_model.store, _model_manifest(cfg, "edge", seed),
            os.path.join(out_dir, "weights", f"{tag}_edge_{cli_name}.edgewts"),
        )
        write_reports(
            reports,
            os.path.join(out_dir, "metrics", f"{tag}_{cli_name}.jsonl"),
            os.path.join(out_dir, "timings", f"{tag}_{cli_name}.jsonl"),
        )
        result[variant] = accuracy
    return result


def run_grid(cfg: ExperimentConfig, seeds, out_dir, bench: bool = False, workers: int = 1):
    """Run gen/train/transfer/eval for every (seed, variant); write summaries.

    Returns {variant: [accuracy per seed]} in seed order. Each worker
    runs a complete independent pipeline; file trees are disjoint per
    seed so the output does not depend on the worker count.
    """
    _echo_config(cfg, out_dir)
    for sub in ("weights", "metrics", "reports", "timings"):
        _ensure_dir(os.path.join(out_dir, sub))
    seeds = list(seeds)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda s: _run_seed(cfg, s, out_dir), seeds))
    else:
        results = [_run_seed(cfg, s, out_dir) for s in seeds]

    accuracies = {v: [r[v] for r in results] for v in VARIANT_NAMES.values()}
    with open(os.path.join(out_dir, "reports", "accuracy.jsonl"), "w", encoding="utf-8") as fh:
        for seed, res in zip(seeds, results):
            for variant in VARIANT_NAMES.values():
                fh.write(json.dumps(
                    {"seed": seed, "variant": variant, "accuracy": res[variant]},
                    sort_keys=True,
                ) + "\n")

    model_cfg = cfg.model_config()
    stats = {
        "cloud": analyze(build_model(model_cfg, "cloud", seed=seeds[0])),
        "edge": analyze(build_model(model_cfg, "edge", seed=seeds[0])),
    }
    lines = ["ablation accuracy over seeds " + ",".join(map(str, seeds)), ""]
    for variant in VARIANT_NAMES.values():
        vals = accuracies[variant]
        lines.append(
            f"{variant:<28} mean {np.mean(vals):.4f}  std {np.std(vals):.4f}  "
            + " ".join(f"{v:.4f}" for v in vals)
        )
    lines += ["", "model complexity", format_comparison(stats)]
    with open(os.path.join(out_dir, "reports", "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    if bench:
        bench_reports = {
            kind: bench_inference(build_model(model_cfg, kind, seed=seeds[0]))
            for kind in ("cloud", "edge")
        }
        with open(os.path.join(out_dir, "timings", "latency.txt"), "w", encoding="utf-8") as fh:
            fh.write(format_comparison(stats, bench_reports) + "\n")
    return accuracies


def cmd_reproduce(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    seeds = [cfg["run.seed"] + i for i in range(args.seeds)]
    workers = args.workers or int(os.environ.get(WORKERS_ENV, "1"))
    accuracies = run_grid(cfg, seeds, args.out, bench=args.bench, workers=max(1, workers))
    with open(os.path.join(args.out, "reports", "summary.txt"), encoding="utf-8") as fh:
        print(fh.read().rstrip())
    proposed = float(np.mean(accuracies["proposed"]))
    wo_da = float(np.mean(accuracies["wo_domain_adaptation"]))
    print(f"\nproposed mean accuracy beats cross-entropy-only by "
          f"{(proposed - wo_da) * 100:.2f} points")
    return EXIT_OK


def cmd_default_config(args) -> int:
    sys.stdout.write(default_config_text())
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgediag",
        description="cloud-to-edge cross-condition fault diagnosis pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset archive")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_gen_data, stage="gen-data")

    p = sub.add_parser("train-cloud", help="train the cloud model on source data")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="dataset archive")
    p.add_argument("--out-weights", required=True)
    p.add_argument("--metrics", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_train_cloud, stage="train-cloud")

    p = sub.add_parser("transfer", help="transfer cloud knowledge to the edge model")
    p.add_argument("--config", required=True)
    p.add_argument("--cloud-weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=sorted(VARIANT_NAMES), default="proposed")
    p.add_argument("--out-weights", required=True)
    p.add_argument("--metrics", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_transfer, stage="transfer")

    p = sub.add_parser("eval", help="evaluate a model archive on the test split")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", default=None)
    p.set_defaults(fn=cmd_eval, stage="eval")

    p = sub.add_parser("analyze", help="static params/memory/FLOPs analysis")
    p.add_argument("--config", required=True)
    p.add_argument("--kind", choices=("cloud", "edge"), required=True)
    p.add_argument("--report", default=None)
    p.set_defaults(fn=cmd_analyze, stage="analyze")

    p = sub.add_parser("bench", help="inference latency benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--report", default=None)
    p.set_defaults(fn=cmd_bench, stage="bench")

    p = sub.add_parser("reproduce", help="run the full ablation grid over N seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out", required=True)
    p.add_argument("--bench", action="store_true", help="also measure latency")
    p.add_argument("--workers", type=int, default=None,
                   help=f"parallel seed pipelines (default ${WORKERS_ENV} or 1)")
    p.set_defaults(fn=cmd_reproduce, stage="reproduce")

    p = sub.add_parser("default-config", help="print the documented default config")
    p.set_defaults(fn=cmd_default_config, stage="default-config")
    return parser


_ERROR_CODES = (
    (ConfigError, EXIT_CONFIG),
    (BuildError, EXIT_CONFIG),
    (TrainingDiverged, EXIT_DIVERGED),
    (DataError, EXIT_DATA),
    (ArchiveError, EXIT_ARCHIVE),
    (ValueError, EXIT_CONFIG),
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg_path = getattr(args, "config", None)
    try:
        return args.fn(args)
    except Exception as err:  # mapped to documented exit codes below
        for exc_type, code in _ERROR_CODES:
            if isinstance(err, exc_type):
                break
        else:
            raise
        print(f"error stage={args.stage} code={code}: {err}", file=sys.stderr)
        if cfg_path and os.path.exists(cfg_path):
            try:
                echo = ExperimentConfig.from_file(cfg_path).echo_text()
                sys.stderr.write(echo)
            except ConfigError:
                pass
        return code


if __name__ == "__main__":
    sys.exit(main())
