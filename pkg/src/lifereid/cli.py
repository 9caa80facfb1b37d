"""Command-line pipeline driver: gen-data, train, evaluate, report.

Exit codes: 0 success; 2 configuration or protocol problems (bad config,
missing files, store violations); 3 numeric failure during training (the
message carries the dataset and step index).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import evaluation, trainer
from .config import (
    apply_mode,
    apply_seed,
    dump_run_metadata,
    load_run_metadata,
    parse_config,
)
from .errors import ConfigError, LifereidError, NumericError
from .model import checkpoint_load
from .synth import gen_benchmark, load_benchmark, save_benchmark

MODES = ("proposed", "finetune", "joint", "ablation")


def _cmd_gen_data(args) -> int:
    cfg = parse_config(args.config)
    gen = cfg.gen
    if args.seed is not None:
        from dataclasses import replace
        gen = replace(gen, seed=int(args.seed))
    bench = gen_benchmark(gen)
    save_benchmark(args.out, bench)
    for ds in bench.tasks:
        print(f"{ds.name}: train {len(ds.train_ids)} images / "
              f"{len(np.unique(ds.train_ids))} ids, query {len(ds.query_ids)}, "
              f"gallery {len(ds.gallery_ids)}")
    print(f"wrote {len(bench.tasks)} datasets to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = parse_config(args.config)
    cfg = apply_mode(cfg, args.mode)
    cfg = apply_seed(cfg, args.seed)
    if not os.path.isdir(args.data):
        raise ConfigError(f"dataset directory {args.data!r} does not exist")
    suite = load_benchmark(args.data)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "run_config.json"), "w") as fh:
        fh.write(dump_run_metadata(cfg, args.mode, args.data))

    if args.mode == "joint":
        result = trainer.train_joint(suite, cfg.train, cfg.weights, args.out)
    else:
        result = trainer.train_sequence(suite, cfg.train, cfg.weights,
                                        cfg.flags, args.out)
    for t, trace in enumerate(result.loss_history, start=1):
        print(f"task {t}: {len(trace)} steps, "
              f"loss {trace[0]:.4f} -> {trace[-1]:.4f}")
    print(f"run directory: {args.out}")
    return 0


def _run_setup(run_dir: str, data_override: str | None):
    meta = load_run_metadata(os.path.join(run_dir, "run_config.json"))
    data_dir = data_override or meta["data_dir"]
    if not os.path.isdir(data_dir):
        raise ConfigError(f"dataset directory {data_dir!r} does not exist")
    suite = load_benchmark(data_dir)
    mode = meta["mode"]
    cac_mode = meta["ablation"]["cac"]
    ckpt_dir = os.path.join(run_dir, "checkpoints")
    n_ckpts = 1 if mode == "joint" else len(suite)
    paths = [os.path.join(ckpt_dir, f"task_{t}.ckpt") for t in range(1, n_ckpts + 1)]
    for p in paths:
        if not os.path.exists(p):
            raise ConfigError(f"missing checkpoint {p}")
    return meta, suite, mode, cac_mode, paths


def _cmd_evaluate(args) -> int:
    run_dir = args.run
    meta, suite, mode, cac_mode, ckpt_paths = _run_setup(run_dir, args.data)
    features_dir = os.path.join(run_dir, "features")
    params, _ = checkpoint_load(ckpt_paths[-1])

    table = evaluation.evaluate_per_dataset(
        params, suite, features_dir, cac_mode, require_version=(mode != "joint"))
    with open(os.path.join(run_dir, "metrics.csv"), "w") as fh:
        fh.write(table.to_csv())

    u_map, u_r1, u_skip = evaluation.evaluate_unified(params, suite, features_dir, cac_mode)
    with open(os.path.join(run_dir, "unified.csv"), "w") as fh:
        fh.write("mAP,rank1,excluded\n")
        fh.write(f"{u_map:.6f},{u_r1:.6f},{u_skip}\n")

    control = evaluation.backfilled_control(params, suite, cac_mode)
    with open(os.path.join(run_dir, "backfilled_control.csv"), "w") as fh:
        fh.write(control.to_csv())

    if mode != "joint":
        matrix = evaluation.compatibility_matrix(ckpt_paths, suite, features_dir, cac_mode)
        with open(os.path.join(run_dir, "compat_matrix.csv"), "w") as fh:
            fh.write("model," + ",".join(t.name for t in suite) + "\n")
            for i, row in enumerate(matrix, start=1):
                fh.write(f"task{i}," + ",".join(f"{v:.6f}" for v in row) + "\n")

    print(table.to_csv(), end="")
    print(f"unified: mAP {u_map:.6f}, rank1 {u_r1:.6f}")
    print(f"backfilled control average mAP: {control.average_map:.6f}")
    return 0


def _read_metrics_csv(path: str):
    try:
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except OSError as exc:
        raise ConfigError(f"cannot read {path!r}: {exc}") from exc
    if not lines or lines[0] != "dataset,mAP,rank1":
        raise ConfigError(f"{path!r} is not a metrics table")
    rows = []
    for ln in lines[1:]:
        name, m, r = ln.split(",")
        rows.append((name, float(m), float(r)))
    return rows


def _cmd_report(args) -> int:
    runs = []
    benchmark_names = None
    for run_dir in args.runs:
        meta = load_run_metadata(os.path.join(run_dir, "run_config.json"))
        rows = _read_metrics_csv(os.path.join(run_dir, "metrics.csv"))
        names = [name for name, _, _ in rows[:-1]]
        if benchmark_names is None:
            benchmark_names = names
        elif names != benchmark_names:
            raise ConfigError(
                f"run {run_dir!r} evaluates a different benchmark {names}")
        runs.append((run_dir, meta, rows))

    def flag_mark(on: bool) -> str:
        return "yes" if on else "-"

    def run_name(run_dir: str) -> str:
        return os.path.basename(os.path.normpath(run_dir))

    # component-contribution grid: which modules were on, per-dataset mAP
    out = ["# Lifelong retrieval report", "", "## Ablation grid", "",
           "| run | cmcl | pcl | cac | "
           + " | ".join(f"{n} mAP" for n in benchmark_names)
           + " | avg mAP |",
           "|" + "---|" * (4 + len(benchmark_names) + 1)]
    for run_dir, meta, rows in runs:
        fl = meta["ablation"]
        per = " | ".join(f"{m:.4f}" for _, m, _ in rows[:-1])
        out.append(
            f"| {run_name(run_dir)} | {flag_mark(fl['cmcl'])} | "
            f"{flag_mark(fl['pcl'])} | {fl['cac']} | {per} | "
            f"{rows[-1][1]:.4f} |")

    # method-comparison grid: per-dataset mAP and Rank-1 side by side
    pair_cols = []
    for n in benchmark_names:
        pair_cols += [f"{n} mAP", f"{n} R-1"]
    out += ["", "## Comparison grid", "",
            "| run | mode | " + " | ".join(pair_cols) + " | avg mAP | avg R-1 |",
            "|" + "---|" * (2 + len(pair_cols) + 2)]
    for run_dir, meta, rows in runs:
        per = " | ".join(f"{m:.4f} | {r:.4f}" for _, m, r in rows[:-1])
        out.append(f"| {run_name(run_dir)} | {meta['mode']} | {per} | "
                   f"{rows[-1][1]:.4f} | {rows[-1][2]:.4f} |")
    out.append("")
    report = "\n".join(out)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report)
        print(f"wrote {args.out}")
    else:
        print(report)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lifereid",
        description="Lifelong backward-compatible identity retrieval pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    p.add_argument("--config", required=True, help="INI configuration file")
    p.add_argument("--out", required=True, help="benchmark output directory")
    p.add_argument("--seed", type=int, help="override [data] seed")

    p = sub.add_parser("train", help="run lifelong training")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="generated benchmark directory")
    p.add_argument("--mode", default="proposed", choices=MODES)
    p.add_argument("--seed", type=int, help="override [run] seed")
    p.add_argument("--out", required=True, help="run directory to create")

    p = sub.add_parser("evaluate", help="evaluate a finished run directory")
    p.add_argument("--run", required=True, help="run directory from `train`")
    p.add_argument("--data", help="override the dataset directory recorded in the run")

    p = sub.add_parser("report", help="merge evaluated runs into a markdown table")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", help="write the report here instead of stdout")
    return parser


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (LifereidError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
