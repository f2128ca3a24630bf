"""Command-line entry point.

Exit codes: 0 success, 1 run failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import config as cfgdoc
from .errors import ConfigError
from .pipeline import (RunConfig, dev_metric, finetune_teacher, parse_metric, prepare_data, read_report,
                       run_experiment)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# prediction-stage knobs form the hyperparameter axes of a sweep table
HYPER_KEYS = ("lr2", "batch2")


class UsageError(Exception):
    pass


def add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="key = value config document (flags override it)")
    group = parser.add_argument_group("run options (config key in brackets)")
    for name, f in cfgdoc.FIELDS.items():
        kind = cfgdoc.field_type(name)
        key = name.replace("_", "-")
        help_text = f"{f.metadata['help']} [{key}]"
        if f.default is not None:
            help_text += f" (default {f.default})"
        if kind is bool:
            group.add_argument(cfgdoc.flag_name(name), dest=name, default=None,
                               action=argparse.BooleanOptionalAction, help=help_text)
        else:
            group.add_argument(cfgdoc.flag_name(name), dest=name, default=None, type=kind,
                               choices=f.metadata.get("choices"), help=help_text)


def resolve_args(args) -> RunConfig:
    file_values = cfgdoc.load_document(args.config) if args.config else {}
    flags = {name: getattr(args, name) for name in cfgdoc.FIELDS if getattr(args, name, None) is not None}
    return cfgdoc.resolve(file_values, flags).resolved()


# ----------------------------------------------------------------- subcommands

def cmd_train_teacher(args) -> int:
    if args.epochs is not None:
        args.teacher_epochs = args.epochs
    cfg = resolve_args(args)
    from .checkpoint import save_params
    from .pipeline import MetricsWriter

    out = Path(cfg.out or f"runs/teacher-{cfg.task}-{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfgdoc.format_config(cfg), encoding="utf-8")
    metrics_path = out / "metrics.jsonl"
    metrics_path.unlink(missing_ok=True)
    metrics = MetricsWriter(metrics_path)
    full, _, dev = prepare_data(cfg)
    params, dev_value, train_value = finetune_teacher(full, dev, cfg.teacher_config(), cfg.seed,
                                                      cfg.teacher_epochs, cfg.teacher_lr, cfg.teacher_batch,
                                                      metrics)
    metrics.close()
    ckpt = out / "teacher.ckpt"
    save_params(params, ckpt, {"task": cfg.task, "train_metric": train_value, "dev_metric": dev_value})
    metric = "mcc" if cfg.kind == "classification" else "pearson"
    print(f"task={cfg.task} dev_{metric}={dev_value!r} train_metric={train_value!r} checkpoint={ckpt}")
    return EXIT_OK


def _render_run_figures(out: Path, report) -> None:
    from .plotting import plot_losses, plot_trajectory

    plot_losses(out / "metrics.jsonl", out / "losses.png")
    if report.trajectory_path:
        plot_trajectory(report.trajectory_path, out / "trajectory.png")


def cmd_distill(args) -> int:
    cfg = resolve_args(args)
    if not cfg.teacher or not Path(cfg.teacher).is_file():
        where = cfg.teacher or "(none given)"
        print(f"error: teacher checkpoint not found: {where}\n"
              f"hint: create one with `deskdistill train-teacher --task {cfg.task} --out DIR` "
              f"and pass --teacher DIR/teacher.ckpt", file=sys.stderr)
        return EXIT_FAIL
    out = Path(cfg.out or "runs/distill")
    report = run_experiment(cfg, out)
    if not args.no_figures:
        _render_run_figures(out, report)
    metric = "mcc" if cfg.kind == "classification" else "pearson"
    print(f"task={cfg.task} dev_{metric}={report.final_dev_metric!r} out={out}")
    return EXIT_OK


def parse_grid(items) -> dict[str, list[str]]:
    grid = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"grid entry {item!r} must look like key=v1,v2")
        key, values = item.split("=", 1)
        key = key.strip().replace("_", "-")
        if key.replace("-", "_") not in cfgdoc.FIELDS:
            raise UsageError(f"unknown grid key {key!r}")
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise UsageError(f"grid key {key!r} has no values")
        for v in vals:
            cfgdoc.coerce(key.replace("-", "_"), v)
        grid[key] = vals
    if not grid:
        raise UsageError("empty sweep grid; pass at least one --grid key=v1,v2")
    return grid


def variant_label(cell: dict[str, str]) -> str:
    parts = []
    frac = None
    for key, value in cell.items():
        if key in HYPER_KEYS:
            continue
        if key == "attn-loss":
            parts.append(value.upper())
        elif key == "map":
            parts.append(value.capitalize())
        elif key == "data-fraction":
            frac = float(value)
        elif key == "alpha":
            parts.append(f"alpha={value}")
        elif key == "skip-stage1":
            parts.append("skip-stage1" if cfgdoc.parse_bool(value) else "full")
        else:
            parts.append(f"{key}={value}")
    label = " ".join(parts) or "base"
    if frac is not None and frac != 1.0:
        label += f" ({frac * 100:g}%)"
    return label


def cell_flags(cell: dict[str, str]) -> list[str]:
    flags = []
    for key, value in cell.items():
        if cfgdoc.field_type(key.replace("-", "_")) is bool:
            flags.append(f"--{key}" if cfgdoc.parse_bool(value) else f"--no-{key}")
        else:
            flags += [f"--{key}", value]
    return flags


def best_per_variant(cells: list[dict]) -> list[dict]:
    best: dict[str, dict] = {}
    for c in cells:
        if c["metric"] is None:
            best.setdefault(c["variant"], c)
            continue
        cur = best.get(c["variant"])
        if cur is None or cur["metric"] is None or c["metric"] > cur["metric"]:
            best[c["variant"]] = c
    return sorted(best.values(), key=lambda c: (c["metric"] is None, -(c["metric"] or 0.0), c["variant"]))


def write_table(rows: list[dict], path, base_cfg: RunConfig) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "metric", "learning_rate", "batch_size"])
        for r in rows:
            w.writerow([r["variant"], "none" if r["metric"] is None else repr(r["metric"]),
                        r.get("lr2", repr(base_cfg.lr2)), r.get("batch2", str(base_cfg.batch2))])


def cmd_sweep(args) -> int:
    grid = parse_grid(args.grid)
    cfg = resolve_args(args)
    out = Path(cfg.out or "runs/sweep")
    out.mkdir(parents=True, exist_ok=True)

    teacher_path = cfg.teacher
    if not teacher_path:
        from .checkpoint import save_params

        full, _, dev = prepare_data(cfg)
        params, dev_value, train_value = finetune_teacher(full, dev, cfg.teacher_config(), cfg.seed,
                                                          cfg.teacher_epochs, cfg.teacher_lr, cfg.teacher_batch)
        teacher_path = str(out / "teacher.ckpt")
        save_params(params, teacher_path, {"task": cfg.task, "train_metric": train_value,
                                           "dev_metric": dev_value})
    base = out / "base.cfg"
    base_values = {f: getattr(cfg, f) for f in cfgdoc.FIELDS}
    base_values.update(teacher=teacher_path, out=None)
    base.write_text(cfgdoc.format_config(RunConfig(**base_values)), encoding="utf-8")

    keys = list(grid)
    cells = [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]

    def run_cell(i_cell):
        i, cell = i_cell
        cell_dir = out / f"cell-{i:03d}"
        cmd = [sys.executable, "-m", "deskdistill", "distill", "--config", str(base),
               "--out", str(cell_dir), *cell_flags(cell)]
        if args.no_figures:
            cmd.append("--no-figures")
        env = dict(os.environ)
        proc = subprocess.run(cmd, capture_output=True, text=True, env=env)
        record = {"cell": i, "variant": variant_label(cell), "dir": str(cell_dir), **cell,
                  "exit_code": proc.returncode, "metric": None}
        if proc.returncode == 0 and (cell_dir / "report.txt").is_file():
            record["metric"] = parse_metric(read_report(cell_dir / "report.txt").get("final_dev_metric"))
            record["status"] = "ok"
        else:
            record["status"] = "failed"
            (cell_dir).mkdir(parents=True, exist_ok=True)
            (cell_dir / "error.log").write_text(proc.stdout + proc.stderr, encoding="utf-8")
        print(f"[sweep] cell {i:03d} {record['variant']} {cell} -> {record['status']} metric={record['metric']!r}",
              flush=True)
        return record

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        results = list(pool.map(run_cell, enumerate(cells)))

    with open(out / "sweep_cells.csv", "w", newline="") as fh:
        cols = ["cell", "variant", *keys, "metric", "status", "exit_code", "dir"]
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in results:
            w.writerow({**r, "metric": "none" if r["metric"] is None else repr(r["metric"])})
    table = out / "sweep_table.csv"
    write_table(best_per_variant(results), table, cfg)
    if not args.no_figures:
        from .plotting import plot_sweep_table

        plot_sweep_table(table, out / "sweep_table.png", "MCC" if cfg.kind == "classification" else "Pearson")
    print(table.read_text(), end="")
    return EXIT_FAIL if any(r["status"] != "ok" for r in results) else EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import ALPHAS, ATTN_KINDS, MAP_KINDS, TOLERANCE, run_suite

    attns = [args.attn_loss] if args.attn_loss else list(ATTN_KINDS)
    kinds = [args.map] if args.map else list(MAP_KINDS)
    alphas = [args.alpha] if args.alpha is not None else list(ALPHAS)
    worst = None
    for (attn, kind, alpha), groups in run_suite(attns, kinds, alphas, corrupt=args.corrupt,
                                                  step=args.step, max_coords=args.coords, seed=args.seed):
        for group, rep in sorted(groups.items()):
            flag = "ok" if rep["max_rel_error"] < TOLERANCE else "FAIL"
            print(f"attn={attn} map={kind} alpha={alpha} group={group} max_rel_error={rep['max_rel_error']:.3e} {flag}")
            if worst is None or rep["max_rel_error"] > worst[0]:
                worst = (rep["max_rel_error"], attn, kind, alpha, rep)
    if worst and worst[0] >= TOLERANCE:
        err, attn, kind, alpha, rep = worst
        print(f"FAIL: worst coordinate {rep['name']}[{rep['worst_index']}] (attn={attn} map={kind} alpha={alpha}): "
              f"analytic={rep['analytic']:.6e} numeric={rep['numeric']:.6e} rel_error={err:.3e}", file=sys.stderr)
        return EXIT_FAIL
    print(f"PASS: max relative error {worst[0]:.3e} < {TOLERANCE:g}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plotting import plot_losses, plot_sweep_table, plot_trajectory

    made = []
    for d in args.dirs:
        d = Path(d)
        if (d / "metrics.jsonl").is_file():
            made.append(plot_losses(d / "metrics.jsonl", d / "losses.png"))
        if (d / "trajectory.csv").is_file():
            made.append(plot_trajectory(d / "trajectory.csv", d / "trajectory.png"))
        if (d / "sweep_table.csv").is_file():
            made.append(plot_sweep_table(d / "sweep_table.csv", d / "sweep_table.png"))
    if args.compare_trajectories:
        target = Path(args.compare_trajectories)
        paths = [Path(d) / "trajectory.csv" for d in args.dirs if (Path(d) / "trajectory.csv").is_file()]
        made.append(plot_trajectory(paths, target, labels=[Path(d).name for d in args.dirs]))
    for m in made:
        if m:
            print(m)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deskdistill", description="Desk-scale transformer distillation lab.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="fine-tune a teacher on a synthetic task")
    add_run_flags(p)
    p.add_argument("--epochs", type=int, default=None, help="alias of --teacher-epochs")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="two-stage distillation from a teacher checkpoint")
    add_run_flags(p)
    p.add_argument("--no-figures", action="store_true", help="skip rendering PNG figures")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("sweep", help="grid of distillation runs, best metric per variant")
    add_run_flags(p)
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2",
                   help="sweep axis; lr2/batch2 are tuned per variant, other keys define variants")
    p.add_argument("--jobs", type=int, default=1, help="cells run in parallel as subprocesses")
    p.add_argument("--no-figures", action="store_true", help="skip rendering PNG figures")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference audit of the stage-1 loss gradients")
    p.add_argument("--attn-loss", choices=("mse", "kl"))
    p.add_argument("--map", choices=("base", "random", "mean", "learnable"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--coords", type=int, default=6, help="sampled coordinates per tensor")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plot", help="re-render figures for run or sweep directories")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--compare-trajectories", metavar="PNG", help="overlay trajectory.csv of all dirs into one figure")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # any run failure maps to exit code 1
        print(f"{parser.prog}: run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
