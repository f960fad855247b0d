"""``coral`` command line: train, gen-tasks, eval-correspondence, analyze-correlation, export-plots.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiment as ex
from .errors import ConfigError, CoralError, FormatError, NumericalFailure
from .matching import dense_pseudo_gt, pearson_r
from .model import load_checkpoint
from .synthetic import WARP_KINDS, export_task, generate_task, import_task

log = logging.getLogger("coral")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
REPORT_SCHEMA = "coral.eval/1"
CORRELATION_SCHEMA = "coral.correlation/1"
PLOTS_SCHEMA = "coral.plots/1"

PLOTS_JSON_SCHEMA = {
    "type": "object",
    "required": ["schema", "runs", "files"],
    "properties": {
        "schema": {"const": PLOTS_SCHEMA},
        "runs": {"type": "array", "minItems": 1, "items": {"type": "string"}},
        "files": {
            "type": "object",
            "required": ["pck_vs_step", "entropy_vs_step", "ablation_bars"],
            "additionalProperties": {"type": "string"},
        },
        "final": {"type": "object"},
    },
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _grid(value: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in value.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError("grid must look like 8x8") from None
    return h, w


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="coral", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train the toy diptych model")
    t.add_argument("--config", choices=sorted(ex.ABLATION), help="start from an ablation preset")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--lambda-corr", type=float)
    t.add_argument("--lambda-ent", type=float)
    t.add_argument("--lambda-repa", type=float)
    t.add_argument("--gamma", type=float)
    t.add_argument("--alpha", type=float)
    t.add_argument("--pose-mode", choices=("token", "channel", "none"))
    t.add_argument("--renormalize-subattention", type=_on_off, metavar="{on,off}")
    t.add_argument("--tasks", type=int, help="held-out evaluation tasks")
    t.add_argument("--noise", type=float, help="descriptor noise of training tasks")
    t.add_argument("--grid", type=_grid)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-schedule", choices=("constant", "cosine"))
    t.add_argument("--eval-every", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--resume", type=Path, metavar="CKPT")
    t.add_argument("--out", type=Path, required=True, metavar="DIR")

    g = sub.add_parser("gen-tasks", help="write synthetic tasks as CORD files plus manifests")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tasks", type=int, default=8)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--grid", type=_grid, default=(16, 16))
    g.add_argument("--channels", type=int, default=4)
    g.add_argument("--density", type=float, default=0.5)
    g.add_argument("--warp", choices=WARP_KINDS, default="permutation")
    g.add_argument("--out", type=Path, required=True, metavar="DIR")

    e = sub.add_parser("eval-correspondence", help="PCK and entropy of attention-derived matches")
    e.add_argument("checkpoint", type=Path)
    e.add_argument("--task-dir", type=Path, help="evaluate tasks written by gen-tasks instead of generating them")
    e.add_argument("--seed", type=int)
    e.add_argument("--tasks", type=int)
    e.add_argument("--noise", type=float, help="descriptor noise of generated evaluation tasks")
    e.add_argument("--gamma", type=float)
    e.add_argument("--alpha", type=float)
    e.add_argument("--timesteps", type=float, nargs="+")
    e.add_argument("--oracle", action="store_true", help="replace attention by one-hot truth (sanity check)")
    e.add_argument("--out", type=Path, required=True, metavar="DIR")

    c = sub.add_parser("analyze-correlation", help="Pearson r between per-sample PCK and a quality proxy")
    src = c.add_mutually_exclusive_group(required=True)
    src.add_argument("--report", type=Path, help="report.json from eval-correspondence")
    src.add_argument("--csv", type=Path, help="CSV with 'pck' and 'quality' columns")
    c.add_argument("--alpha", type=float, help="which PCK column of the report to use")
    c.add_argument("--permutations", type=int, default=2000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", type=Path, required=True, metavar="DIR")

    x = sub.add_parser("export-plots", help="plot-ready CSV/JSON series from run directories")
    x.add_argument("runs", type=Path, nargs="+")
    x.add_argument("--out", type=Path, required=True, metavar="DIR")
    return p


# ---------------------------------------------------------------- train


_TRAIN_FLAGS = {
    "seed": "seed", "steps": "steps", "lambda_corr": "lambda_corr", "lambda_ent": "lambda_ent",
    "lambda_repa": "lambda_repa", "gamma": "gamma", "alpha": "alpha", "pose_mode": "pose_mode",
    "renormalize_subattention": "renormalize", "tasks": "tasks", "noise": "noise", "grid": "grid",
    "batch": "batch", "lr": "lr", "lr_schedule": "lr_schedule", "eval_every": "eval_every", "checkpoint_every": "checkpoint_every",
}


def run_config_from_args(args) -> ex.RunConfig:
    cfg = ex.ablation_config(args.config) if args.config else ex.RunConfig()
    if args.resume is not None:
        run_dir = args.resume.parent
        if (run_dir / "config.json").exists():
            cfg = ex.load_run_config(run_dir)
    overrides = {field: getattr(args, flag) for flag, field in _TRAIN_FLAGS.items() if getattr(args, flag) is not None}
    cfg = replace(cfg, **overrides)
    if cfg.steps < 0 or cfg.batch < 1 or cfg.tasks < 1 or cfg.eval_every < 1:
        raise UsageError("steps must be >= 0 and batch, tasks, eval-every >= 1")
    return cfg


def cmd_train(args) -> int:
    cfg = run_config_from_args(args)
    cfg.weights  # validates the lambdas
    cfg.model_config()
    out = ex.train(cfg, args.out, resume=args.resume)
    print(out)
    return EXIT_OK


# ---------------------------------------------------------------- tasks


def cmd_gen_tasks(args) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    for i in range(args.tasks):
        task = generate_task(args.seed + i, args.grid, args.warp, args.noise, args.density, args.channels)
        export_task(task, args.out / f"task_{i:04d}")
    print(args.out)
    return EXIT_OK


def _imported_tasks(directory: Path, cfg: ex.RunConfig) -> list:
    dirs = sorted(d for d in directory.iterdir() if (d / "manifest.json").exists())
    if not dirs:
        raise FormatError(f"no task manifests under {directory}")
    tasks = []
    for d in dirs:
        task = import_task(d)
        if task.shape != tuple(cfg.grid) or task.garment.shape[2] != cfg.channels:
            raise FormatError(f"{d} has grid {task.shape}x{task.garment.shape[2]}, model expects {cfg.grid}x{cfg.channels}")
        pgt, rel = dense_pseudo_gt(task.person_desc, task.garment_desc, task.person_mask, task.garment_mask, cfg.gamma)
        tasks.append(ex.PreparedTask(task, pgt, rel))
    return tasks


# ---------------------------------------------------------------- eval


def _eval_config(args, model) -> ex.RunConfig:
    run_dir = args.checkpoint.parent
    cfg = ex.load_run_config(run_dir) if (run_dir / "config.json").exists() else ex.RunConfig()
    mc = model.config
    cfg = replace(cfg, grid=(mc.height, mc.width), channels=mc.channels)
    kw = {"seed": args.seed, "tasks": args.tasks, "eval_noise": args.noise, "gamma": args.gamma, "alpha": args.alpha}
    cfg = replace(cfg, **{k: v for k, v in kw.items() if v is not None})
    if args.timesteps:
        if not all(0.0 <= t <= 1.0 for t in args.timesteps):
            raise UsageError("timesteps must lie in [0, 1]")
        cfg = replace(cfg, eval_timesteps=tuple(args.timesteps))
    return cfg


def cmd_eval(args) -> int:
    model, _, step, _ = load_checkpoint(args.checkpoint)
    cfg = _eval_config(args, model)
    tasks = _imported_tasks(args.task_dir, cfg) if args.task_dir else ex.eval_tasks(cfg)
    alphas = tuple(sorted(set(ex.EVAL_ALPHAS) | {float(cfg.alpha)}))
    res = ex.evaluate(model, cfg, tasks, alphas=alphas, oracle=args.oracle, per_query=True)
    report = {
        "schema": REPORT_SCHEMA,
        "checkpoint": str(args.checkpoint),
        "step": step,
        "oracle": args.oracle,
        "gamma": cfg.gamma,
        "alpha": cfg.alpha,
        "timesteps": list(cfg.eval_timesteps),
        "pck": {_key(a): v for a, v in res.pck.items()},
        "mean_entropy": res.entropy,
        "velocity": res.velocity,
        "chance_pck": {_key(a): float(np.mean([s["chance"][a] for s in res.per_sample])) for a in alphas},
        "samples": [
            {**s, "pck": {_key(a): v for a, v in s["pck"].items()},
             "chance": {_key(a): v for a, v in s["chance"].items()}}
            for s in res.per_sample
        ],
    }
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    with open(args.out / "per_query.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ex.PER_QUERY_COLUMNS)
        w.writerows(res.per_query)
    print(f"pck@{cfg.alpha:g} {res.pck[float(cfg.alpha)]:.4f}  entropy {res.entropy:.4f}  "
          f"chance {report['chance_pck'][_key(cfg.alpha)]:.4f}")
    return EXIT_OK


def _key(alpha) -> str:
    return f"{float(alpha):g}"


def read_report(path: Path) -> dict:
    try:
        report = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read report {path}: {exc}") from None
    if report.get("schema") != REPORT_SCHEMA or not isinstance(report.get("samples"), list):
        raise FormatError(f"{path} is not an eval-correspondence report")
    return report


# ---------------------------------------------------------------- correlation


def correlation_test(x, y, permutations: int = 2000, seed: int = 0) -> dict:
    """Pearson r with one-sided (r < 0) and two-sided permutation p-values."""
    from scipy import stats

    x, y = np.asarray(x, float), np.asarray(y, float)
    r = pearson_r(x, y)

    def stat(a):
        return pearson_r(a, y)

    kw = dict(permutation_type="pairings", n_resamples=permutations, random_state=seed, vectorized=False)
    less = stats.permutation_test((x,), stat, alternative="less", **kw).pvalue
    both = stats.permutation_test((x,), stat, alternative="two-sided", **kw).pvalue
    return {"n": int(len(x)), "r": float(r), "p_less": float(less), "p_two_sided": float(both),
            "permutations": int(permutations)}


def cmd_correlation(args) -> int:
    if args.report:
        report = read_report(args.report)
        alpha = _key(args.alpha if args.alpha is not None else report["alpha"])
        try:
            x = [s["pck"][alpha] for s in report["samples"]]
        except KeyError:
            raise UsageError(f"report has no PCK column for alpha={alpha}") from None
        y = [s["velocity"] for s in report["samples"]]
    else:
        try:
            with open(args.csv, newline="") as fh:
                rows = list(csv.DictReader(fh))
            x = [float(r["pck"]) for r in rows]
            y = [float(r["quality"]) for r in rows]
        except (OSError, KeyError, ValueError) as exc:
            raise FormatError(f"cannot read {args.csv}: {exc}") from None
    if args.permutations < 1:
        raise UsageError("--permutations must be >= 1")
    result = correlation_test(x, y, args.permutations, args.seed)
    result["schema"] = CORRELATION_SCHEMA
    result["quality_proxy"] = "held-out velocity loss" if args.report else "quality column"
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "scatter.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("pck", "quality"))
        w.writerows((repr(float(a)), repr(float(b))) for a, b in zip(x, y))
    (args.out / "correlation.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    print(f"r {result['r']:.4f}  p(r<0) {result['p_less']:.4g}  n {result['n']}")
    return EXIT_OK


# ---------------------------------------------------------------- plots


def export_plots(runs: list, out: Path) -> dict:
    """Write pck_vs_step.csv, entropy_vs_step.csv, ablation_bars.csv and bundle.json."""
    series = {}
    for run in runs:
        run = Path(run)
        if not (run / "metrics.csv").exists():
            raise FormatError(f"{run} has no metrics.csv")
        rows = ex.read_metrics(run)
        if not rows:
            raise FormatError(f"{run} has no evaluation rows")
        series[run.name] = rows
    if len(series) != len(runs):
        raise UsageError("run directories must have distinct names")
    out.mkdir(parents=True, exist_ok=True)
    names = sorted(series)

    def fmt(v):
        return repr(float(v))

    with open(out / "pck_vs_step.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("run", "step", "pck_a1", "pck_a2", "pck_a4"))
        for n in names:
            for r in series[n]:
                w.writerow((n, int(r["step"]), fmt(r["pck_a1"]), fmt(r["pck_a2"]), fmt(r["pck_a4"])))
    with open(out / "entropy_vs_step.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("run", "step", "mean_entropy"))
        for n in names:
            for r in series[n]:
                w.writerow((n, int(r["step"]), fmt(r["mean_entropy"])))
    final = {n: series[n][-1] for n in names}
    with open(out / "ablation_bars.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("run", "step", "pck_a2", "mean_entropy", "velocity"))
        for n in names:
            f = final[n]
            w.writerow((n, int(f["step"]), fmt(f["pck_a2"]), fmt(f["mean_entropy"]), fmt(f["velocity"])))
    bundle = {
        "schema": PLOTS_SCHEMA,
        "runs": names,
        "files": {"pck_vs_step": "pck_vs_step.csv", "entropy_vs_step": "entropy_vs_step.csv",
                  "ablation_bars": "ablation_bars.csv"},
        "final": {n: {k: final[n][k] for k in ex.METRIC_COLUMNS} for n in names},
    }
    validate_bundle(bundle)
    (out / "bundle.json").write_text(json.dumps(bundle, indent=1, sort_keys=True) + "\n")
    return bundle


def validate_bundle(bundle: dict) -> None:
    import jsonschema

    try:
        jsonschema.validate(bundle, PLOTS_JSON_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise FormatError(f"bad plot bundle: {exc.message}") from None


def cmd_export_plots(args) -> int:
    export_plots(args.runs, args.out)
    print(args.out)
    return EXIT_OK


# ---------------------------------------------------------------- entry point


COMMANDS = {
    "train": cmd_train,
    "gen-tasks": cmd_gen_tasks,
    "eval-correspondence": cmd_eval,
    "analyze-correlation": cmd_correlation,
    "export-plots": cmd_export_plots,
}


def _thread_limit():
    value = os.environ.get("CORAL_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"CORAL_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise UsageError("CORAL_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except NumericalFailure as exc:
        print(f"coral: numerical failure: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostics, sort_keys=True), file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, ConfigError) as exc:
        print(f"coral: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CoralError, OSError, ValueError) as exc:
        print(f"coral: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
