"""Command-line entry point: train, adapt, eval, sample, verify-oracle.

Exit codes: 0 success, 2 configuration or user error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, model
from . import quadprior as qp
from .adapt import AdaptationError, ml_point
from .config import ConfigError, RunConfig
from .curvature import CurvatureError
from .metatrain import MetaTrainingError, meta_eval, meta_train, write_metrics_csv
from .model import ParamVector
from .posterior import sample_predictive, write_predictions_csv
from .tasks import Task, sinusoid, task_rng

log = logging.getLogger("hbmaml")

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 2, 3
STREAM_CLI = 7


class UserError(Exception):
    pass


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(item, "expected key=value")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip())
    return cfg


def _load_run(run_dir) -> tuple[RunConfig, ParamVector]:
    run_dir = Path(run_dir)
    meta, ckpt = run_dir / "run.meta", run_dir / "theta.ckpt"
    if not meta.exists() or not ckpt.exists():
        raise UserError(f"{run_dir}: missing run.meta or theta.ckpt (run `train` first)")
    cfg = RunConfig.parse(meta.read_text(), ignore_prefixes=("library.",))
    spec = cfg.mlp_spec()
    try:
        theta = model.load_checkpoint(ckpt, spec)
    except ValueError as err:
        raise UserError(str(err)) from None
    return cfg, theta


def _load_precond(run_dir, spec):
    path = Path(run_dir) / "precond.ckpt"
    return model.load_checkpoint(path, spec) if path.exists() else None


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.output_dir or cfg["run.output_dir"])
    cfg.set("run.output_dir", str(out))
    spec, dist, meta = cfg.mlp_spec(), cfg.task_dist(), cfg.meta_cfg()
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.meta").write_text(cfg.dump() + f"library.version = {__version__}\n")
    res = meta_train(meta, dist, spec, cfg.sub_cfg())
    write_metrics_csv(out / "metrics.csv", res.metrics)
    model.save_checkpoint(out / "theta.ckpt", res.theta)
    if res.precond is not None:
        model.save_checkpoint(out / "precond.ckpt", res.precond)
    last = [m for m in res.metrics if m["eval_metric_mean"] is not None]
    if last:
        log.info("final eval metric %.6f", last[-1]["eval_metric_mean"])
    print(out)
    return EXIT_OK


def read_task_csv(path, spec) -> Task:
    """Read one task in the ``task_id,set,input...,target`` export format."""
    sets = {"support": ([], []), "query": ([], [])}
    with open(path, newline="") as fh:
        rows = csv.DictReader(fh)
        inputs = [c for c in rows.fieldnames if c.startswith("input_")]
        if len(inputs) != spec.n_inputs or "set" not in rows.fieldnames or "target" not in rows.fieldnames:
            raise UserError(f"{path}: expected columns task_id,set,input_0..input_{spec.n_inputs - 1},target")
        for row in rows:
            if row["set"] not in sets:
                raise UserError(f"{path}: unknown set {row['set']!r}")
            xs, ys = sets[row["set"]]
            xs.append([float(row[c]) for c in inputs])
            ys.append(float(row["target"]))
    (xs, ys), (xq, yq) = sets["support"], sets["query"]
    if not xs or not xq:
        raise UserError(f"{path}: need at least one support and one query row")
    conv = (lambda v: np.asarray(v)[:, None]) if spec.likelihood == "gaussian" else (lambda v: np.asarray(v, int))
    return Task(np.asarray(xs), conv(ys), np.asarray(xq), conv(yq), {"source": str(path)})


def cmd_adapt(args) -> int:
    cfg, theta = _load_run(args.run_dir)
    spec = cfg.mlp_spec()
    if args.task_csv:
        task = read_task_csv(args.task_csv, spec)
    else:
        task = cfg.task_dist().sample(task_rng(cfg["run.seed"], STREAM_CLI, args.task_seed))
    inner = cfg.inner_cfg()
    inner.second_order = False
    res = ml_point(spec, theta, task, inner, _precond_leaves(args.run_dir, spec))
    out = Path(args.out or Path(args.run_dir) / "adapt")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task_id", "set"] + [f"input_{i}" for i in range(spec.n_inputs)] + ["target", "prediction"])
        for name, X, Y in (("support", task.x_support, task.y_support), ("query", task.x_query, task.y_query)):
            pred = model.predict(spec, res.phi_hat, X)
            pred = pred[:, 0] if spec.likelihood == "gaussian" else np.argmax(pred, axis=1)
            for x, y, p in zip(X, np.ravel(Y), pred):
                w.writerow([0, name] + [repr(float(v)) for v in x] + [repr(float(y)), repr(float(p))])
    print(f"query_nll {res.query_nll.item():.6f}")
    print(out / "predictions.csv")
    return EXIT_OK


def _precond_leaves(run_dir, spec):
    pc = _load_precond(run_dir, spec)
    return pc.leaves() if pc is not None else None


def cmd_eval(args) -> int:
    cfg, theta = _load_run(args.run_dir)
    spec = cfg.mlp_spec()
    inner = cfg.inner_cfg()
    if args.steps is not None:
        inner.K = args.steps
    summary = meta_eval(spec, theta, cfg.task_dist(), args.episodes, inner,
                        rng=task_rng(cfg["run.seed"], STREAM_CLI, 10_000 + args.eval_seed),
                        precond=_load_precond(args.run_dir, spec), adapt=not args.no_adapt)
    out = Path(args.out or Path(args.run_dir) / "eval.csv")
    ci = "NA" if np.isnan(summary.ci95) else repr(summary.ci95)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "mean", "ci95", "nll_mean", "n_tasks"])
        w.writerow([summary.metric, repr(summary.mean), ci, repr(summary.nll_mean), summary.n_tasks])
    print(f"{summary.metric} {summary.mean:.6f} +- {ci} over {summary.n_tasks} episodes")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg, theta = _load_run(args.run_dir)
    if cfg["task.kind"] != "sinusoid":
        raise UserError("sample draws predictive curves and needs a sinusoid run")
    spec = cfg.mlp_spec()
    window = tuple(args.window) if args.window else None
    if window is not None and not window[1] > window[0]:
        raise UserError(f"empty window {window}")
    dist = cfg.task_dist(window=window)
    lcfg = cfg.laplace_cfg()
    grid = np.linspace(*dist.input_range, args.grid_points)
    precond = _load_precond(args.run_dir, spec)
    draws, truth = [], {}
    for tid in range(args.tasks):
        rng = task_rng(cfg["run.seed"], STREAM_CLI, 20_000 + args.task_seed + tid)
        task = dist.sample(rng)
        d = sample_predictive(spec, theta, task, lcfg, grid, args.n_samples, args.scale, rng, task_id=tid,
                              precond=precond)
        draws.append(d)
        truth[tid] = sinusoid(grid, task.meta["amplitude"], task.meta["phase"])
    out = Path(args.out or Path(args.run_dir) / "sample")
    out.mkdir(parents=True, exist_ok=True)
    write_predictions_csv(out / "predictions.csv", draws, truth)
    print(out / "predictions.csv")
    return EXIT_OK


def oracle_sweep(max_dim: int, max_k: int, trials: int, seed: int, max_n: int = 32) -> list[dict]:
    rows = []
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        d = int(rng.integers(1, max_dim + 1))
        n = int(rng.integers(1, max_n + 1))
        k = int(rng.integers(1, max_k + 1))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", qp.ContractionWarning)
            p = qp.random_problem(rng, d, n, k)
        err = float(np.max(np.abs(qp.gd_iterate(p) - qp.map_estimate(p.X, p.y, qp.induced_q(p)))))
        rows.append({"seed": trial, "d": d, "n": n, "k": k, "alpha": p.alpha, "max_abs_err": err})
    return rows


def cmd_verify_oracle(args) -> int:
    if args.max_dim < 1 or args.max_k < 1 or args.trials < 1:
        raise UserError("--max-dim, --max-k and --trials must be positive")
    rows = oracle_sweep(args.max_dim, args.max_k, args.trials, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "d", "n", "k", "alpha", "max_abs_err"])
        for r in rows:
            w.writerow([r["seed"], r["d"], r["n"], r["k"], repr(r["alpha"]), repr(r["max_abs_err"])])
    worst = max(r["max_abs_err"] for r in rows)
    print(f"{len(rows)} problems, worst max_abs_err {worst:.3e}")
    if worst >= args.tol:
        log.error("oracle mismatch above tolerance %.1e", args.tol)
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hbmaml", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="meta-train and write metrics.csv, theta.ckpt, run.meta")
    t.add_argument("--config", help="flat 'section.key = value' file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--output-dir")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("adapt", help="adapt a trained initialisation to one task")
    a.add_argument("--run-dir", required=True)
    a.add_argument("--task-csv", help="task in the task_id,set,input...,target format")
    a.add_argument("--task-seed", type=int, default=0)
    a.add_argument("--out")
    a.set_defaults(func=cmd_adapt)

    e = sub.add_parser("eval", help="post-adaptation metric over fresh episodes")
    e.add_argument("--run-dir", required=True)
    e.add_argument("--episodes", type=int, default=600)
    e.add_argument("--steps", type=int, help="override the number of inner steps")
    e.add_argument("--eval-seed", type=int, default=0)
    e.add_argument("--no-adapt", action="store_true", help="score the initialisation without adapting")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="posterior predictive curves around the adapted parameters")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--window", type=float, nargs=2, metavar=("LO", "HI"), help="support inputs drawn from [LO, HI]")
    s.add_argument("--n-samples", type=int, default=50)
    s.add_argument("--scale", type=float, default=1.0)
    s.add_argument("--tasks", type=int, default=1)
    s.add_argument("--task-seed", type=int, default=0)
    s.add_argument("--grid-points", type=int, default=200)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sample)

    v = sub.add_parser("verify-oracle", help="check early stopping against the induced-prior MAP estimate")
    v.add_argument("--max-dim", type=int, default=8)
    v.add_argument("--max-k", type=int, default=20)
    v.add_argument("--trials", type=int, default=200)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--tol", type=float, default=1e-8)
    v.add_argument("--out", default="oracle_report.csv")
    v.set_defaults(func=cmd_verify_oracle)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USER if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USER
    except (UserError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USER
    except (MetaTrainingError, AdaptationError, CurvatureError, FloatingPointError, np.linalg.LinAlgError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
