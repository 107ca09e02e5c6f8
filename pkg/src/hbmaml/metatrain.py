"""Outer empirical-Bayes loop: sample tasks, score them, update the shared initialisation."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import model
from . import numcore as nc
from .adapt import InnerLoopCfg, adapt_batch
from .laplace import LaplaceCfg, laplace_batch
from .model import MlpSpec, ParamVector
from .tasks import TaskBatch, stack_tasks, task_rng

log = logging.getLogger(__name__)

SUBROUTINES = ("ml_point", "ml_laplace")
METRICS_HEADER = ["iteration", "meta_objective", "eval_metric_mean", "eval_metric_ci95", "wall_ms"]

# named random substreams under the run seed
STREAM_INIT = 0
STREAM_TASKS = 1
STREAM_CURVATURE = 2
STREAM_EVAL = 3


class MetaTrainingError(FloatingPointError):
    def __init__(self, iteration: int, task_stream, task_index, detail: str):
        self.iteration = iteration
        self.task_stream = task_stream
        self.task_index = task_index
        super().__init__(f"{detail} at iteration {iteration} (task stream {task_stream}, task {task_index})")


@dataclass
class MetaCfg:
    meta_batch: int = 25
    meta_lr: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iterations: int = 10000
    subroutine: str = "ml_point"
    eval_every: int = 1000
    eval_tasks: int = 100
    seed: int = 0
    workers: int = 1
    record_wall_time: bool = False
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if self.meta_batch < 1 or self.iterations < 1:
            raise ValueError("meta_batch and iterations must be at least 1")
        if self.meta_lr < 0:
            raise ValueError("meta_lr must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.subroutine not in SUBROUTINES:
            raise ValueError(f"unknown subroutine {self.subroutine!r}")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")


class Adam:
    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return x - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        return x - self.lr * g


def clip_by_norm(g: np.ndarray, max_norm: Optional[float]) -> np.ndarray:
    """Rescale ``g`` onto the ball of radius ``max_norm`` (no-op when ``None``).

    Guards the outer step against the rare task whose inner loop diverges
    once the meta-learned initialisation has become sharp.
    """
    if max_norm is None:
        return g
    norm = float(np.linalg.norm(g))
    return g * (max_norm / norm) if norm > max_norm else g


def make_optimizer(cfg: MetaCfg):
    if cfg.optimizer == "sgd":
        return SGD(cfg.meta_lr)
    return Adam(cfg.meta_lr, cfg.beta1, cfg.beta2, cfg.eps)


def _split_theta(spec: MlpSpec, flat: np.ndarray, learn_precond: bool):
    n = spec.n_params
    theta = ParamVector(spec, flat[:n])
    precond = ParamVector(spec, flat[n:]) if learn_precond else None
    return theta, precond


def task_objectives(spec: MlpSpec, theta: ParamVector, batch: TaskBatch, sub_cfg, subroutine: str,
                    rng=None, precond: Optional[ParamVector] = None, with_grad: bool = True):
    """Per-task objective values and the gradient of their sum.

    The gradient covers ``theta`` followed by the log-preconditioner when one
    is given.
    """
    leaves = theta.leaves()
    pleaves = precond.leaves() if precond is not None else None
    if subroutine == "ml_point":
        values = adapt_batch(spec, leaves, batch, sub_cfg, pleaves).query_nll
    else:
        values = laplace_batch(spec, leaves, batch, sub_cfg, rng, pleaves)[0]
    if not with_grad:
        return values.value, None
    wrt = leaves + (pleaves or [])
    grads = nc.grad(nc.sum(values), wrt, allow_unused=True)
    return values.value, np.concatenate([g.ravel() for g in grads])


def _inner_cfg(sub_cfg) -> InnerLoopCfg:
    return sub_cfg.inner if isinstance(sub_cfg, LaplaceCfg) else sub_cfg


@dataclass
class EvalSummary:
    metric: str
    mean: float
    ci95: float
    nll_mean: float
    n_tasks: int
    per_task: np.ndarray = field(repr=False, default=None)


def summarize(values, metric: str, nll) -> EvalSummary:
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    ci = 1.96 * values.std(ddof=1) / math.sqrt(n) if n > 1 else float("nan")
    return EvalSummary(metric, float(values.mean()), float(ci), float(np.mean(nll)), n, values)


def evaluate_batch(spec: MlpSpec, theta, batch: TaskBatch, inner: InnerLoopCfg, precond=None, adapt: bool = True):
    """Post-adaptation query metric and NLL for each task of a stacked batch."""
    if isinstance(theta, ParamVector):
        theta = theta.arrays()
    cfg = InnerLoopCfg(alpha=inner.alpha, K=inner.K, second_order=False)
    leaves = [nc.leaf(a) for a in theta]
    if adapt:
        pleaves = precond.leaves() if precond is not None else None
        res = adapt_batch(spec, leaves, batch, cfg, pleaves)
        phi = [p.value for p in res.phi]
        nll = res.query_nll.value
    else:
        phi = [np.broadcast_to(a, (len(batch),) + a.shape) for a in theta]
        with nc.no_record():
            nll = model.nll(spec, [nc.const(p) for p in phi], batch.x_query, batch.y_query).value
    out = model.predict(spec, phi, batch.x_query)
    if spec.likelihood == "gaussian":
        metric = model.squared_error(out, batch.y_query)
    else:
        metric = model.accuracy(out, batch.y_query)
    return metric, nll


def meta_eval(spec: MlpSpec, theta, task_dist, n_tasks: int, inner: InnerLoopCfg, rng=None, seed: int = 0,
              precond=None, adapt: bool = True, chunk: int = 100, tasks=None) -> EvalSummary:
    """Mean and 95% half-width of the post-adaptation query metric.

    The metric is mean squared error for regression and accuracy for
    classification. ``ci95`` is NaN when only one task is evaluated.
    """
    if n_tasks < 1:
        raise ValueError("n_tasks must be at least 1")
    if tasks is None:
        rng = rng if rng is not None else task_rng(seed, STREAM_EVAL, 0)
        tasks = [task_dist.sample(rng) for _ in range(n_tasks)]
    metrics, nlls = [], []
    for start in range(0, len(tasks), chunk):
        m, l = evaluate_batch(spec, theta, stack_tasks(tasks[start : start + chunk]), inner, precond, adapt)
        metrics.append(m)
        nlls.append(l)
    name = "mse" if spec.likelihood == "gaussian" else "accuracy"
    return summarize(np.concatenate(metrics), name, np.concatenate(nlls))


@dataclass
class MetaResult:
    theta: ParamVector
    precond: Optional[ParamVector]
    metrics: list


def _objective_and_grad(spec, flat, batch, sub_cfg, cfg: MetaCfg, rng_seed, pool):
    learn = _inner_cfg(sub_cfg).learn_precond
    theta, precond = _split_theta(spec, flat, learn)
    J = len(batch)
    if pool is None or J == 1:
        rng = np.random.default_rng(rng_seed)
        return task_objectives(spec, theta, batch, sub_cfg, cfg.subroutine, rng, precond)
    bounds = np.linspace(0, J, min(cfg.workers, J) + 1).astype(int)
    chunks = [np.arange(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]

    def run(i):
        rng = np.random.default_rng(list(rng_seed) + [i])
        return task_objectives(spec, theta, batch.select(chunks[i]), sub_cfg, cfg.subroutine, rng, precond)

    results = list(pool.map(run, range(len(chunks))))
    values = np.concatenate([r[0] for r in results])
    grad = results[0][1].copy()
    for r in results[1:]:
        grad += r[1]
    return values, grad


def meta_train(cfg: MetaCfg, task_dist, spec: MlpSpec, sub_cfg, theta0: Optional[ParamVector] = None,
               eval_tasks=None, callback: Optional[Callable] = None) -> MetaResult:
    """Run the outer loop; deterministic given ``cfg.seed``.

    ``sub_cfg`` is an :class:`InnerLoopCfg` for ``ml_point`` or a
    :class:`LaplaceCfg` for ``ml_laplace``.
    """
    if cfg.subroutine == "ml_laplace" and not isinstance(sub_cfg, LaplaceCfg):
        raise TypeError("ml_laplace needs a LaplaceCfg")
    if cfg.subroutine == "ml_point" and isinstance(sub_cfg, LaplaceCfg):
        sub_cfg = sub_cfg.inner
    inner = _inner_cfg(sub_cfg)
    theta = theta0 if theta0 is not None else model.init_params(spec, task_rng(cfg.seed, STREAM_INIT, 0))
    flat = theta.flat.copy()
    if inner.learn_precond:
        flat = np.concatenate([flat, np.zeros(spec.n_params)])
    if eval_tasks is None and cfg.eval_every > 0:
        erng = task_rng(cfg.seed, STREAM_EVAL, 0)
        eval_tasks = [task_dist.sample(erng) for _ in range(cfg.eval_tasks)]
    opt = make_optimizer(cfg)
    metrics = []
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    start = time.perf_counter()

    def evaluate(flat_now):
        th, pc = _split_theta(spec, flat_now, inner.learn_precond)
        return meta_eval(spec, th, task_dist, len(eval_tasks), inner, precond=pc, tasks=eval_tasks)

    def record(it, objective, summary):
        row = {"iteration": it, "meta_objective": objective,
               "eval_metric_mean": summary.mean if summary else None,
               "eval_metric_ci95": summary.ci95 if summary else None,
               "wall_ms": (time.perf_counter() - start) * 1000.0 if cfg.record_wall_time else None}
        metrics.append(row)
        if callback is not None:
            callback(row)

    try:
        record(0, None, evaluate(flat) if eval_tasks else None)
        for it in range(1, cfg.iterations + 1):
            trng = task_rng(cfg.seed, STREAM_TASKS, it)
            batch = stack_tasks([task_dist.sample(trng) for _ in range(cfg.meta_batch)])
            stream = (cfg.seed, STREAM_CURVATURE, it)
            try:
                values, grad = _objective_and_grad(spec, flat, batch, sub_cfg, cfg, stream, pool)
            except (FloatingPointError, np.linalg.LinAlgError, ValueError) as err:
                raise MetaTrainingError(it, [cfg.seed, STREAM_TASKS, it], None, str(err)) from err
            if not np.all(np.isfinite(values)) or not np.all(np.isfinite(grad)):
                bad = np.flatnonzero(~np.isfinite(values))
                idx = int(bad[0]) if bad.size else None
                raise MetaTrainingError(it, [cfg.seed, STREAM_TASKS, it], idx, "non-finite meta-gradient")
            flat = opt.step(flat, clip_by_norm(grad, cfg.clip_norm))
            summary = None
            if eval_tasks and (it % cfg.eval_every == 0 or it == cfg.iterations):
                summary = evaluate(flat)
                log.info("iter %d objective %.5f eval %s %.5f", it, float(values.sum()), summary.metric, summary.mean)
            record(it, float(values.sum()), summary)
    finally:
        if pool is not None:
            pool.shutdown()
    theta, precond = _split_theta(spec, flat, inner.learn_precond)
    return MetaResult(theta, precond, metrics)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float) and math.isnan(v):
        return "NA"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_metrics_csv(path, metrics: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in metrics:
            w.writerow([_fmt(row[k]) for k in METRICS_HEADER])
