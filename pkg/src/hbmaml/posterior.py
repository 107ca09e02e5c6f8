"""Sampling task-specific parameters around the adapted point and mapping them to curves."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import model
from .adapt import InnerLoopCfg, ml_point
from .curvature import dense_ggn, dense_sample, kfac_estimate, kfac_sample
from .laplace import LaplaceCfg
from .model import MlpSpec, ParamVector
from .tasks import Task


@dataclass
class PosteriorDraws:
    task_id: int
    n_samples: int
    grid: np.ndarray
    curves: np.ndarray  # (n_samples, len(grid), n_out)
    point: np.ndarray  # prediction of the adapted parameters
    phi_samples: Optional[np.ndarray] = field(default=None, repr=False)

    def predictive_std(self) -> np.ndarray:
        """Across-sample standard deviation at each grid input (first output)."""
        return self.curves[..., 0].std(axis=0)

    def mean_std_over(self, lo: float, hi: float) -> float:
        x = self.grid[:, 0]
        mask = (x >= lo) & (x <= hi)
        if not mask.any():
            raise ValueError(f"no grid points in [{lo}, {hi}]")
        return float(self.predictive_std()[mask].mean())


def unflatten_batch(spec: MlpSpec, flat: np.ndarray) -> list[np.ndarray]:
    """Split ``(n, P)`` flat draws into per-layer arrays with a leading sample axis."""
    out, pos = [], 0
    n = flat.shape[0]
    for shape in spec.shapes():
        size = int(np.prod(shape))
        out.append(flat[:, pos : pos + size].reshape((n,) + shape))
        pos += size
    return out


def sample_predictive(spec: MlpSpec, theta: ParamVector, task: Task, cfg: LaplaceCfg, grid, n_samples: int,
                      scale: float, rng: np.random.Generator, task_id: int = 0,
                      keep_params: bool = False, precond=None) -> PosteriorDraws:
    """Adapt to ``task``, then draw parameters from ``N(phi_hat, scale^2 (H + tau I)^{-1})``.

    ``precond`` is the learned log-diagonal preconditioner, if the run has one.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim == 1:
        grid = grid[:, None]
    if grid.shape[0] < 1:
        raise ValueError("empty grid")
    inner = InnerLoopCfg(alpha=cfg.inner.alpha, K=cfg.inner.K, second_order=False)
    if precond is not None and isinstance(precond, ParamVector):
        precond = precond.leaves()
    phi_hat = ml_point(spec, theta, task, inner, precond).phi_hat
    if cfg.curvature_mode == "kfac":
        state = kfac_estimate(spec, phi_hat, task.x_support, cfg.factor_damping(), rng, cfg.fisher, task.y_support)
        flat = kfac_sample(state, phi_hat, scale, rng, n=n_samples)
    else:
        H = dense_ggn(spec, phi_hat, task.x_support, cfg.dense_damping()).H
        flat = dense_sample(H, phi_hat, scale, rng, n=n_samples)
    params = unflatten_batch(spec, flat)
    curves = model.predict(spec, params, np.broadcast_to(grid, (n_samples,) + grid.shape))
    point = model.predict(spec, phi_hat, grid)
    return PosteriorDraws(task_id, n_samples, grid, curves, point, flat if keep_params else None)


def write_predictions_csv(path, draws_list, truth=None) -> None:
    """Rows ``task_id,sample_id,x,y``.

    ``sample_id`` -1 marks the adapted point estimate and -2 the ground
    truth (when ``truth`` maps task ids to true curve values on the grid).
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task_id", "sample_id", "x", "y"])
        for d in draws_list:
            xs = d.grid[:, 0]
            for x, y in zip(xs, d.point[:, 0]):
                w.writerow([d.task_id, -1, repr(float(x)), repr(float(y))])
            if truth is not None and d.task_id in truth:
                for x, y in zip(xs, np.ravel(truth[d.task_id])):
                    w.writerow([d.task_id, -2, repr(float(x)), repr(float(y))])
            for s in range(d.n_samples):
                for x, y in zip(xs, d.curves[s, :, 0]):
                    w.writerow([d.task_id, s, repr(float(x)), repr(float(y))])
