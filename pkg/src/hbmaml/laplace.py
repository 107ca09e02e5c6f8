"""Laplace-approximated task objective: query NLL plus a weighted log-determinant.

The curvature ``H`` is taken at the adapted parameters on the support set,
plus a diagonal prior precision ``tau``. In K-FAC mode ``tau`` cannot be added
exactly inside the Kronecker family, so ``sqrt(tau)`` is added to the
diagonal of both factors of every layer; their product then carries ``tau``
on the diagonal, plus cross terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .adapt import InnerLoopCfg, adapt_batch, _as_nodes
from .curvature import CurvatureError, dense_ggn_node, kfac_factors, kfac_logdet_nodes
from .model import MlpSpec
from .numcore import Node
from .tasks import Task, TaskBatch, stack_tasks

CURVATURE_MODES = ("kfac", "dense")


@dataclass
class LaplaceCfg:
    tau: float = 0.001
    eta: float = 1e-6
    curvature_mode: str = "kfac"
    inner: InnerLoopCfg = field(default_factory=InnerLoopCfg)
    damping: float = 0.0
    fisher: str = "true"
    detach_logdet: bool = False

    def __post_init__(self):
        if self.tau < 0 or self.eta < 0 or self.damping < 0:
            raise ValueError("tau, eta and damping must be non-negative")
        if self.curvature_mode not in CURVATURE_MODES:
            raise ValueError(f"unknown curvature mode {self.curvature_mode!r}")

    def factor_damping(self) -> float:
        return self.damping + float(np.sqrt(self.tau))

    def dense_damping(self) -> float:
        return self.damping + self.tau


def curvature_logdet(spec: MlpSpec, phi, X, Y, cfg: LaplaceCfg, rng) -> Node:
    """``logdet(H + tau I)`` for each task, as a graph node."""
    if cfg.curvature_mode == "kfac":
        A, G = kfac_factors(spec, phi, X, cfg.factor_damping(), rng, cfg.fisher, Y)
        return kfac_logdet_nodes(A, G)
    H = dense_ggn_node(spec, phi, X, cfg.dense_damping())
    return nc.logdet(H)


def laplace_batch(spec: MlpSpec, theta, batch: TaskBatch, cfg: LaplaceCfg, rng=None, precond=None):
    """Per-task ML-LAPLACE values (shape ``(J,)``) and the underlying adaptation."""
    theta = _as_nodes(theta)
    res = adapt_batch(spec, theta, batch, cfg.inner, precond)
    if cfg.eta == 0:
        return res.query_nll, res
    differentiable = cfg.inner.second_order and not cfg.detach_logdet
    phi = res.phi if differentiable else [nc.const(p.value) for p in res.phi]
    try:
        logdet = curvature_logdet(spec, phi, batch.x_support, batch.y_support, cfg, rng)
    except (CurvatureError, nc.NotPositiveDefiniteError) as err:
        raise CurvatureError(f"curvature failed for tasks {[m.get('task_id') for m in batch.metas]}: {err}") from err
    return nc.add(res.query_nll, nc.mul(cfg.eta, logdet)), res


def ml_laplace(spec: MlpSpec, theta, task: Task, cfg: LaplaceCfg, rng=None, precond=None) -> Node:
    values, _ = laplace_batch(spec, theta, stack_tasks([task]), cfg, rng, precond)
    return nc.reshape(values, ())


def laplace_marginal_nll(values) -> float | Node:
    """Sum of per-task values in the given order."""
    values = list(values)
    if not values:
        raise ValueError("need at least one task")
    if all(isinstance(v, Node) for v in values):
        total = values[0]
        for v in values[1:]:
            total = nc.add(total, v)
        return total
    total = 0.0
    for v in values:
        total += float(v.value if isinstance(v, Node) else v)
    return total
