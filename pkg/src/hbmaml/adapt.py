"""Fast adaptation by truncated gradient descent (the point-estimate subroutine)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import model
from . import numcore as nc
from .model import MlpSpec, ParamVector
from .numcore import Node
from .tasks import Task, TaskBatch, stack_tasks


class AdaptationError(FloatingPointError):
    def __init__(self, step: int, detail: str = "non-finite inner gradient"):
        self.step = step
        super().__init__(f"{detail} at inner step {step}")


@dataclass
class InnerLoopCfg:
    alpha: float = 0.01
    K: int = 5
    second_order: bool = True
    learn_precond: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.K < 1:
            raise ValueError("K must be at least 1")


@dataclass
class AdaptResult:
    spec: MlpSpec
    phi: list  # Nodes, leading task axes when batched
    query_nll: Node
    support_nll_trace: list

    @property
    def phi_hat(self) -> ParamVector:
        return ParamVector.from_arrays(self.spec, [p.value for p in self.phi])


def fast_adapt(spec: MlpSpec, theta: Sequence[Node], x_support, y_support, cfg: InnerLoopCfg,
               precond: Optional[Sequence[Node]] = None):
    """K full-batch gradient steps from ``theta`` on the support NLL.

    ``precond`` holds log-diagonal preconditioner entries shaped like the
    parameters; the step is ``alpha * exp(precond) * grad``. Returns the
    adapted parameters and the per-step support NLL trace (K + 1 entries).
    """
    lead = np.shape(x_support)[:-2]
    phi = [nc.broadcast_to(t, lead + t.shape[-2:]) for t in theta]
    scales = None if precond is None else [nc.exp(p) for p in precond]
    trace = []
    for step in range(cfg.K):
        per_task = model.nll(spec, phi, x_support, y_support)
        trace.append(np.array(per_task.value))
        if not np.all(np.isfinite(per_task.value)):
            raise AdaptationError(step, "non-finite support loss")
        grads = nc.grad(nc.sum(per_task), phi, create_graph=cfg.second_order, allow_unused=True)
        vals = [g.value if isinstance(g, Node) else g for g in grads]
        if not all(np.all(np.isfinite(v)) for v in vals):
            raise AdaptationError(step)
        if not cfg.second_order:
            grads = [nc.const(v) for v in vals]
        if scales is not None:
            grads = [nc.mul(s, g) for s, g in zip(scales, grads)]
        phi = [nc.sub(p, nc.mul(cfg.alpha, g)) for p, g in zip(phi, grads)]
    with nc.no_record():
        trace.append(np.array(model.nll(spec, phi, x_support, y_support).value))
    return phi, trace


def _as_nodes(theta) -> list:
    if isinstance(theta, ParamVector):
        return theta.leaves()
    return [nc.const(t) for t in theta]


def adapt_batch(spec: MlpSpec, theta, batch: TaskBatch, cfg: InnerLoopCfg, precond=None) -> AdaptResult:
    """ML-POINT for every task of a stacked batch; ``query_nll`` has one entry per task."""
    theta = _as_nodes(theta)
    phi, trace = fast_adapt(spec, theta, batch.x_support, batch.y_support, cfg, precond)
    query = model.nll(spec, phi, batch.x_query, batch.y_query)
    return AdaptResult(spec, phi, query, trace)


def ml_point(spec: MlpSpec, theta, task: Task, cfg: InnerLoopCfg, precond=None) -> AdaptResult:
    """Adapt to one task and return the query NLL at the adapted parameters."""
    theta = _as_nodes(theta)
    res = adapt_batch(spec, theta, stack_tasks([task]), cfg, precond)
    phi = [nc.reshape(p, p.shape[1:]) for p in res.phi]
    query = nc.reshape(res.query_nll, ())
    trace = [float(t[0]) for t in res.support_nll_trace]
    return AdaptResult(spec, phi, query, trace)
