"""Curvature at adapted parameters: dense Gauss-Newton and K-FAC.

Block layout: layer ``l`` owns the ``(fan_in + 1) x fan_out`` matrix
``[W; b]`` vectorised row-major, so its Fisher block is approximated by
``kron(A_l, G_l)`` with ``A_l = E[a_bar a_bar^T]`` and ``G_l = E[g g^T]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import model
from . import numcore as nc
from .model import MlpSpec, ParamVector
from .numcore import Node, NotPositiveDefiniteError

DENSE_PARAM_LIMIT = 2000
FISHER_KINDS = ("true", "empirical")


class CurvatureError(ValueError):
    pass


@dataclass
class KfacState:
    A: list  # damped activation factors, arrays (leading task axes allowed)
    G: list  # damped backprop factors
    damping: float
    sample_count: int
    A_nodes: Optional[list] = None
    G_nodes: Optional[list] = None

    def dims(self) -> list[tuple[int, int]]:
        return [(a.shape[-1], g.shape[-1]) for a, g in zip(self.A, self.G)]


@dataclass
class DenseCurvature:
    H: np.ndarray
    node: Optional[Node] = None


def _as_nodes(params) -> list:
    if isinstance(params, ParamVector):
        return [nc.const(a) for a in params.arrays()]
    return [nc.const(p) for p in params]


def _output_gradient(spec: MlpSpec, output: Node, rng, fisher: str, Y=None) -> Node:
    """Gradient of the per-example NLL w.r.t. the network output.

    ``true``: targets drawn from the model's own predictive distribution.
    ``empirical``: the observed targets ``Y``.
    """
    if fisher not in FISHER_KINDS:
        raise ValueError(f"unknown Fisher kind {fisher!r}")
    if spec.likelihood == "gaussian":
        if fisher == "true":
            return nc.const(-rng.standard_normal(output.shape))
        return nc.sub(output, np.asarray(Y, dtype=np.float64))
    logp = nc.sub(output, nc.logsumexp(output, axis=-1))
    p = nc.exp(logp)
    if fisher == "true":
        cdf = np.cumsum(p.value, axis=-1)
        u = rng.random(output.shape[:-1] + (1,))
        labels = np.minimum((u > cdf).sum(axis=-1), spec.n_outputs - 1)
    else:
        labels = np.asarray(Y)
    return nc.sub(p, model.one_hot(labels, spec.n_outputs))


def _eye_like(n: int) -> np.ndarray:
    return np.eye(n)


def kfac_factors(spec: MlpSpec, params, X, damping: float, rng=None, fisher: str = "true", Y=None):
    """Differentiable damped K-FAC factors ``(A_nodes, G_nodes)``."""
    if damping < 0:
        raise ValueError("damping must be non-negative")
    params = _as_nodes(params)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim < 2 or X.shape[-2] < 1:
        raise CurvatureError("curvature needs a non-empty batch")
    if fisher == "true" and rng is None:
        raise ValueError("true-Fisher curvature needs an rng for sampled targets")
    output, inputs, pre = model.forward_trace(spec, params, X)
    out_grad = _output_gradient(spec, output, rng, fisher, Y)
    n = X.shape[-2]
    A_nodes, G_nodes = [], []
    for layer, (a_bar, delta) in enumerate(model.backprop_signals(spec, params, inputs, pre, out_grad)):
        A = nc.add(nc.mul(nc.matmul(nc.swap_last(a_bar), a_bar), 1.0 / n), damping * _eye_like(a_bar.shape[-1]))
        G = nc.add(nc.mul(nc.matmul(nc.swap_last(delta), delta), 1.0 / n), damping * _eye_like(delta.shape[-1]))
        for name, f in (("A", A), ("G", G)):
            if not np.all(np.isfinite(f.value)):
                raise CurvatureError(f"non-finite {name} factor in layer {layer}")
            _require_pd(f.value, f"{name} factor of layer {layer}")
        A_nodes.append(A)
        G_nodes.append(G)
    return A_nodes, G_nodes


def _require_pd(a: np.ndarray, what: str):
    lo = float(np.linalg.eigvalsh(a).min())
    if not lo > 0:
        err = CurvatureError(f"{what} is not positive definite (smallest eigenvalue {lo:.3e}); increase damping")
        err.min_eig = lo
        raise err


def kfac_estimate(spec: MlpSpec, phi_hat, X, damping: float = 1e-3, rng=None, fisher: str = "true",
                  Y=None) -> KfacState:
    A, G = kfac_factors(spec, phi_hat, X, damping, rng, fisher, Y)
    return KfacState([a.value for a in A], [g.value for g in G], damping, int(np.shape(X)[-2]), A, G)


def kfac_logdet_nodes(A_nodes: Sequence[Node], G_nodes: Sequence[Node]) -> Node:
    """``sum_l dim(G_l) logdet(A_l) + dim(A_l) logdet(G_l)`` as a graph node."""
    total = None
    for A, G in zip(A_nodes, G_nodes):
        term = nc.add(nc.mul(float(G.shape[-1]), nc.logdet(A)), nc.mul(float(A.shape[-1]), nc.logdet(G)))
        total = term if total is None else nc.add(total, term)
    return total


def kfac_logdet(state: KfacState):
    out = 0.0
    for A, G in zip(state.A, state.G):
        out = out + G.shape[-1] * _logdet(A) + A.shape[-1] * _logdet(G)
    return float(out) if np.ndim(out) == 0 else out


def _logdet(a: np.ndarray):
    try:
        return nc._logdet_batched(a)
    except NotPositiveDefiniteError as err:
        raise CurvatureError(f"factor is not positive definite: {err}") from err


def assemble_dense(state: KfacState) -> np.ndarray:
    """Block-diagonal matrix of ``kron(A_l, G_l)``; unbatched states only."""
    return nc.block_diag([nc.kron(A, G) for A, G in zip(state.A, state.G)])


def per_example_jacobian(spec: MlpSpec, params, X, out_grad: Node) -> Node:
    """Rows ``J_n^T out_grad_n`` over the flat parameter layout, shape ``(..., N, P)``."""
    params = _as_nodes(params)
    output, inputs, pre = model.forward_trace(spec, params, X)
    blocks = []
    for a_bar, delta in model.backprop_signals(spec, params, inputs, pre, out_grad):
        lead = a_bar.shape[:-1]
        outer = nc.mul(nc.reshape(a_bar, lead + (a_bar.shape[-1], 1)), nc.reshape(delta, lead + (1, delta.shape[-1])))
        blocks.append(nc.reshape(outer, lead + (a_bar.shape[-1] * delta.shape[-1],)))
    return nc.concat_last(blocks)


def dense_ggn_node(spec: MlpSpec, params, X, damping: float) -> Node:
    if spec.n_params > DENSE_PARAM_LIMIT:
        raise CurvatureError(f"{spec.n_params} parameters exceeds the dense limit of {DENSE_PARAM_LIMIT}; use kfac")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim < 2 or X.shape[-2] < 1:
        raise CurvatureError("curvature needs a non-empty batch")
    params = _as_nodes(params)
    n = X.shape[-2]
    output = model.forward(spec, params, X)
    total = None
    for col in model.output_hessian_sqrt(spec, output):
        J = per_example_jacobian(spec, params, X, col)
        term = nc.matmul(nc.swap_last(J), J)
        total = term if total is None else nc.add(total, term)
    return nc.add(nc.mul(total, 1.0 / n), damping * np.eye(spec.n_params))


def dense_ggn(spec: MlpSpec, phi_hat, X, damping: float = 0.0) -> DenseCurvature:
    """Gauss-Newton matrix ``(1/N) sum_n J_n^T Lambda_n J_n + damping I``."""
    node = dense_ggn_node(spec, phi_hat, X, damping)
    H = 0.5 * (node.value + np.swapaxes(node.value, -1, -2))
    return DenseCurvature(H, node)


def kfac_sample(state: KfacState, mean: ParamVector, scale: float, rng: np.random.Generator,
                n: Optional[int] = None):
    """Draw from ``N(mean, scale^2 (blockdiag kron(A_l, G_l))^{-1})``.

    Per layer the perturbation is ``L_A^{-T} Z L_G^{-1}`` with ``A = L_A L_A^T``,
    ``G = L_G L_G^T`` and ``Z`` standard normal. Returns a ParamVector, or an
    ``(n, P)`` array of flat draws when ``n`` is given.
    """
    if scale < 0:
        raise ValueError("scale must be non-negative")
    count = 1 if n is None else int(n)
    spec = mean.spec
    pieces = []
    base = mean.arrays()
    for layer, (A, G) in enumerate(zip(state.A, state.G)):
        try:
            LA = np.linalg.cholesky(A)
            LG = np.linalg.cholesky(G)
        except np.linalg.LinAlgError as err:
            raise CurvatureError(f"Cholesky failed for layer {layer}") from err
        Z = rng.standard_normal((count, A.shape[0], G.shape[0]))
        E = np.linalg.solve(LA.T, Z)
        E = np.swapaxes(np.linalg.solve(LG.T, np.swapaxes(E, -1, -2)), -1, -2)
        block = np.concatenate([base[2 * layer], base[2 * layer + 1]], axis=0)
        pieces.append((block[None] + scale * E).reshape(count, -1))
    flat = np.concatenate(pieces, axis=1)
    if n is None:
        return ParamVector(spec, flat[0])
    return flat


def dense_sample(H: np.ndarray, mean: ParamVector, scale: float, rng: np.random.Generator,
                 n: Optional[int] = None):
    """Draw from ``N(mean, scale^2 H^{-1})`` via the Cholesky factor of ``H``."""
    count = 1 if n is None else int(n)
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError as err:
        raise CurvatureError("Cholesky of the curvature failed") from err
    Z = rng.standard_normal((H.shape[0], count))
    flat = mean.flat[None] + scale * np.linalg.solve(L.T, Z).T
    return ParamVector(mean.spec, flat[0]) if n is None else flat
