"""Early stopping on linear least squares as MAP estimation.

Running ``k`` steps of gradient descent from ``theta0`` on ``||y - X phi||^2``
lands exactly on the minimiser of the same loss plus a Gaussian penalty
``(theta0 - phi)^T Q^{-1} (theta0 - phi)``. This module computes the iterate,
the matching covariance ``Q`` and the MAP estimate, so the two routes can be
compared against each other.

Conventions:

* the gradient of the data term is ``X^T (X phi - y)``; the step size absorbs
  the factor of two.
* with a preconditioner ``P`` the update is ``phi <- phi - alpha * P * grad``.
  The quadratic form (:func:`quad_gd_iterate`) uses ``phi <- phi - P * grad``
  with no separate step size.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numcore import sym_eig

EIG_FLOOR = 1e-12


class ContractionWarning(RuntimeWarning):
    pass


@dataclass
class QuadProblem:
    X: np.ndarray
    y: np.ndarray
    theta0: np.ndarray
    alpha: float
    k: int
    precond: Optional[np.ndarray] = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        self.theta0 = np.asarray(self.theta0, dtype=np.float64).reshape(-1)
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.k < 0:
            raise ValueError("k must be non-negative")
        n, d = self.X.shape
        if self.y.shape != (n,) or self.theta0.shape != (d,):
            raise ValueError(f"shape mismatch: X {self.X.shape}, y {self.y.shape}, theta0 {self.theta0.shape}")
        if self.precond is not None:
            self.precond = np.asarray(self.precond, dtype=np.float64)
            lam, _ = sym_eig(self.precond)
            if lam[0] <= 0:
                raise ValueError("preconditioner must be positive definite")
        mu = np.linalg.eigvals(self.step_matrix() @ self.hessian()).real
        mu = mu[mu > EIG_FLOOR * max(1.0, float(np.abs(mu).max(initial=0.0)))]
        rho = float(np.max(np.abs(1.0 - mu))) if mu.size else 0.0
        if rho >= 1.0:
            warnings.warn(f"iteration is not a contraction (spectral radius {rho:.4f})", ContractionWarning)

    def hessian(self) -> np.ndarray:
        return self.X.T @ self.X

    def step_matrix(self) -> np.ndarray:
        """The effective preconditioner ``alpha * P`` (``alpha * I`` by default)."""
        d = self.X.shape[1]
        base = np.eye(d) if self.precond is None else self.precond
        return self.alpha * base


@dataclass
class InducedPrior:
    mean: np.ndarray
    Q: np.ndarray
    precision: Optional[np.ndarray] = None

    def precision_matrix(self) -> np.ndarray:
        return np.linalg.inv(self.Q) if self.precision is None else self.precision


def gd_iterate(p: QuadProblem) -> np.ndarray:
    phi = p.theta0.copy()
    step = p.step_matrix()
    for _ in range(p.k):
        phi = phi - step @ (p.X.T @ (p.X @ phi - p.y))
    return phi


def gd_closed_form(p: QuadProblem) -> np.ndarray:
    """Loop-free iterate ``phi* + (I - S H)^k (theta0 - phi*)``.

    ``phi*`` is the least-norm least-squares solution; its component outside
    the range of ``H`` is left untouched by the iteration.
    """
    H = p.hessian()
    phi_star = np.linalg.lstsq(p.X, p.y, rcond=None)[0]
    contraction = np.linalg.matrix_power(np.eye(H.shape[0]) - p.step_matrix() @ H, p.k)
    return phi_star + contraction @ (p.theta0 - phi_star)


def _early_stopping_variances(mu: np.ndarray, k: int) -> np.ndarray:
    """``((1 - mu)^-k - 1) / mu`` with its ``mu -> 0`` limit ``k``."""
    mu = np.asarray(mu, dtype=np.float64)
    if np.any(mu >= 1.0):
        raise ValueError(
            "induced covariance is not positive definite: a step overshoots "
            f"(largest step-curvature product {float(mu.max()):.4f} >= 1)"
        )
    out = np.full_like(mu, float(k))
    big = mu > EIG_FLOOR
    out[big] = np.expm1(-k * np.log1p(-mu[big])) / mu[big]
    return out


def early_stopping_covariance(H: np.ndarray, step: np.ndarray, k: int) -> np.ndarray:
    return _early_stopping_prior(H, step, k)[0]


def _early_stopping_prior(H: np.ndarray, step: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Covariance ``Q`` making ``k`` preconditioned steps equal to the MAP estimate.

    ``H`` and ``step`` (the preconditioner, SPD) are diagonalised together:
    with ``step = L L^T`` and ``L^T H L = U diag(mu) U^T``, the basis
    ``V = L U`` satisfies ``V^T step^{-1} V = I`` and ``V^T H V = diag(mu)``.
    Then ``Q = V diag(((1 - mu)^-k - 1) / mu) V^T``.

    Returns ``(Q, Q^{-1})``; the inverse is assembled from the same basis
    because ``Q`` itself can be badly conditioned for large ``k``.
    """
    if k < 1:
        raise ValueError("k = 0 pins phi to theta0: the induced prior has zero covariance")
    L = np.linalg.cholesky(step)
    mu, U = sym_eig(L.T @ H @ L)
    mu = np.where(np.abs(mu) < EIG_FLOOR, 0.0, mu)
    if np.any(mu < 0):
        raise ValueError("curvature matrix must be positive semi-definite")
    q = _early_stopping_variances(mu, k)
    if np.any(q <= 0):
        raise ValueError("induced covariance is not positive definite")
    V = L @ U
    V_inv = U.T @ np.linalg.inv(L)
    Q = (V * q) @ V.T
    P = (V_inv.T / q) @ V_inv
    return 0.5 * (Q + Q.T), 0.5 * (P + P.T)


def induced_q(p: QuadProblem) -> InducedPrior:
    Q, P = _early_stopping_prior(p.hessian(), p.step_matrix(), p.k)
    return InducedPrior(mean=p.theta0.copy(), Q=Q, precision=P)


def map_estimate(X, y, prior: InducedPrior) -> np.ndarray:
    """Posterior mode under ``N(y; X phi, I) N(phi; mean, Q)``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    Q_inv = prior.precision_matrix()
    A = X.T @ X + Q_inv
    b = X.T @ y + Q_inv @ prior.mean
    return _solve_spd(A, b)


def quad_gd_iterate(H, phi_star, theta0, precond, k: int) -> np.ndarray:
    """k steps of ``phi <- phi - P H (phi - phi*)`` from ``theta0``."""
    H = np.asarray(H, dtype=np.float64)
    P = np.asarray(precond, dtype=np.float64)
    phi_star = np.asarray(phi_star, dtype=np.float64)
    phi = np.asarray(theta0, dtype=np.float64).copy()
    for _ in range(k):
        phi = phi - P @ (H @ (phi - phi_star))
    return phi


def quad_prior(H, precond, k: int, theta0) -> InducedPrior:
    Q, P = _early_stopping_prior(np.asarray(H, dtype=np.float64), np.asarray(precond, dtype=np.float64), k)
    return InducedPrior(mean=np.asarray(theta0, dtype=np.float64).copy(), Q=Q, precision=P)


def quad_argmin(H, phi_star, prior: InducedPrior) -> np.ndarray:
    """Minimiser of ``(phi - phi*)^T H (phi - phi*) + (mean - phi)^T Q^{-1} (mean - phi)``."""
    H = np.asarray(H, dtype=np.float64)
    theta0 = prior.mean
    Q_inv = prior.precision_matrix()
    return _solve_spd(H + Q_inv, H @ np.asarray(phi_star) + Q_inv @ np.asarray(theta0))


def _solve_spd(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    A = 0.5 * (A + A.T)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError("normal-equation matrix is singular") from err
    z = np.linalg.solve(L, b)
    return np.linalg.solve(L.T, z)


def random_problem(rng: np.random.Generator, d: int, n: int, k: int, precond: bool = False,
                   step_fraction: float = 0.9) -> QuadProblem:
    """A seeded instance whose largest step-curvature product is ``step_fraction * u``, ``u ~ U(0.2, 1)``."""
    X = rng.standard_normal((n, d))
    y = rng.standard_normal(n)
    theta0 = rng.standard_normal(d)
    P = np.diag(rng.uniform(0.5, 2.0, d)) if precond else None
    base = np.eye(d) if P is None else P
    L = np.linalg.cholesky(base)
    top = float(np.linalg.eigvalsh(L.T @ X.T @ X @ L)[-1])
    alpha = step_fraction * rng.uniform(0.2, 1.0) / top
    return QuadProblem(X=X, y=y, theta0=theta0, alpha=alpha, k=k, precond=P)
