"""Gaussian-process regression with an anisotropic squared-exponential kernel.

Training factors ``K + nugget*I`` once by Cholesky; the predictive mean and
variance then cost one triangular solve per query batch. Targets are
centred before fitting and the mean is added back on prediction.
Hyperparameters are chosen by multi-start L-BFGS-B (analytic gradient) on the
log marginal likelihood in log-parameter space, with inputs standardised per dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg, optimize
from scipy.spatial.distance import cdist

__all__ = [
    "GpFitError",
    "KernelParams",
    "GpSurrogate",
    "kernel",
    "kernel_matrix",
    "fit",
    "predict",
    "log_marginal_likelihood",
    "log_marginal_likelihood_grad",
    "optimize_hyperparameters",
]

NUGGET_FLOOR = 1e-10
# relative to signal variance; tried in order when the factorisation fails
NUGGET_LADDER = (1e-10, 1e-8, 1e-6)

_LOG2PI = math.log(2.0 * math.pi)


class GpFitError(RuntimeError):
    """Kernel matrix could not be factored, even after nugget escalation."""

    def __init__(self, message, params=None):
        super().__init__(message)
        self.params = params


@dataclass(frozen=True)
class KernelParams:
    signal_variance: float
    lengthscales: tuple[float, ...]
    nugget: float = NUGGET_FLOOR

    def __post_init__(self):
        ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        object.__setattr__(self, "lengthscales", ls)
        if not self.signal_variance > 0:
            raise ValueError(f"signal_variance must be > 0, got {self.signal_variance}")
        if not all(v > 0 for v in ls):
            raise ValueError(f"lengthscales must be > 0, got {ls}")
        object.__setattr__(self, "nugget", max(float(self.nugget), NUGGET_FLOOR))

    @property
    def dimension(self) -> int:
        return len(self.lengthscales)

    def to_dict(self) -> dict:
        return {
            "signal_variance": self.signal_variance,
            "lengthscales": list(self.lengthscales),
            "nugget": self.nugget,
        }


def kernel(a, b, params: KernelParams) -> float:
    """Squared-exponential covariance between two points."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.shape != b.shape or a.shape[0] != params.dimension:
        raise ValueError(f"dimension mismatch: {a.shape}, {b.shape}, lengthscales {params.dimension}")
    r = (a - b) / np.asarray(params.lengthscales)
    return float(params.signal_variance * math.exp(-0.5 * float(r @ r)))


def kernel_matrix(A, B, params: KernelParams) -> np.ndarray:
    ls = np.asarray(params.lengthscales)
    A = np.atleast_2d(A) / ls
    B = np.atleast_2d(B) / ls
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    return params.signal_variance * np.exp(-0.5 * cdist(A, B, "sqeuclidean"))


def _factor(K: np.ndarray, params: KernelParams):
    """Cholesky of K + nugget*I, escalating the nugget on failure."""
    n = K.shape[0]
    tried = []
    for rel in (None,) + NUGGET_LADDER:
        nugget = params.nugget if rel is None else max(params.nugget, rel * params.signal_variance)
        if tried and nugget <= tried[-1]:
            continue
        tried.append(nugget)
        try:
            L = np.linalg.cholesky(K + nugget * np.eye(n))
        except np.linalg.LinAlgError:
            continue
        return L, nugget
    cond = np.linalg.cond(K + tried[-1] * np.eye(n))
    raise GpFitError(
        f"kernel matrix not positive definite after nugget escalation to {tried[-1]:.3g} "
        f"(condition number {cond:.3g})",
        params,
    )


@dataclass(frozen=True)
class GpSurrogate:
    """A fitted GP. Immutable; refitting returns a new instance."""

    train_inputs: np.ndarray
    train_targets: np.ndarray
    params: KernelParams
    chol_factor: np.ndarray
    alpha: np.ndarray
    target_mean: float = 0.0
    centered: bool = True

    @property
    def n_train(self) -> int:
        return self.train_inputs.shape[0]

    def predict(self, query):
        """Mean and standard deviation at a single point."""
        mean, sd = self.predict_batch(np.atleast_2d(np.asarray(query, dtype=float)))
        return float(mean[0]), float(sd[0])

    def predict_batch(self, queries):
        Q = np.atleast_2d(np.asarray(queries, dtype=float))
        Ks = kernel_matrix(Q, self.train_inputs, self.params)
        mean = self.target_mean + Ks @ self.alpha
        v = linalg.solve_triangular(self.chol_factor, Ks.T, lower=True, check_finite=False)
        var = self.params.signal_variance - np.einsum("ij,ij->j", v, v)
        return mean, np.sqrt(np.maximum(var, 0.0))

    def with_point(self, x, y, params: KernelParams | None = None) -> "GpSurrogate":
        X = np.vstack([self.train_inputs, np.atleast_2d(x)])
        Y = np.append(self.train_targets, y)
        return fit(X, Y, params or self.params, center=self.centered)


def fit(inputs, targets, params: KernelParams, center: bool = True) -> GpSurrogate:
    """Factor the training covariance and precompute ``alpha = K^-1 (y - ybar)``."""
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(targets, dtype=float).ravel()
    if X.shape[0] < 1 or X.shape[0] != y.shape[0]:
        raise ValueError(f"need matching, non-empty inputs/targets, got {X.shape} and {y.shape}")
    if X.shape[1] != params.dimension:
        raise ValueError(f"inputs have {X.shape[1]} columns, kernel has {params.dimension} lengthscales")
    ybar = float(np.mean(y)) if center else 0.0
    L, nugget = _factor(kernel_matrix(X, X, params), params)
    alpha = linalg.cho_solve((L, True), y - ybar, check_finite=False)
    if nugget != params.nugget:
        params = replace(params, nugget=nugget)
    return GpSurrogate(X.copy(), y.copy(), params, L, alpha, ybar, center)


def predict(gp: GpSurrogate, query):
    return gp.predict(query)


def log_marginal_likelihood(inputs, targets, params: KernelParams, center: bool = True) -> float:
    """``-1/2 r^T K^-1 r - 1/2 log|K| - n/2 log(2 pi)`` with ``r`` the centred targets.

    No nugget escalation: a failed factorisation gives ``-inf``.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(targets, dtype=float).ravel()
    r = y - np.mean(y) if center else y
    K = kernel_matrix(X, X, params) + params.nugget * np.eye(len(y))
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        return -math.inf
    a = linalg.cho_solve((L, True), r, check_finite=False)
    return float(-0.5 * r @ a - np.sum(np.log(np.diag(L))) - 0.5 * len(y) * _LOG2PI)


def _pairwise_sq(X: np.ndarray) -> np.ndarray:
    """Per-dimension squared differences, shape (d, n, n)."""
    return (X.T[:, :, None] - X.T[:, None, :]) ** 2


def _nll_and_grad(theta, sq, r, nugget):
    """Negative log marginal likelihood and its gradient in (log sv, log ls)."""
    sv = math.exp(theta[0])
    inv_ls2 = np.exp(-2.0 * theta[1:])
    scaled = sq * inv_ls2[:, None, None]
    Kf = sv * np.exp(-0.5 * scaled.sum(axis=0))
    n = len(r)
    try:
        L = np.linalg.cholesky(Kf + nugget * np.eye(n))
    except np.linalg.LinAlgError:
        return None
    a = linalg.cho_solve((L, True), r, check_finite=False)
    nll = 0.5 * r @ a + np.sum(np.log(np.diag(L))) + 0.5 * n * _LOG2PI
    W = np.outer(a, a) - linalg.cho_solve((L, True), np.eye(n), check_finite=False)
    WK = W * Kf
    grad = np.empty_like(theta, dtype=float)
    grad[0] = 0.5 * WK.sum()
    grad[1:] = 0.5 * np.einsum("ij,kij->k", WK, scaled)
    return float(nll), -grad


def log_marginal_likelihood_grad(inputs, targets, params: KernelParams, center: bool = True) -> np.ndarray:
    """Gradient of the log marginal likelihood w.r.t. (log signal variance, log lengthscales)."""
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(targets, dtype=float).ravel()
    r = y - np.mean(y) if center else y
    theta = np.concatenate([[math.log(params.signal_variance)], np.log(params.lengthscales)])
    out = _nll_and_grad(theta, _pairwise_sq(X), r, params.nugget)
    if out is None:
        raise GpFitError("kernel matrix not positive definite", params)
    return -out[1]


def _default_start(Xs: np.ndarray, var: float) -> np.ndarray:
    span = np.ptp(Xs, axis=0)
    span = np.where(span > 0, span, 1.0)
    return np.concatenate([[math.log(var)], np.log(span / 3.0)])


def optimize_hyperparameters(
    inputs,
    targets,
    restarts: int = 5,
    rng: np.random.Generator | None = None,
    nugget: float = NUGGET_FLOOR,
    initial: KernelParams | None = None,
    maxiter: int | None = None,
    center: bool = True,
) -> KernelParams:
    """Maximise the log marginal likelihood over signal variance and lengthscales.

    The first start is ``initial`` if given, else the default (lengthscale =
    standardised data range / 3, signal variance = target variance). The
    remaining ``restarts - 1`` starts are log-uniform perturbations of it.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(targets, dtype=float).ravel()
    n, d = X.shape
    if n < 2:
        raise ValueError("hyperparameter optimisation needs at least 2 points")
    if rng is None:
        rng = np.random.default_rng(0)

    mu = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    Xs = (X - mu) / scale
    r = y - y.mean() if center else y
    var = max(float(np.mean(r * r)), 1e-12)

    lo = np.concatenate([[math.log(var * 1e-6)], np.full(d, math.log(1e-2))])
    hi = np.concatenate([[math.log(var * 1e4)], np.full(d, math.log(1e3))])

    sq = _pairwise_sq(Xs)
    nug = max(nugget, NUGGET_FLOOR)

    def objective(theta):
        out = _nll_and_grad(theta, sq, r, nug)
        return (1e25, np.zeros_like(theta)) if out is None else out

    if initial is not None:
        start = np.concatenate(
            [[math.log(initial.signal_variance)], np.log(np.asarray(initial.lengthscales) / scale)]
        )
        start = np.clip(start, lo, hi)
    else:
        start = _default_start(Xs, var)
    starts = [start]
    for _ in range(max(restarts, 1) - 1):
        starts.append(np.clip(start + rng.uniform(-1.5, 1.5, size=d + 1), lo, hi))

    best_theta, best_val = None, math.inf
    for s in starts:
        v0 = objective(s)[0]
        if v0 < best_val:
            best_theta, best_val = s, v0
        res = optimize.minimize(
            objective,
            s,
            jac=True,
            method="L-BFGS-B",
            bounds=list(zip(lo, hi)),
            options={"maxiter": maxiter or 200},
        )
        if np.isfinite(res.fun) and res.fun < best_val:
            best_theta, best_val = np.clip(res.x, lo, hi), float(res.fun)

    sv = math.exp(best_theta[0])
    ls = np.exp(best_theta[1:]) * scale
    params = KernelParams(sv, tuple(ls), max(nugget, NUGGET_FLOOR))
    if best_val >= 1e25:
        raise GpFitError("every restart failed to factor the kernel matrix", params)
    return params
