"""Low-fidelity model selection through GP-learned corrections.

Each low-fidelity model ``f_i`` gets a GP over the discrepancy
``F(x) - f_i(x)``. At a query point every GP predicts a Normal correction
``N(mu_i, sd_i^2)``; the model whose correction magnitude ``|eps_i|`` is most
likely to be the smallest wins, and its corrected value ``f_i(x) + mu_i``
stands in for ``F(x)``. With a cost function ``gamma(tau) = tau**beta`` each
magnitude is scaled by ``gamma(tau_i)`` before the comparison.

The selection weight is

    w_i = int_0^inf p_i(z) prod_{k != i} (1 - P_k(z)) dz

with ``p_i``/``P_i`` the folded-normal pdf/cdf of ``|eps_i|``, integrated by
piecewise Gauss-Legendre quadrature with panel edges placed wherever one of
the folded normals changes quickly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special

from . import gp as gplib
from .evaluation import CallCounters, call_model
from .subset import EvaluatorError

log = logging.getLogger(__name__)

__all__ = [
    "CostFunction",
    "LfModelHandle",
    "SelectionResult",
    "ModelEnsemble",
    "folded_normal_pdf",
    "folded_normal_cdf",
    "folded_normal_sf",
    "compute_weights",
    "selection_weights",
    "select_and_correct",
]

_SQRT2PI = math.sqrt(2.0 * math.pi)
TAIL_SIGMAS = 8.0
DEFAULT_NODES = 32


def folded_normal_pdf(z, mu, sigma):
    z = np.asarray(z, dtype=float)
    a = (z - mu) / sigma
    b = (z + mu) / sigma
    return (np.exp(-0.5 * a * a) + np.exp(-0.5 * b * b)) / (sigma * _SQRT2PI)


def folded_normal_cdf(z, mu, sigma):
    z = np.asarray(z, dtype=float)
    return special.ndtr((z - mu) / sigma) - special.ndtr((-z - mu) / sigma)


def folded_normal_sf(z, mu, sigma):
    """``P(|eps| > z)``, computed without cancellation in the far tail."""
    z = np.asarray(z, dtype=float)
    return special.ndtr((mu - z) / sigma) + special.ndtr((-z - mu) / sigma)


@dataclass(frozen=True)
class CostFunction:
    beta: float = 1.0

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")

    def __call__(self, tau):
        tau = np.asarray(tau, dtype=float)
        if np.any(tau <= 0):
            raise ValueError("model costs must be > 0")
        return tau**self.beta


def _leggauss(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return x, w


def selection_weights(mu, sd, scale=None, n_nodes: int = DEFAULT_NODES, chunk: int = 512) -> np.ndarray:
    """Batched selection weights.

    Parameters
    ----------
    mu, sd : array (N, M)
        Correction means and standard deviations per query and model.
    scale : array (M,), optional
        Cost factors ``gamma(tau_i)``; only their ratios matter.

    Returns
    -------
    array (N, M)
    """
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    sd = np.atleast_2d(np.asarray(sd, dtype=float))
    N, M = mu.shape
    if M == 1:
        return np.ones((N, 1))
    g = np.ones(M) if scale is None else np.asarray(scale, dtype=float)
    g = g / g.max()
    a = np.abs(mu) * g
    s = np.maximum(sd, 0.0) * g
    out = np.empty((N, M))
    for lo in range(0, N, chunk):
        out[lo : lo + chunk] = _weights_block(a[lo : lo + chunk], s[lo : lo + chunk], n_nodes)
    return out


def _weights_block(a: np.ndarray, s: np.ndarray, n_nodes: int) -> np.ndarray:
    n, M = a.shape
    cont = s > 0
    # spread-free rows are point masses at a
    s_safe = np.where(cont, s, 1.0)
    lo = np.where(cont, np.maximum(a - TAIL_SIGMAS * s, 0.0), a)
    hi = np.where(cont, a + TAIL_SIGMAS * s, a)

    # panel edges shared by every model: the support ends and centres of all
    edges = np.sort(np.concatenate([lo, a, hi, np.zeros((n, 1))], axis=1), axis=1)  # (n, 3M+1)
    x, w = _leggauss(n_nodes)
    left, right = edges[:, :-1], edges[:, 1:]
    half = 0.5 * (right - left)
    z = (left + half)[:, :, None] + half[:, :, None] * x  # (n, P, q)
    zw = half[:, :, None] * w  # (n, P, q)

    zz = z[:, :, :, None]
    A = a[:, None, None, :]
    S = s_safe[:, None, None, :]
    pdf = (np.exp(-0.5 * ((zz - A) / S) ** 2) + np.exp(-0.5 * ((zz + A) / S) ** 2)) / (S * _SQRT2PI)
    sf = special.ndtr((A - zz) / S) + special.ndtr((-zz - A) / S)
    # point masses: P(|eps_k| > z) is a step at a_k
    sf = np.where(cont[:, None, None, :], sf, (zz < A).astype(float))
    pdf = np.where(cont[:, None, None, :], pdf, 0.0)

    out = np.zeros((n, M))
    for i in range(M):
        others = np.prod(np.delete(sf, i, axis=3), axis=3)
        out[:, i] = np.einsum("npq,npq->n", pdf[..., i] * others, zw)

    # point-mass models: probability every other magnitude exceeds a_i
    if not cont.all():
        for r, i in zip(*np.nonzero(~cont)):
            ai = a[r, i]
            prob = 1.0
            ties = 1
            for k in range(M):
                if k == i:
                    continue
                if cont[r, k]:
                    prob *= float(folded_normal_sf(ai, a[r, k], s[r, k]))
                elif a[r, k] < ai:
                    prob = 0.0
                elif a[r, k] == ai:
                    ties += 1
            out[r, i] = prob / ties
    return out


def compute_weights(
    corrections: Sequence[tuple[float, float]],
    cost: CostFunction | None = None,
    taus: Sequence[float] | None = None,
    n_nodes: int = DEFAULT_NODES,
) -> np.ndarray:
    """Probability that each model has the smallest (cost-scaled) correction magnitude."""
    corr = np.asarray(corrections, dtype=float).reshape(-1, 2)
    if corr.shape[0] < 1:
        raise ValueError("need at least one model")
    scale = None
    if cost is not None:
        if taus is None or len(taus) != corr.shape[0]:
            raise ValueError("cost-aware weights need one tau per model")
        scale = cost(taus)
    return selection_weights(corr[None, :, 0], corr[None, :, 1], scale, n_nodes)[0]


def choose(weights: np.ndarray, costs: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Argmax of the weights per row; ties go to the cheaper, then lower-index model."""
    weights = np.atleast_2d(weights)
    best = weights.max(axis=1, keepdims=True)
    cand = weights >= best - tol
    M = weights.shape[1]
    rank = np.argsort(np.lexsort((np.arange(M), costs)))  # position of each model in (cost, index) order
    keyed = np.where(cand, rank[None, :], M + 1)
    return np.argmin(keyed, axis=1)


@dataclass
class LfModelHandle:
    index: int
    evaluator: Callable[[np.ndarray], np.ndarray]
    cost: float
    name: str = ""
    correction_gp: gplib.GpSurrogate | None = None

    def __post_init__(self):
        if not self.cost > 0:
            raise ValueError(f"LF model cost must be > 0, got {self.cost}")


@dataclass
class SelectionResult:
    weights: np.ndarray
    chosen_index: int
    correction_mean: float
    correction_sd: float
    degraded: list = field(default_factory=list)


class ModelEnsemble:
    """HF model plus ``M`` LF models and their correction GPs.

    With no LF models the ensemble degrades to a single GP on the HF model
    itself (single-fidelity active learning).
    """

    def __init__(
        self,
        hf: Callable[[np.ndarray], np.ndarray],
        lf_models: Sequence[LfModelHandle] = (),
        cost: CostFunction | None = None,
        counters: CallCounters | None = None,
        workers: int = 1,
        restarts: int = 5,
    ):
        self.hf = hf
        self.lf_models = list(lf_models)
        self.cost = cost
        self.counters = counters or CallCounters(len(self.lf_models))
        self.workers = workers
        self.restarts = restarts
        self.train_x: np.ndarray | None = None
        self.train_hf: np.ndarray | None = None
        self.train_lf: np.ndarray | None = None
        self.gps: list[gplib.GpSurrogate] = []
        self.degradations: list[dict] = []

    @property
    def n_lf(self) -> int:
        return len(self.lf_models)

    @property
    def multifidelity(self) -> bool:
        return self.n_lf > 0

    @property
    def costs(self) -> np.ndarray:
        return np.array([h.cost for h in self.lf_models])

    @property
    def cost_scale(self) -> np.ndarray | None:
        if self.cost is None or not self.multifidelity:
            return None
        return self.cost(self.costs)

    def call_hf(self, x: np.ndarray) -> np.ndarray:
        y = call_model(self.hf, x, self.workers)
        self.counters.add_hf(len(y))
        return y

    def call_lf(self, i: int, x: np.ndarray) -> np.ndarray:
        y = call_model(self.lf_models[i].evaluator, x, self.workers)
        self.counters.add_lf(i, len(y))
        return y

    def _targets(self) -> list[np.ndarray]:
        if not self.multifidelity:
            return [self.train_hf]
        return [self.train_hf - self.train_lf[:, i] for i in range(self.n_lf)]

    def initialize(self, x: np.ndarray, rng: np.random.Generator):
        """Evaluate every model on the design ``x`` and fit the GPs from scratch."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        self.train_x = x.copy()
        self.train_hf = self.call_hf(x)
        self.train_lf = np.column_stack([self.call_lf(i, x) for i in range(self.n_lf)]) if self.multifidelity else np.zeros((len(x), 0))
        self.refit(reoptimize=True, rng=rng)

    def add_point(self, x: np.ndarray, hf_value: float, lf_values: np.ndarray):
        self.train_x = np.vstack([self.train_x, np.atleast_2d(x)])
        self.train_hf = np.append(self.train_hf, hf_value)
        self.train_lf = np.vstack([self.train_lf, np.asarray(lf_values, dtype=float).reshape(1, -1)])

    def refit(self, reoptimize: bool, rng: np.random.Generator | None = None):
        targets = self._targets()
        new = []
        for i, y in enumerate(targets):
            prev = self.gps[i].params if i < len(self.gps) else None
            if len(y) < 2:
                # nothing to optimise against: unit prior
                params = prev or gplib.KernelParams(1.0, (1.0,) * self.train_x.shape[1])
            elif reoptimize or prev is None:
                params = gplib.optimize_hyperparameters(
                    self.train_x, y, restarts=self.restarts, rng=rng, initial=prev
                )
            else:
                params = prev
            new.append(gplib.fit(self.train_x, y, params))
        self.gps = new
        for h, g in zip(self.lf_models, self.gps):
            h.correction_gp = g

    def predict_corrections(self, x: np.ndarray):
        """(mu, sd), each (N, max(M, 1))."""
        preds = [g.predict_batch(x) for g in self.gps]
        mu = np.column_stack([p[0] for p in preds])
        sd = np.column_stack([p[1] for p in preds])
        return mu, sd

    def select(self, x: np.ndarray):
        """Weights (N, M), chosen model index (N,), and the chosen correction's mean and sd."""
        mu, sd = self.predict_corrections(x)
        if not self.multifidelity:
            n = len(mu)
            return np.ones((n, 1)), np.full(n, -1), mu[:, 0], sd[:, 0]
        w = selection_weights(mu, sd, self.cost_scale)
        chosen = choose(w, self.costs)
        rows = np.arange(len(chosen))
        return w, chosen, mu[rows, chosen], sd[rows, chosen]

    def corrected(self, x: np.ndarray, cache: np.ndarray):
        """Corrected prediction, its sd and the chosen model per row.

        ``cache`` (N, M) holds LF values already known (NaN otherwise) and is
        filled in place. Single-fidelity ensembles return the GP itself and
        ``-1`` as the chosen index.
        """
        mu, sd = self.predict_corrections(x)
        n = len(mu)
        if not self.multifidelity:
            return mu[:, 0], sd[:, 0], np.full(n, -1)
        w = selection_weights(mu, sd, self.cost_scale)
        chosen = choose(w, self.costs)
        lf, chosen = self.lf_values(x, chosen, cache, w)
        r = np.arange(n)
        return lf + mu[r, chosen], sd[r, chosen], chosen

    def lf_values(self, x: np.ndarray, chosen: np.ndarray, cache: np.ndarray, weights: np.ndarray | None = None):
        """Fill ``cache[r, chosen[r]]`` where missing; returns the chosen LF values and final choice.

        A failing LF model falls back to the next-highest-weight model for the
        affected rows.
        """
        chosen = chosen.copy()
        for i in range(self.n_lf):
            rows = np.flatnonzero((chosen == i) & np.isnan(cache[:, i]))
            if rows.size == 0:
                continue
            try:
                cache[rows, i] = self.call_lf(i, x[rows])
            except Exception as exc:
                for r in rows:
                    chosen[r] = self._fallback(x, r, i, cache, weights, exc)
        vals = cache[np.arange(len(chosen)), chosen]
        return vals, chosen

    def _fallback(self, x, r, failed, cache, weights, exc):
        order = np.argsort(-weights[r], kind="stable") if weights is not None else np.arange(self.n_lf)
        for k in order:
            if k == failed:
                continue
            if np.isnan(cache[r, k]):
                try:
                    cache[r, k] = self.call_lf(int(k), x[r : r + 1])[0]
                except Exception:
                    continue
            event = {"row": int(r), "failed_model": int(failed), "fallback_model": int(k), "error": str(exc)}
            self.degradations.append(event)
            log.warning("LF model %d failed (%s); fell back to model %d", failed, exc, k)
            return int(k)
        raise EvaluatorError(f"every LF model failed at row {r}", index=int(r)) from exc


def select_and_correct(ensemble: ModelEnsemble, query, cost: CostFunction | None = None):
    """Corrected LF prediction at one point; evaluates only the chosen LF model."""
    x = np.atleast_2d(np.asarray(query, dtype=float))
    if not ensemble.multifidelity:
        raise ValueError("select_and_correct needs at least one LF model")
    mu, sd = ensemble.predict_corrections(x)
    scale = cost(ensemble.costs) if cost is not None else ensemble.cost_scale
    w = selection_weights(mu, sd, scale)
    chosen = choose(w, ensemble.costs)
    cache = np.full((1, ensemble.n_lf), np.nan)
    n_deg = len(ensemble.degradations)
    vals, chosen = ensemble.lf_values(x, chosen, cache, w)
    i = int(chosen[0])
    sel = SelectionResult(w[0], i, float(mu[0, i]), float(sd[0, i]), ensemble.degradations[n_deg:])
    return float(vals[0] + mu[0, i]), sel
