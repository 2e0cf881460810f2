"""Subset simulation with component-wise Metropolis-Hastings chains.

The failure event is ``F(X) > threshold``. Level 1 is crude Monte Carlo;
each later level grows ``p0*N`` Markov chains from the largest outputs of
the previous level, conditioned on exceeding that level's threshold. Chains
move in standard-normal space, so the coordinate-wise acceptance ratio is a
ratio of standard normal densities whatever the physical marginals are.

Evaluators are objects with two methods::

    evaluate(x, threshold) -> (outputs, aux)
    refine(x, outputs, aux, threshold) -> (outputs, aux)

``aux`` is a per-row float array the evaluator uses to carry its own state
(for example which rows already hold a high-fidelity value); subset
simulation only copies its rows around. ``refine`` lets a surrogate-backed
evaluator harden outputs near a freshly computed threshold; for a plain
model it is the identity.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol

import numpy as np

from .distributions import InputSpace
from .rng import stream

log = logging.getLogger(__name__)

__all__ = [
    "SubsetConfig",
    "SubsetLevel",
    "RunResult",
    "Evaluator",
    "SubsetError",
    "DegenerateLevelError",
    "BudgetExhaustedError",
    "EvaluatorError",
    "intermediate_threshold",
    "correlation_factor",
    "run_first_level",
    "run_conditional_level",
    "aggregate",
    "subset_simulation",
]


class SubsetError(RuntimeError):
    pass


class DegenerateLevelError(SubsetError):
    """Outputs do not separate: no usable intermediate threshold."""


class EvaluatorError(SubsetError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class BudgetExhaustedError(SubsetError):
    """``max_levels`` reached before the final threshold; carries the partial result."""

    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


class Evaluator(Protocol):
    def evaluate(self, x: np.ndarray, threshold: float | None) -> tuple[np.ndarray, np.ndarray]: ...

    def refine(
        self, x: np.ndarray, outputs: np.ndarray, aux: np.ndarray, threshold: float
    ) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass
class SubsetConfig:
    samples_per_level: int = 1000
    p0: float = 0.1
    max_levels: int = 15
    final_threshold: float = 0.0
    proposal_scale: Any = 1.0

    def __post_init__(self):
        if self.samples_per_level < 2:
            raise ValueError("samples_per_level must be >= 2")
        if not 0.0 < self.p0 < 1.0:
            raise ValueError(f"p0 must lie in (0, 1), got {self.p0}")
        if self.max_levels < 1:
            raise ValueError("max_levels must be >= 1")
        scale = np.asarray(self.proposal_scale, dtype=float)
        if np.any(scale < 0) or not np.all(np.isfinite(scale)):
            raise ValueError("proposal_scale must be finite and non-negative")
        exact = self.p0 * self.samples_per_level
        if abs(exact - round(exact)) > 1e-9:
            warnings.warn(
                f"p0*N = {exact} is not an integer; using {max(1, round(exact))} seeds per level",
                stacklevel=2,
            )
        if round(exact) < 1 and exact < 1:
            warnings.warn("p0*N < 1; using a single seed", stacklevel=2)

    @property
    def n_seeds(self) -> int:
        return max(1, int(round(self.p0 * self.samples_per_level)))


@dataclass
class SubsetLevel:
    index: int
    samples: np.ndarray
    outputs: np.ndarray
    threshold: float
    conditional_prob: float
    is_final: bool
    gamma: float = 0.0
    acceptance_rate: float | None = None
    chain_lengths: np.ndarray | None = None
    aux: np.ndarray | None = None
    calls: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "level": self.index,
            "threshold": float(self.threshold),
            "conditional_prob": float(self.conditional_prob),
            "final": bool(self.is_final),
            "gamma": float(self.gamma),
            "acceptance_rate": None if self.acceptance_rate is None else float(self.acceptance_rate),
            "calls": dict(self.calls),
        }


@dataclass
class RunResult:
    pf_estimate: float
    cov_estimate: float
    levels: list[SubsetLevel]
    counters: dict = field(default_factory=dict)
    seed: int | None = None
    complete: bool = True

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def summary(self) -> dict:
        return {
            "pf": float(self.pf_estimate),
            "cov": float(self.cov_estimate),
            "n_levels": self.n_levels,
            "complete": self.complete,
            "seed": self.seed,
            "counters": self.counters,
            "levels": [lv.summary() for lv in self.levels],
        }


def intermediate_threshold(outputs: np.ndarray, n_seeds: int) -> tuple[float, np.ndarray]:
    """The ``n_seeds``-th largest output and the indices of the ``n_seeds`` largest.

    Ties are broken by sample index so the result is order-deterministic.
    """
    y = np.asarray(outputs, dtype=float)
    if y.size == 0:
        raise DegenerateLevelError("no outputs")
    if np.all(y == y[0]):
        raise DegenerateLevelError(f"all {y.size} outputs equal {y[0]!r}; constant or broken model")
    order = np.lexsort((np.arange(y.size), -y))
    top = order[:n_seeds]
    return float(y[top[-1]]), top


def correlation_factor(indicator: np.ndarray, chain_lengths: np.ndarray) -> float:
    """Chain-correlation factor gamma for the level-probability estimator.

    ``indicator`` is chain-major (chain c occupies a contiguous block of
    ``chain_lengths[c]`` rows). Uses the indicator autocovariance pooled over
    chains at lags 1 .. L-1, L being the longest chain.
    """
    ind = np.asarray(indicator, dtype=float)
    lengths = np.asarray(chain_lengths, dtype=int)
    n = ind.size
    p = ind.mean()
    r0 = p * (1.0 - p)
    if r0 <= 0.0:
        return 0.0
    L = int(lengths.max())
    grid = np.full((lengths.size, L), np.nan)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    for c, (s, m) in enumerate(zip(starts, lengths)):
        grid[c, :m] = ind[s : s + m]
    gamma = 0.0
    for k in range(1, L):
        prod = grid[:, :-k] * grid[:, k:]
        valid = ~np.isnan(prod)
        npairs = valid.sum()
        if npairs == 0:
            break
        rk = prod[valid].sum() / npairs - p * p
        gamma += 2.0 * (1.0 - k * lengths.size / n) * rk / r0
    return max(gamma, 0.0)


def _threshold_for_level(y: np.ndarray, config: SubsetConfig, prev_threshold: float | None):
    thr, top = intermediate_threshold(y, config.n_seeds)
    final = thr >= config.final_threshold
    if final:
        thr = config.final_threshold
    elif prev_threshold is not None and not thr > prev_threshold:
        raise DegenerateLevelError(
            f"threshold {thr!r} does not exceed the previous one {prev_threshold!r}; chains are stuck"
        )
    return thr, final, top


def _settle(evaluator, x, y, aux, config, prev_threshold):
    """Alternate threshold estimation and evaluator refinement until stable."""
    while True:
        thr, final, top = _threshold_for_level(y, config, prev_threshold)
        y_new, aux_new = evaluator.refine(x, y, aux, thr)
        if np.array_equal(y_new, y):
            return y, aux, thr, final, top
        y, aux = y_new, aux_new


def _level_prob(y, thr, final):
    return float(np.mean(y > thr)) if final else float(np.mean(y >= thr))


def _evaluate(evaluator, x, threshold):
    y, aux = evaluator.evaluate(x, threshold)
    y = np.asarray(y, dtype=float)
    if y.shape != (x.shape[0],):
        raise EvaluatorError(f"evaluator returned shape {y.shape} for {x.shape[0]} inputs")
    bad = np.flatnonzero(~np.isfinite(y))
    if bad.size:
        raise EvaluatorError(f"non-finite output at sample index {bad[0]}", index=int(bad[0]))
    return y, aux


def _calls_snapshot(evaluator) -> dict:
    counters = getattr(evaluator, "counters", None)
    return counters.snapshot() if counters is not None else {}


def _calls_diff(after: dict, before: dict) -> dict:
    return {k: after[k] - before.get(k, 0) for k in after}


def _begin(evaluator, index: int):
    hook = getattr(evaluator, "begin_level", None)
    if hook is not None:
        hook(index)


def run_first_level(evaluator, space: InputSpace, config: SubsetConfig, rng: np.random.Generator) -> SubsetLevel:
    _begin(evaluator, 1)
    before = _calls_snapshot(evaluator)
    u = rng.standard_normal((config.samples_per_level, space.dimension))
    x = space.from_standard(u)
    y, aux = _evaluate(evaluator, x, None)
    y, aux, thr, final, _ = _settle(evaluator, x, y, aux, config, None)
    return SubsetLevel(
        index=1,
        samples=x,
        outputs=y,
        threshold=thr,
        conditional_prob=_level_prob(y, thr, final),
        is_final=final,
        gamma=0.0,
        aux=aux,
        calls=_calls_diff(_calls_snapshot(evaluator), before),
    )


def _chain_lengths(n_total: int, n_chains: int) -> np.ndarray:
    base, extra = divmod(n_total, n_chains)
    return np.array([base + 1] * extra + [base] * (n_chains - extra), dtype=int)


def run_conditional_level(
    evaluator,
    space: InputSpace,
    seeds: np.ndarray,
    seed_outputs: np.ndarray,
    prev_threshold: float,
    config: SubsetConfig,
    rng: np.random.Generator,
    seed_aux: np.ndarray | None = None,
    index: int = 2,
) -> SubsetLevel:
    """Grow one chain per seed until the level holds ``N`` samples.

    Each step proposes a Normal random walk per coordinate in standard-normal
    space, keeps each coordinate with probability ``min(1, phi(xi)/phi(u))``,
    and accepts the candidate only if its output is at least
    ``prev_threshold``; otherwise the chain repeats its current state.
    Candidates that keep every coordinate are not re-evaluated.
    """
    seeds = np.atleast_2d(np.asarray(seeds, dtype=float))
    n_chains, d = seeds.shape
    if n_chains == 0:
        raise SubsetError("empty seed set")
    seed_outputs = np.asarray(seed_outputs, dtype=float)
    if np.any(seed_outputs < prev_threshold):
        raise SubsetError("every seed must have output >= the conditioning threshold")
    if seed_aux is None:
        seed_aux = np.zeros((n_chains, 0))
    _begin(evaluator, index)
    before = _calls_snapshot(evaluator)

    N = config.samples_per_level
    lengths = _chain_lengths(N, n_chains)
    L = int(lengths.max())
    scale = np.broadcast_to(np.asarray(config.proposal_scale, dtype=float), (d,))

    u_cur = space.to_standard(seeds)
    x_cur = seeds.copy()
    y_cur = seed_outputs.copy()
    a_cur = seed_aux.copy()
    U = np.empty((n_chains, L, d))
    X = np.empty((n_chains, L, d))
    Y = np.empty((n_chains, L))
    A = np.empty((n_chains, L, a_cur.shape[1]))
    U[:, 0], X[:, 0], Y[:, 0], A[:, 0] = u_cur, x_cur, y_cur, a_cur

    n_prop = 0
    n_acc = 0
    for t in range(1, L):
        active = lengths > t
        z = rng.standard_normal((n_chains, d))
        w = rng.uniform(size=(n_chains, d))
        xi = u_cur + scale * z
        ratio = np.exp(-0.5 * (xi * xi - u_cur * u_cur))
        keep = (w < np.minimum(1.0, ratio)) & (xi != u_cur)
        cand = np.where(keep, xi, u_cur)
        moved = active & keep.any(axis=1)
        n_prop += int(active.sum())
        idx = np.flatnonzero(moved)
        if idx.size:
            xc = space.from_standard(cand[idx])
            yc, ac = _evaluate(evaluator, xc, prev_threshold)
            ok = yc >= prev_threshold
            acc = idx[ok]
            n_acc += int(acc.size)
            u_cur[acc] = cand[acc]
            x_cur[acc] = xc[ok]
            y_cur[acc] = yc[ok]
            if a_cur.shape[1]:
                a_cur[acc] = ac[ok]
        U[:, t], X[:, t], Y[:, t], A[:, t] = u_cur, x_cur, y_cur, a_cur

    mask = np.arange(L)[None, :] < lengths[:, None]
    x = X[mask]
    y = Y[mask]
    aux = A[mask]

    y, aux, thr, final, _ = _settle(evaluator, x, y, aux, config, prev_threshold)
    # refinement may replace a surrogate value by a lower HF value
    if np.any(y < prev_threshold):
        log.debug("level %d: %d refined outputs below previous threshold", index, int(np.sum(y < prev_threshold)))
    prob = _level_prob(y, thr, final)
    ind = (y > thr) if final else (y >= thr)
    return SubsetLevel(
        index=index,
        samples=x,
        outputs=y,
        threshold=thr,
        conditional_prob=prob,
        is_final=final,
        gamma=correlation_factor(ind, lengths),
        acceptance_rate=n_acc / n_prop if n_prop else 0.0,
        chain_lengths=lengths,
        aux=aux,
        calls=_calls_diff(_calls_snapshot(evaluator), before),
    )


def aggregate(levels: list[SubsetLevel], samples_per_level: int, seed: int | None = None, counters=None) -> RunResult:
    """Product of level probabilities and the pooled COV estimate.

    ``cov^2 = sum_s (1 - P_s) / (P_s N) * (1 + gamma_s)``.
    """
    if not levels:
        raise SubsetError("no levels to aggregate")
    pf = 1.0
    cov2 = 0.0
    for lv in levels:
        pf *= lv.conditional_prob
        P = lv.conditional_prob
        cov2 += math.inf if P == 0 else (1.0 - P) / (P * samples_per_level) * (1.0 + lv.gamma)
    result = RunResult(pf, math.sqrt(cov2), list(levels), dict(counters or {}), seed, complete=levels[-1].is_final)
    if not levels[-1].is_final:
        raise BudgetExhaustedError(
            f"final threshold not reached within {len(levels)} levels (last threshold {levels[-1].threshold:.6g})",
            result,
        )
    return result


def subset_simulation(
    evaluator,
    space: InputSpace,
    config: SubsetConfig,
    seed: int,
    on_level: Callable[[SubsetLevel], None] | None = None,
) -> RunResult:
    """Run levels until the final threshold is reached or ``max_levels`` is exhausted."""
    levels: list[SubsetLevel] = []
    level = run_first_level(evaluator, space, config, stream(seed, "level-1"))
    levels.append(level)
    if on_level:
        on_level(level)
    while not level.is_final and len(levels) < config.max_levels:
        _, top = intermediate_threshold(level.outputs, config.n_seeds)
        s = len(levels) + 1
        level = run_conditional_level(
            evaluator,
            space,
            level.samples[top],
            level.outputs[top],
            level.threshold,
            config,
            stream(seed, f"level-{s}"),
            seed_aux=None if level.aux is None else level.aux[top],
            index=s,
        )
        levels.append(level)
        if on_level:
            on_level(level)
    counters = getattr(evaluator, "counters", None)
    return aggregate(
        levels,
        config.samples_per_level,
        seed=seed,
        counters=counters.snapshot() if counters is not None else None,
    )
