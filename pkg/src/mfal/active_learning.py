"""U-function driven active learning inside subset simulation.

A sample is trusted to its surrogate value when ``U = |value - F_s| / sd`` is
at least ``u_threshold`` (2 by default): the surrogate is then confident
about which side of the threshold the sample falls. Otherwise the HF model
is called, every LF model is evaluated at the same point, and the training
sets of all correction GPs grow by one point.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .multifidelity import ModelEnsemble
from .rng import stream

__all__ = [
    "ULearningConfig",
    "AcquisitionEvent",
    "u_single_fidelity",
    "u_multifidelity",
    "LearningEvaluator",
    "evaluate_with_learning",
    "initial_design",
]


def u_single_fidelity(mean, sd, threshold):
    """``|mean - threshold| / sd``; ``+inf`` where ``sd == 0``."""
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    num = np.abs(mean - threshold)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(sd > 0, num / np.where(sd > 0, sd, 1.0), math.inf)
    return u if u.ndim else float(u)


def u_multifidelity(lf_value, correction_mean, correction_sd, threshold):
    return u_single_fidelity(np.asarray(lf_value) + np.asarray(correction_mean), correction_sd, threshold)


@dataclass
class ULearningConfig:
    u_threshold: float = 2.0
    # refit the GPs after every ``retrain_every`` acquisitions (1 = every one)
    retrain_every: int = 1
    reoptimize_every: int = 5
    doe_size: int | None = None
    doe_halfwidth: float = 5.0
    restarts: int = 5

    def __post_init__(self):
        if not self.u_threshold > 0:
            raise ValueError(f"u_threshold must be > 0, got {self.u_threshold}")
        if self.retrain_every < 1 or self.reoptimize_every < 1:
            raise ValueError("retrain_every and reoptimize_every must be >= 1")

    def design_size(self, dimension: int) -> int:
        return self.doe_size if self.doe_size is not None else max(10, 3 * dimension)


@dataclass
class AcquisitionEvent:
    acquisition: int
    level: int | None
    sample: list
    level_threshold: float
    u_value: float
    surrogate_value: float
    surrogate_sd: float
    chosen_lf_index: int | None
    hf_value: float
    hf_calls: int

    def to_record(self) -> dict:
        return asdict(self)


def initial_design(space, size: int, rng: np.random.Generator, halfwidth: float = 5.0) -> np.ndarray:
    """Latin hypercube over ``[-halfwidth, halfwidth]^d`` in standard-normal space, mapped to ``x``."""
    lhs = qmc.LatinHypercube(d=space.dimension, seed=rng)
    u = qmc.scale(lhs.random(size), -halfwidth * np.ones(space.dimension), halfwidth * np.ones(space.dimension))
    return space.from_standard(u)


class LearningEvaluator:
    """Subset-simulation evaluator backed by a :class:`ModelEnsemble`.

    ``aux`` rows are ``[hf_value, lf_1, ..., lf_M]`` with NaN for values not
    computed yet, so duplicated MCMC rows never trigger repeated model calls.
    """

    chunk = 256

    def __init__(self, ensemble: ModelEnsemble, config: ULearningConfig, seed: int = 0,
                 on_event: Callable[[AcquisitionEvent], None] | None = None):
        self.ensemble = ensemble
        self.config = config
        self.seed = seed
        self.events: list[AcquisitionEvent] = []
        self.on_event = on_event
        self.level: int | None = None
        self.selection_counts: dict[int, list[int]] = {}
        self._pending_refit = 0

    @property
    def counters(self):
        return self.ensemble.counters

    @property
    def n_acquisitions(self) -> int:
        return len(self.events)

    def begin_level(self, index: int):
        self.level = index
        self.counters.phase = f"level-{index}"

    def initialize(self, space):
        """Evaluate the initial design on every model and fit the GPs."""
        self.counters.phase = "doe"
        size = self.config.design_size(space.dimension)
        x = initial_design(space, size, stream(self.seed, "doe"), self.config.doe_halfwidth)
        self.ensemble.initialize(x, stream(self.seed, "gp-init"))

    # -- evaluator protocol -------------------------------------------------

    def evaluate(self, x, threshold):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        aux = np.full((len(x), 1 + self.ensemble.n_lf), np.nan)
        y = np.empty(len(x))
        self._resolve(x, y, aux, np.arange(len(x)), threshold)
        return y, aux

    def refine(self, x, outputs, aux, threshold):
        y = outputs.copy()
        aux = aux.copy()
        rows = np.flatnonzero(np.isnan(aux[:, 0]))
        self._resolve(x, y, aux, rows, threshold)
        return y, aux

    # -- internals ----------------------------------------------------------

    def _surrogate(self, x, aux, rows):
        cache = aux[rows, 1:]
        val, sd, chosen = self.ensemble.corrected(x[rows], cache)
        aux[rows, 1:] = cache
        return val, sd, chosen

    def _tally(self, chosen):
        if self.ensemble.multifidelity and chosen.size:
            counts = self.selection_counts.setdefault(self.level or 0, [0] * self.ensemble.n_lf)
            for i, c in enumerate(np.bincount(chosen, minlength=self.ensemble.n_lf)):
                counts[i] += int(c)

    def _resolve(self, x, y, aux, rows, threshold):
        """Fill ``y[rows]`` in row order, acquiring wherever U trips the trigger."""
        rows = np.asarray(rows, dtype=int)
        pos = 0
        while pos < rows.size:
            block = rows[pos : pos + self.chunk]
            val, sd, chosen = self._surrogate(x, aux, block)
            if threshold is None:
                trip = np.array([], dtype=int)
            else:
                u = u_single_fidelity(val, sd, threshold)
                trip = np.flatnonzero(u < self.config.u_threshold)
            if trip.size == 0:
                y[block] = val
                self._tally(chosen)
                pos += block.size
                continue
            k = int(trip[0])
            y[block[:k]] = val[:k]
            self._tally(chosen[:k])
            r = int(block[k])
            y[r] = self._acquire(x, aux, r, threshold, float(val[k]), float(sd[k]), float(u[k]),
                                 None if chosen[k] < 0 else int(chosen[k]))
            pos += k + 1

    def _acquire(self, x, aux, r, threshold, value, sd, u, chosen):
        ens = self.ensemble
        xr = x[r : r + 1]
        phase = ens.counters.phase
        ens.counters.phase = f"{phase}:acquisition"
        try:
            hf = float(ens.call_hf(xr)[0])
            for i in range(ens.n_lf):
                if np.isnan(aux[r, 1 + i]):
                    aux[r, 1 + i] = ens.call_lf(i, xr)[0]
        finally:
            ens.counters.phase = phase
        aux[r, 0] = hf
        ens.add_point(xr, hf, aux[r, 1:])
        event = AcquisitionEvent(
            acquisition=len(self.events) + 1,
            level=self.level,
            sample=[float(v) for v in xr[0]],
            level_threshold=float(threshold),
            u_value=u,
            surrogate_value=value,
            surrogate_sd=sd,
            chosen_lf_index=chosen,
            hf_value=hf,
            hf_calls=ens.counters.hf,
        )
        self.events.append(event)
        if self.on_event:
            self.on_event(event)
        self._pending_refit += 1
        n = len(self.events)
        if self._pending_refit >= self.config.retrain_every:
            reopt = n % self.config.reoptimize_every == 0
            ens.refit(reoptimize=reopt, rng=stream(self.seed, f"gp-reopt-{n}") if reopt else None)
            self._pending_refit = 0
        return hf


def evaluate_with_learning(sample, level_threshold: float, evaluator: LearningEvaluator):
    """Single-sample form: returns ``(value, "surrogate" | "high_fidelity")``."""
    x = np.atleast_2d(np.asarray(sample, dtype=float))
    before = evaluator.n_acquisitions
    y, _ = evaluator.evaluate(x, level_threshold)
    source = "high_fidelity" if evaluator.n_acquisitions > before else "surrogate"
    return float(y[0]), source
