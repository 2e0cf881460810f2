"""Call accounting and the plain (no-surrogate) model evaluator."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable

import numpy as np

from .subset import EvaluatorError

Model = Callable[[np.ndarray], np.ndarray]


class CallCounters:
    """Per-model evaluation counts, split by run phase."""

    def __init__(self, n_lf: int = 0):
        self.n_lf = n_lf
        self.hf = 0
        self.lf = [0] * n_lf
        self.by_phase: dict[str, dict[str, int]] = {}
        self.phase = "run"

    def _bump(self, key: str, n: int):
        ph = self.by_phase.setdefault(self.phase, {})
        ph[key] = ph.get(key, 0) + n

    def add_hf(self, n: int = 1):
        self.hf += n
        self._bump("hf", n)

    def add_lf(self, i: int, n: int = 1):
        self.lf[i] += n
        self._bump(f"lf{i + 1}", n)

    def snapshot(self) -> dict[str, int]:
        out = {"hf": self.hf}
        out.update({f"lf{i + 1}": c for i, c in enumerate(self.lf)})
        return out

    @property
    def total(self) -> int:
        return self.hf + sum(self.lf)


def call_model(model: Model, x: np.ndarray, workers: int = 1) -> np.ndarray:
    """Evaluate ``model`` row-batch-wise, optionally over a thread pool.

    Chunks are reassembled in input order, so the result does not depend on
    ``workers``.
    """
    x = np.atleast_2d(x)
    try:
        if workers <= 1 or x.shape[0] < 2 * workers:
            y = np.asarray(model(x), dtype=float).reshape(-1)
        else:
            chunks = np.array_split(x, workers)
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(lambda c: np.asarray(model(c), dtype=float).reshape(-1), chunks))
            y = np.concatenate(parts)
    except Exception as exc:
        for i, row in enumerate(x):
            try:
                model(row[None, :])
            except Exception:
                raise EvaluatorError(f"model failed at sample index {i}: {exc}", index=i) from exc
        raise EvaluatorError(f"model failed on batch: {exc}") from exc
    if y.shape[0] != x.shape[0]:
        raise EvaluatorError(f"model returned {y.shape[0]} values for {x.shape[0]} inputs")
    return y


class ModelEvaluator:
    """Calls the high-fidelity model for every sample; ``refine`` is a no-op."""

    def __init__(self, model: Model, counters: CallCounters | None = None, workers: int = 1):
        self.model = model
        self.counters = counters or CallCounters()
        self.workers = workers

    def begin_level(self, index: int):
        self.counters.phase = f"level-{index}"

    def evaluate(self, x, threshold=None):
        y = call_model(self.model, x, self.workers)
        self.counters.add_hf(len(y))
        return y, np.zeros((len(y), 0))

    def refine(self, x, outputs, aux, threshold):
        return outputs, aux
