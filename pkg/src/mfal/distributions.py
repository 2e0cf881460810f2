"""Independent marginal input distributions and their standard-normal maps.

The input space is a product of one-dimensional marginals. Samplers and
MCMC moves work in standard-normal space ``u``; models are evaluated in
physical space ``x = T(u)`` where each coordinate is mapped through
``quantile(Phi(u_j))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
from scipy import special

__all__ = [
    "MarginalDistribution",
    "InputSpace",
    "Normal",
    "LogNormal",
    "Uniform",
    "sample",
    "pdf",
    "cdf",
    "quantile",
]

_KINDS = ("normal", "lognormal", "uniform")


@dataclass(frozen=True)
class MarginalDistribution:
    """One coordinate of the input space.

    ``a`` and ``b`` mean (mean, sd) for ``normal``, (log-mean, log-sd) for
    ``lognormal`` and (lower, upper) for ``uniform``.
    """

    kind: str
    a: float
    b: float

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in _KINDS:
            raise ValueError(f"unknown distribution kind {self.kind!r}; expected one of {_KINDS}")
        object.__setattr__(self, "kind", kind)
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise ValueError(f"{kind} parameters must be finite, got ({self.a}, {self.b})")
        if kind in ("normal", "lognormal") and not self.b > 0:
            raise ValueError(f"{kind} requires sd > 0, got {self.b}")
        if kind == "uniform" and not self.a < self.b:
            raise ValueError(f"uniform requires lower < upper, got ({self.a}, {self.b})")

    # -- densities -----------------------------------------------------------

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "normal":
            z = (x - self.a) / self.b
            return np.exp(-0.5 * z * z) / (self.b * math.sqrt(2.0 * math.pi))
        if self.kind == "lognormal":
            xs = np.where(x > 0, x, 1.0)
            z = (np.log(xs) - self.a) / self.b
            dens = np.exp(-0.5 * z * z) / (xs * self.b * math.sqrt(2.0 * math.pi))
            return np.where(x > 0, dens, 0.0)
        inside = (x >= self.a) & (x <= self.b)
        return np.where(inside, 1.0 / (self.b - self.a), 0.0)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "normal":
            return special.ndtr((x - self.a) / self.b)
        if self.kind == "lognormal":
            logx = np.log(np.where(x > 0, x, 1.0))
            return np.where(x > 0, special.ndtr((logx - self.a) / self.b), 0.0)
        return np.clip((x - self.a) / (self.b - self.a), 0.0, 1.0)

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
            raise ValueError("quantile requires p in [0, 1]")
        if self.kind == "uniform":
            return self.a + p * (self.b - self.a)
        if np.any((p == 0) | (p == 1)):
            raise ValueError(f"quantile at p in {{0, 1}} is unbounded for {self.kind}")
        z = special.ndtri(p)
        if self.kind == "normal":
            return self.a + self.b * z
        return np.exp(self.a + self.b * z)

    # -- standard-normal maps -------------------------------------------------

    def from_standard(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "normal":
            return self.a + self.b * u
        if self.kind == "lognormal":
            return np.exp(self.a + self.b * u)
        return self.a + special.ndtr(u) * (self.b - self.a)

    def to_standard(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "normal":
            return (x - self.a) / self.b
        if self.kind == "lognormal":
            return (np.log(x) - self.a) / self.b
        return special.ndtri((x - self.a) / (self.b - self.a))

    @property
    def mean(self) -> float:
        if self.kind == "normal":
            return self.a
        if self.kind == "lognormal":
            return math.exp(self.a + 0.5 * self.b**2)
        return 0.5 * (self.a + self.b)

    @property
    def sd(self) -> float:
        if self.kind == "normal":
            return self.b
        if self.kind == "lognormal":
            return math.sqrt(math.expm1(self.b**2)) * math.exp(self.a + 0.5 * self.b**2)
        return (self.b - self.a) / math.sqrt(12.0)

    # -- config records ------------------------------------------------------

    def to_record(self) -> dict[str, Any]:
        if self.kind == "normal":
            return {"kind": "normal", "mean": self.a, "sd": self.b}
        if self.kind == "lognormal":
            return {"kind": "lognormal", "log_mean": self.a, "log_sd": self.b}
        return {"kind": "uniform", "lower": self.a, "upper": self.b}

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> "MarginalDistribution":
        keys = {
            "normal": ("mean", "sd"),
            "lognormal": ("log_mean", "log_sd"),
            "uniform": ("lower", "upper"),
        }
        kind = str(record.get("kind", "")).lower()
        if kind not in keys:
            raise ValueError(f"kind: unknown distribution kind {record.get('kind')!r}")
        first, second = keys[kind]
        extra = set(record) - {"kind", first, second}
        if extra:
            raise ValueError(f"unexpected keys for {kind}: {sorted(extra)}")
        for key in (first, second):
            if key not in record:
                raise ValueError(f"{key}: missing for {kind} distribution")
        return cls(kind, float(record[first]), float(record[second]))


def Normal(mean: float = 0.0, sd: float = 1.0) -> MarginalDistribution:
    return MarginalDistribution("normal", mean, sd)


def LogNormal(log_mean: float = 0.0, log_sd: float = 1.0) -> MarginalDistribution:
    return MarginalDistribution("lognormal", log_mean, log_sd)


def Uniform(lower: float = 0.0, upper: float = 1.0) -> MarginalDistribution:
    return MarginalDistribution("uniform", lower, upper)


@dataclass(frozen=True)
class InputSpace:
    """Product of independent marginals."""

    marginals: tuple[MarginalDistribution, ...] = field()

    def __init__(self, marginals: Sequence[MarginalDistribution]):
        marginals = tuple(marginals)
        if not marginals:
            raise ValueError("input space needs at least one marginal")
        object.__setattr__(self, "marginals", marginals)

    @property
    def dimension(self) -> int:
        return len(self.marginals)

    @classmethod
    def standard_normal(cls, dimension: int) -> "InputSpace":
        return cls([Normal(0.0, 1.0)] * dimension)

    def from_standard(self, u) -> np.ndarray:
        u = np.atleast_2d(np.asarray(u, dtype=float))
        return np.column_stack([m.from_standard(u[:, j]) for j, m in enumerate(self.marginals)])

    def to_standard(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.column_stack([m.to_standard(x[:, j]) for j, m in enumerate(self.marginals)])

    def pdf(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.ones(x.shape[0])
        for j, m in enumerate(self.marginals):
            out *= m.pdf(x[:, j])
        return out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return sample(self, n, rng)

    def to_records(self) -> list[dict[str, Any]]:
        return [m.to_record() for m in self.marginals]

    @classmethod
    def from_records(cls, records: Sequence[Mapping[str, Any]]) -> "InputSpace":
        return cls([MarginalDistribution.from_record(r) for r in records])


def sample(space: InputSpace, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` i.i.d. rows from ``space`` (standard normals pushed through ``T``)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    u = rng.standard_normal((n, space.dimension))
    return space.from_standard(u)


def pdf(dist: MarginalDistribution, x):
    return dist.pdf(x)


def cdf(dist: MarginalDistribution, x):
    return dist.cdf(x)


def quantile(dist: MarginalDistribution, p):
    return dist.quantile(p)
