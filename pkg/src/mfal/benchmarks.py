"""Analytic benchmark problems and the crude Monte Carlo reference estimator.

Every problem follows the same convention: failure is ``F(x) > threshold``.
Classical limit states written as ``g(x) < 0`` are negated.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Callable

import numpy as np
from scipy import special

from .distributions import InputSpace, LogNormal, Normal

Model = Callable[[np.ndarray], np.ndarray]

__all__ = [
    "LfModel",
    "BenchmarkProblem",
    "OracleResult",
    "mc_oracle",
    "builtin_problems",
    "get_problem",
    "problem_names",
    "load_reference",
    "format_reference_line",
]


@dataclass(frozen=True)
class LfModel:
    model: Model
    cost: float
    name: str = ""


@dataclass(frozen=True)
class BenchmarkProblem:
    name: str
    input_space: InputSpace
    hf: Model
    lf_models: tuple[LfModel, ...]
    failure_threshold: float
    hf_cost: float = 1.0
    oracle_pf: float | None = None
    oracle_source: str = ""
    description: str = ""
    # analytic pf as a function of the threshold, when one exists
    exact_pf: Callable[[float], float] | None = field(default=None, compare=False)

    @property
    def dimension(self) -> int:
        return self.input_space.dimension

    def with_threshold(self, threshold: float) -> "BenchmarkProblem":
        if threshold == self.failure_threshold:
            return self
        pf = self.exact_pf(threshold) if self.exact_pf else None
        return dataclasses.replace(
            self,
            failure_threshold=float(threshold),
            oracle_pf=pf,
            oracle_source="analytic normal tail" if pf is not None else "",
        )


@dataclass(frozen=True)
class OracleResult:
    pf: float
    cov: float
    n_samples: int
    n_failures: int
    seed: int | None = None
    # pf == 0: ``pf`` is then the upper bound 1/N and ``cov`` is inf
    zero_failures: bool = False


def mc_oracle(problem: BenchmarkProblem, n_samples: int, rng: np.random.Generator,
              chunk: int = 1_000_000, seed: int | None = None) -> OracleResult:
    """Crude Monte Carlo: fraction of ``n_samples`` draws with ``F(x) > threshold``."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    failures = 0
    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        x = problem.input_space.sample(n, rng)
        failures += int(np.count_nonzero(problem.hf(x) > problem.failure_threshold))
        done += n
    if failures == 0:
        return OracleResult(1.0 / n_samples, math.inf, n_samples, 0, seed, zero_failures=True)
    pf = failures / n_samples
    if n_samples < 10 / pf:
        warnings.warn(f"{n_samples} samples is fewer than 10/pf = {10 / pf:.3g}", stacklevel=2)
    return OracleResult(pf, math.sqrt((1.0 - pf) / (pf * n_samples)), n_samples, failures, seed)


# -- linear_2d -----------------------------------------------------------------


def _linear_hf(x):
    x = np.atleast_2d(x)
    return (x[:, 0] + x[:, 1]) / math.sqrt(2.0)


def _linear_lf(x):
    x = np.atleast_2d(x)
    return _linear_hf(x) + 0.3 * np.sin(x[:, 0])


def _normal_tail(threshold: float) -> float:
    return float(special.ndtr(-threshold))


# -- four_branch ---------------------------------------------------------------

_R2 = math.sqrt(2.0)


def _four_branch(x, quad=0.1):
    x = np.atleast_2d(x)
    x1, x2 = x[:, 0], x[:, 1]
    q = 3.0 + quad * (x1 - x2) ** 2
    s = (x1 + x2) / _R2
    g = np.stack([q - s, q + s, (x1 - x2) + 6.0 / _R2, (x2 - x1) + 6.0 / _R2])
    return -g.min(axis=0)


def _four_branch_hf(x):
    return _four_branch(x)


def _four_branch_lf_coarse(x):
    return _four_branch(x, quad=0.05)


def _four_branch_lf_bias(x):
    x = np.atleast_2d(x)
    return _four_branch(x) + 0.1 * (x[:, 0] ** 2 + x[:, 1] ** 2) / 10.0


def _four_branch_twin_a(x):
    x = np.atleast_2d(x)
    return _four_branch(x) + 0.05 * x[:, 0]


def _four_branch_twin_b(x):
    x = np.atleast_2d(x)
    return _four_branch(x) + 0.05 * x[:, 1]


# -- triso_proxy ---------------------------------------------------------------
# buffer, IPyC and SiC thickness (um), SiC strength (MPa), IPyC strength factor

_TRISO_SPACE = InputSpace(
    [
        Normal(100.0, 10.0),
        Normal(40.0, 2.5),
        Normal(35.0, 1.2),
        LogNormal(math.log(350.0), 0.1),
        LogNormal(0.0, 0.15),
    ]
)
_TRISO_SCALE = 120.0


def _triso_hf(x):
    x = np.atleast_2d(x)
    buf, ipyc, sic, strength, ipyc_k = x.T
    # thinner buffer leaves less room for fission gas: pressure grows exponentially
    pressure = np.exp(-0.025 * (buf - 100.0))
    shrink = 1.0 + 0.004 * (ipyc - 40.0) ** 2 + 0.02 * (ipyc - 40.0)
    membrane = (35.0 / sic) ** 1.5
    # weak IPyC cracks and concentrates stress in the SiC
    concentration = 1.0 + 0.8 / (1.0 + np.exp(8.0 * (ipyc_k - 0.85)))
    return _TRISO_SCALE * pressure * shrink * membrane * concentration / strength


def _quadratic_taylor(model: Model, space: InputSpace, h: float = 1e-3):
    """Second-order expansion of ``model`` in standard-normal coordinates at the origin."""
    d = space.dimension
    f = lambda u: float(model(space.from_standard(np.asarray(u)[None, :]))[0])
    e = np.eye(d) * h
    f0 = f(np.zeros(d))
    grad = np.array([(f(e[j]) - f(-e[j])) / (2 * h) for j in range(d)])
    hess = np.empty((d, d))
    for i in range(d):
        for j in range(i, d):
            if i == j:
                v = (f(e[i]) - 2 * f0 + f(-e[i])) / h**2
            else:
                v = (f(e[i] + e[j]) - f(e[i] - e[j]) - f(-e[i] + e[j]) + f(-e[i] - e[j])) / (4 * h * h)
            hess[i, j] = hess[j, i] = v
    return f0, grad, hess


@lru_cache(maxsize=None)
def _triso_poly_coeffs():
    return _quadratic_taylor(_triso_hf, _TRISO_SPACE)


def _triso_lf_poly(x):
    f0, grad, hess = _triso_poly_coeffs()
    u = _TRISO_SPACE.to_standard(x)
    return f0 + u @ grad + 0.5 * np.einsum("ni,ij,nj->n", u, hess, u)


def _triso_lf_coarse(x):
    return 0.95 * _triso_hf(x)


# -- registry ------------------------------------------------------------------

_REFERENCE_FILE = "oracle_reference.txt"


def format_reference_line(name: str, res: OracleResult) -> str:
    return f"{name} {res.n_samples} {res.seed} {res.pf!r} {res.cov!r}"


def load_reference(text: str | None = None) -> dict[str, dict]:
    """Parse the reference oracle file: ``name N_m seed pf cov`` per line, ``#`` comments."""
    if text is None:
        text = resources.files("mfal.data").joinpath(_REFERENCE_FILE).read_text()
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, n, seed, pf, cov = line.split()
        out[name] = {"n_samples": int(n), "seed": int(seed), "pf": float(pf), "cov": float(cov)}
    return out


def _with_reference(problem: BenchmarkProblem, refs: dict) -> BenchmarkProblem:
    ref = refs.get(problem.name)
    if problem.oracle_pf is not None or ref is None:
        return problem
    src = f"mc_oracle N_m={ref['n_samples']} seed={ref['seed']} (cov {ref['cov']:.3g})"
    return dataclasses.replace(problem, oracle_pf=ref["pf"], oracle_source=src)


def builtin_problems() -> list[BenchmarkProblem]:
    std2 = InputSpace.standard_normal(2)
    problems = [
        BenchmarkProblem(
            name="linear_2d",
            input_space=std2,
            hf=_linear_hf,
            lf_models=(LfModel(_linear_lf, 0.01, "lf_sin_bias"),),
            failure_threshold=4.5,
            oracle_pf=_normal_tail(4.5),
            oracle_source="analytic normal tail",
            description="(x1 + x2)/sqrt(2) > threshold, x ~ N(0, I); pf = Phi(-threshold)",
            exact_pf=_normal_tail,
        ),
        BenchmarkProblem(
            name="four_branch",
            input_space=std2,
            hf=_four_branch_hf,
            lf_models=(
                LfModel(_four_branch_lf_coarse, 0.01, "lf_coarse_quadratic"),
                LfModel(_four_branch_lf_bias, 0.05, "lf_radial_bias"),
            ),
            failure_threshold=0.0,
            description="negated four-branch series system",
        ),
        BenchmarkProblem(
            name="four_branch_twin",
            input_space=std2,
            hf=_four_branch_hf,
            lf_models=(
                LfModel(_four_branch_twin_a, 0.001, "lf_bias_x1"),
                LfModel(_four_branch_twin_b, 0.1, "lf_bias_x2"),
            ),
            failure_threshold=0.0,
            description="four-branch system with two mirror-image LF models, costs 100:1",
        ),
        BenchmarkProblem(
            name="triso_proxy",
            input_space=_TRISO_SPACE,
            hf=_triso_hf,
            lf_models=(
                LfModel(_triso_lf_poly, 0.001, "lf_quadratic"),
                LfModel(_triso_lf_coarse, 0.05, "lf_underestimate"),
            ),
            failure_threshold=1.15,
            description="5-input SiC stress-to-strength ratio; LF2 underestimates by 5%",
        ),
    ]
    try:
        refs = load_reference()
    except FileNotFoundError:
        refs = {}
    return [_with_reference(p, refs) for p in problems]


def problem_names() -> list[str]:
    return [p.name for p in builtin_problems()]


def get_problem(name: str, threshold: float | None = None) -> BenchmarkProblem:
    for p in builtin_problems():
        if p.name == name:
            return p if threshold is None else p.with_threshold(threshold)
    raise KeyError(f"unknown problem {name!r}; known: {problem_names()}")
