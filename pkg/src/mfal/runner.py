"""Execute a :class:`RunConfig` and persist its results.

Files written to the output directory:

``result.json``
    summary (sorted keys, no timestamps, so identical runs are byte-identical)
``table.txt``
    the same numbers as a fixed-width table
``levels.jsonl`` / ``acquisitions.jsonl``
    one record per subset level / per HF acquisition
``FAILED``
    present only when the run did not complete; holds the reason
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .active_learning import AcquisitionEvent, LearningEvaluator, ULearningConfig
from .benchmarks import BenchmarkProblem, mc_oracle
from .config import ConfigError, Method, RunConfig
from .evaluation import CallCounters, ModelEvaluator, call_model
from .gp import GpFitError
from .multifidelity import CostFunction, LfModelHandle, ModelEnsemble
from .rng import child_seed, stream
from .subset import (
    BudgetExhaustedError,
    DegenerateLevelError,
    EvaluatorError,
    SubsetConfig,
    SubsetLevel,
    subset_simulation,
)

__all__ = [
    "EXIT_OK",
    "EXIT_CONFIG",
    "EXIT_BUDGET",
    "EXIT_NUMERICAL",
    "OUTPUT_DIR_ENV",
    "RunOutcome",
    "ReplicationSummary",
    "execute",
    "run",
    "replicate",
    "resolve_output_dir",
]

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_BUDGET = 2
EXIT_NUMERICAL = 3

OUTPUT_DIR_ENV = "MFAL_OUTPUT_DIR"

NUMERICAL_ERRORS = (GpFitError, DegenerateLevelError, EvaluatorError, np.linalg.LinAlgError, FloatingPointError)


@dataclass
class RunOutcome:
    summary: dict
    levels: list[dict] = field(default_factory=list)
    acquisitions: list[dict] = field(default_factory=list)
    output_dir: Path | None = None

    @property
    def status(self) -> str:
        return self.summary["status"]

    @property
    def exit_code(self) -> int:
        return {"complete": EXIT_OK, "budget_exhausted": EXIT_BUDGET}.get(self.status, EXIT_NUMERICAL)

    @property
    def pf(self) -> float | None:
        return self.summary["pf"]

    @property
    def cov(self) -> float | None:
        return self.summary["cov"]

    @property
    def hf_calls(self) -> int:
        return self.summary["counters"]["hf"]


def _float(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


def _problem_record(p: BenchmarkProblem) -> dict:
    return {
        "name": p.name,
        "threshold": p.failure_threshold,
        "dimension": p.dimension,
        "inputs": p.input_space.to_records(),
        "oracle_pf": p.oracle_pf,
        "oracle_source": p.oracle_source,
        "lf_costs": [m.cost for m in p.lf_models],
    }


def _subset_config(cfg: RunConfig, problem: BenchmarkProblem) -> SubsetConfig:
    s = cfg.subset
    return SubsetConfig(
        samples_per_level=s.samples_per_level,
        p0=s.p0,
        max_levels=s.max_levels,
        final_threshold=problem.failure_threshold,
        proposal_scale=s.proposal_scale,
    )


def _ulearn_config(cfg: RunConfig) -> ULearningConfig:
    u = cfg.ulearn
    return ULearningConfig(
        u_threshold=u.u_threshold,
        retrain_every=u.retrain_every,
        reoptimize_every=u.reoptimize_every,
        doe_size=u.doe_size,
        restarts=u.restarts,
    )


def _monte_carlo(cfg: RunConfig, problem: BenchmarkProblem, workers: int) -> dict:
    hf = problem.hf
    wrapped = dataclasses.replace(problem, hf=lambda x: call_model(hf, x, workers))
    res = mc_oracle(wrapped, cfg.monte_carlo.samples, stream(cfg.seed, "monte-carlo"), seed=cfg.seed)
    return {
        "pf": 0.0 if res.zero_failures else res.pf,
        "cov": _float(res.cov),
        "n_failures": res.n_failures,
        "zero_failures": res.zero_failures,
        "counters": {"hf": res.n_samples},
        "calls_by_phase": {"monte-carlo": {"hf": res.n_samples}},
    }


def execute(cfg: RunConfig, workers: int | None = None) -> RunOutcome:
    """Run ``cfg`` in memory. Failures are reported in ``summary['status']``."""
    workers = cfg.workers if workers is None else workers
    problem = cfg.resolve_problem()
    summary: dict = {
        "method": cfg.method.value,
        "seed": cfg.seed,
        "problem": _problem_record(problem),
        "config": cfg.canonical(),
        "status": "complete",
        "error": None,
        "pf": None,
        "cov": None,
    }
    if cfg.method is Method.MONTE_CARLO:
        summary.update(_monte_carlo(cfg, problem, workers))
        summary["n_levels"] = 0
        return RunOutcome(summary)

    levels: list[dict] = []
    events: list[dict] = []
    def on_level(lv: SubsetLevel):
        levels.append(lv.summary())

    def on_event(ev: AcquisitionEvent):
        events.append(ev.to_record())

    lf = problem.lf_models if cfg.method is Method.MFAL_SUBSET else ()
    counters = CallCounters(len(lf))
    learner = None
    if cfg.method is Method.SUBSET:
        evaluator = ModelEvaluator(problem.hf, counters, workers)
    else:
        ucfg = _ulearn_config(cfg)
        handles = [LfModelHandle(i, m.model, m.cost, m.name) for i, m in enumerate(lf)]
        cost = CostFunction(cfg.cost.beta) if cfg.cost is not None else None
        ensemble = ModelEnsemble(problem.hf, handles, cost, counters, workers, restarts=ucfg.restarts)
        learner = LearningEvaluator(ensemble, ucfg, cfg.seed, on_event=on_event)
        evaluator = learner

    try:
        if learner is not None:
            learner.initialize(problem.input_space)
        result = subset_simulation(evaluator, problem.input_space, _subset_config(cfg, problem), cfg.seed, on_level)
        summary["pf"] = result.pf_estimate
        summary["cov"] = _float(result.cov_estimate)
    except BudgetExhaustedError as exc:
        summary["status"] = "budget_exhausted"
        summary["error"] = str(exc)
        summary["pf_partial"] = exc.partial.pf_estimate
    except NUMERICAL_ERRORS as exc:
        summary["status"] = "numerical_failure"
        summary["error"] = f"{type(exc).__name__}: {exc}"
        log.error("numerical failure: %s", exc)

    summary["counters"] = counters.snapshot()
    summary["calls_by_phase"] = {k: dict(v) for k, v in counters.by_phase.items()}
    summary["n_levels"] = len(levels)
    summary["levels"] = levels
    if learner is not None:
        summary["acquisitions"] = learner.n_acquisitions
        summary["doe_size"] = learner.config.design_size(problem.dimension)
        if learner.ensemble.multifidelity:
            summary["selection_counts"] = {str(k): v for k, v in sorted(learner.selection_counts.items())}
            summary["degradations"] = list(learner.ensemble.degradations)
    return RunOutcome(summary, levels, events)


# -- persistence ---------------------------------------------------------------


def resolve_output_dir(cfg: RunConfig, override: str | os.PathLike | None = None) -> Path:
    """Explicit argument, then ``$MFAL_OUTPUT_DIR``, then the config, then a default under ``runs/``."""
    for cand in (override, os.environ.get(OUTPUT_DIR_ENV), cfg.output_dir):
        if cand:
            return Path(cand)
    return Path("runs") / f"{cfg.problem.name}_{cfg.method.value}_seed{cfg.seed}"


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False)


def _jsonl(records: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True, allow_nan=False) + "\n" for r in records)


def _fmt(v, spec: str) -> str:
    return "-" if v is None else format(v, spec)


def format_table(summary: dict) -> str:
    p = summary["problem"]
    c = summary["counters"]
    lf = " ".join(f"{k}={v}" for k, v in sorted(c.items()) if k != "hf") or "-"
    rows = [
        ("Method", "Failure prob.", "COV", "# model evals. (HF)", "# LF evals."),
        (summary["method"], _fmt(summary["pf"], ".4e"), _fmt(summary["cov"], ".3f"), str(c["hf"]), lf),
    ]
    if p["oracle_pf"] is not None:
        rows.append(("oracle", format(p["oracle_pf"], ".4e"), "-", "-", "-"))
    widths = [max(len(r[i]) for r in rows) for i in range(5)]
    lines = [
        f"problem {p['name']}  threshold {p['threshold']!r}  seed {summary['seed']}  status {summary['status']}",
        "",
    ]
    for r in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
    if p["oracle_pf"] is not None:
        lines.append(f"oracle source: {p['oracle_source']}")
    return "\n".join(lines) + "\n"


def persist(outcome: RunOutcome, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    (out / "result.json").write_text(_dumps(outcome.summary) + "\n")
    (out / "table.txt").write_text(format_table(outcome.summary))
    (out / "levels.jsonl").write_text(_jsonl(outcome.levels))
    (out / "acquisitions.jsonl").write_text(_jsonl(outcome.acquisitions))
    marker = out / "FAILED"
    if outcome.status != "complete":
        marker.write_text(f"{outcome.status}: {outcome.summary['error']}\n")
    elif marker.exists():
        marker.unlink()
    outcome.output_dir = out
    return out


def run(cfg: RunConfig, output_dir: str | os.PathLike | None = None, workers: int | None = None) -> RunOutcome:
    outcome = execute(cfg, workers)
    persist(outcome, resolve_output_dir(cfg, output_dir))
    return outcome


# -- replication ---------------------------------------------------------------


@dataclass
class ReplicationSummary:
    runs: list[dict]
    mean_pf: float
    sd_pf: float
    empirical_cov: float | None
    mean_reported_cov: float | None

    @property
    def n(self) -> int:
        return len(self.runs)

    @property
    def cov_ratio(self) -> float | None:
        if self.empirical_cov is None or not self.mean_reported_cov:
            return None
        return self.empirical_cov / self.mean_reported_cov

    @property
    def cov_consistent(self) -> bool | None:
        """Empirical COV within a factor 2 of the mean reported COV."""
        r = self.cov_ratio
        return None if r is None else 0.5 <= r <= 2.0

    def to_dict(self) -> dict:
        return {
            "n_replications": self.n,
            "mean_pf": self.mean_pf,
            "sd_pf": self.sd_pf,
            "empirical_cov": self.empirical_cov,
            "mean_reported_cov": self.mean_reported_cov,
            "cov_ratio": self.cov_ratio,
            "cov_consistent": self.cov_consistent,
            "runs": self.runs,
        }


def replication_seeds(seed: int, n: int) -> list[int]:
    """Replication 0 reuses ``seed``; the rest get hashed child seeds."""
    return [seed] + [child_seed(seed, f"replication-{k}") for k in range(1, n)]


def replicate(cfg: RunConfig, n: int, output_dir: str | os.PathLike | None = None,
              workers: int | None = None) -> ReplicationSummary:
    if n < 1:
        raise ConfigError("n_replications must be >= 1")
    runs = []
    for k, s in enumerate(replication_seeds(cfg.seed, n)):
        out = execute(cfg.model_copy(update={"seed": s}), workers)
        sm = out.summary
        runs.append({"replication": k, "seed": s, "status": sm["status"], "pf": sm["pf"], "cov": sm["cov"],
                     "counters": sm["counters"]})
    pfs = np.array([r["pf"] for r in runs if r["pf"] is not None], dtype=float)
    covs = np.array([r["cov"] for r in runs if r["cov"] is not None], dtype=float)
    mean = float(pfs.mean()) if pfs.size else math.nan
    sd = float(pfs.std(ddof=1)) if pfs.size > 1 else 0.0
    emp = sd / mean if pfs.size > 1 and mean > 0 else None
    summary = ReplicationSummary(runs, mean, sd, emp, float(covs.mean()) if covs.size else None)
    if output_dir is not None or os.environ.get(OUTPUT_DIR_ENV) or cfg.output_dir:
        out = resolve_output_dir(cfg, output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "replicate.json").write_text(_dumps({"config": cfg.canonical(), **summary.to_dict()}) + "\n")
    return summary
