"""Run configuration: a JSON document validated into typed sections."""

from __future__ import annotations

import dataclasses
import json
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .benchmarks import BenchmarkProblem, get_problem, problem_names
from .distributions import InputSpace

__all__ = ["ConfigError", "Method", "RunConfig", "load_config", "parse_config"]


class ConfigError(ValueError):
    pass


class Method(str, Enum):
    MONTE_CARLO = "MonteCarlo"
    SUBSET = "Subset"
    AL_SUBSET = "ALSubset"
    MFAL_SUBSET = "MFALSubset"

    @property
    def uses_subset(self) -> bool:
        return self is not Method.MONTE_CARLO

    @property
    def uses_learning(self) -> bool:
        return self in (Method.AL_SUBSET, Method.MFAL_SUBSET)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ProblemSpec(_Strict):
    name: str
    threshold: Optional[float] = None
    inputs: Optional[list[dict[str, Any]]] = None

    @field_validator("name")
    @classmethod
    def _known(cls, v):
        if v not in problem_names():
            raise ValueError(f"unknown problem {v!r}; known: {problem_names()}")
        return v


class MonteCarloSection(_Strict):
    samples: int = Field(gt=0)


class SubsetSection(_Strict):
    samples_per_level: int = Field(default=1000, ge=2)
    p0: float = Field(default=0.1, gt=0.0, lt=1.0)
    max_levels: int = Field(default=15, ge=1)
    proposal_scale: Union[float, list[float]] = 1.0


class ULearnSection(_Strict):
    u_threshold: float = Field(default=2.0, gt=0.0)
    retrain_every: int = Field(default=1, ge=1)
    reoptimize_every: int = Field(default=5, ge=1)
    doe_size: Optional[int] = Field(default=None, ge=2)
    restarts: int = Field(default=5, ge=1)


class CostSection(_Strict):
    beta: float = Field(default=1.0, ge=0.0)


class RunConfig(_Strict):
    problem: ProblemSpec
    method: Method
    seed: int = Field(ge=0)
    monte_carlo: Optional[MonteCarloSection] = None
    subset: Optional[SubsetSection] = None
    ulearn: Optional[ULearnSection] = None
    cost: Optional[CostSection] = None
    workers: int = Field(default=1, ge=1)
    output_dir: Optional[str] = None

    @field_validator("problem", mode="before")
    @classmethod
    def _problem_name(cls, v):
        return {"name": v} if isinstance(v, str) else v

    @model_validator(mode="after")
    def _sections(self):
        m = self.method
        need = {
            "monte_carlo": m is Method.MONTE_CARLO,
            "subset": m.uses_subset,
            "ulearn": m.uses_learning,
        }
        for key, required in need.items():
            present = getattr(self, key) is not None
            if required and not present:
                raise ValueError(f"{key}: section required for method {m.value}")
            if present and not required:
                raise ValueError(f"{key}: section not used by method {m.value}")
        if self.cost is not None and m is not Method.MFAL_SUBSET:
            raise ValueError(f"cost: only valid for method {Method.MFAL_SUBSET.value}")
        return self

    def resolve_problem(self) -> BenchmarkProblem:
        p = get_problem(self.problem.name, self.problem.threshold)
        if self.problem.inputs is not None:
            try:
                space = InputSpace.from_records(self.problem.inputs)
            except ValueError as exc:
                raise ConfigError(f"problem.inputs: {exc}") from exc
            if space.dimension != p.dimension:
                raise ConfigError(
                    f"problem.inputs: {space.dimension} marginals given, problem {p.name} needs {p.dimension}"
                )
            p = dataclasses.replace(p, input_space=space, oracle_pf=None, oracle_source="")
        return p

    def canonical(self) -> dict:
        """The config as persisted with results; runtime-only fields are dropped."""
        return self.model_dump(mode="json", exclude={"workers", "output_dir"}, exclude_none=True)


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def parse_config(data: Any) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>: config must be a JSON object")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not text.strip():
        raise ConfigError(f"{path}: config file is empty")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: parse error at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config(data)
