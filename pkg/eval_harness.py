# eval_harness.py
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.spatial.distance import jensenshannon

from bayesopt import AcquisitionTrace, BayesOptConfig
from belief import (
    BeliefGrid,
    ParameterGrid,
    classifier_trace,
    generative_beliefs,
    generative_trace,
    surrogate_beliefs,
    true_beliefs,
)
from density_models import fit_generative
from divergence import DEFAULT_CLAMP_HI, DEFAULT_CLAMP_LO, DEFAULT_DIVERGENCES, DivergenceSpec
from randomness import derive_rng
from stats_models import Dataset, ProblemSpec, simulate_true

logger = logging.getLogger("eval_harness")
if not logger.handlers:
    h = logging.StreamHandler()
    h.setFormatter(logging.Formatter("%(asctime)s [%(levelname)s] %(message)s"))
    logger.addHandler(h)
    logger.setLevel(os.getenv("LOG_LEVEL", "INFO"))

MethodName = Literal["cv", "eb", "vb", "gen_bayesopt", "gen_grid"]
ALL_METHODS = ("cv", "eb", "vb", "gen_bayesopt", "gen_grid")
JSD_MAX = float(np.sqrt(np.log(2.0)))


# ---------- Configuration ----------
class ClampConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    lo: float = DEFAULT_CLAMP_LO
    # TVD always truncates at 0 regardless of hi
    hi: float = DEFAULT_CLAMP_HI
    enabled: bool = True

    @model_validator(mode="after")
    def _check(self):
        if not self.lo < self.hi:
            raise ValueError(f"clamp lo ({self.lo}) must be below hi ({self.hi})")
        return self


def _list_problems(name: str, values) -> List[str]:
    if not values:
        return [f"{name} must not be empty"]
    if len(set(values)) != len(values):
        return [f"{name} contains duplicates"]
    return []


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    problem: ProblemSpec
    divergences: List[str] = Field(default_factory=lambda: list(DEFAULT_DIVERGENCES))
    methods: List[MethodName] = Field(default_factory=lambda: list(ALL_METHODS))
    seeds: List[int] = Field(default_factory=lambda: list(range(50)))
    bayesopt: BayesOptConfig = Field(default_factory=BayesOptConfig)
    tempering: float = Field(default=1.0, gt=0)
    clamp: ClampConfig = Field(default_factory=ClampConfig)
    # one trace per (seed, method, divergence) instead of one per (seed, method)
    rebuild_trace_per_divergence: bool = False

    @field_validator("seeds", mode="before")
    @classmethod
    def _seed_count(cls, v):
        if isinstance(v, int) and not isinstance(v, bool):
            return list(range(v))
        return v

    @field_validator("divergences")
    @classmethod
    def _known_divergences(cls, v):
        problems = _list_problems("divergences", v)
        for name in v:
            try:
                DivergenceSpec.parse(name)
            except ValueError as exc:
                problems.append(f"divergence '{name}': {exc}")
        if problems:
            raise ValueError("; ".join(problems))
        return v

    @field_validator("methods")
    @classmethod
    def _distinct_methods(cls, v):
        problems = _list_problems("methods", v)
        if problems:
            raise ValueError("; ".join(problems))
        return v

    @field_validator("seeds")
    @classmethod
    def _valid_seeds(cls, v):
        problems = _list_problems("seeds", v)
        if any(s < 0 for s in v):
            problems.append("seeds must be nonnegative")
        if problems:
            raise ValueError("; ".join(problems))
        return v

    @model_validator(mode="after")
    def _check_clamped(self):
        # divergence names already parse; only the configured clamp can still reject them
        problems = []
        for name in self.divergences:
            try:
                self._parse(name)
            except ValueError as exc:
                problems.append(f"divergence '{name}': {exc}")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def _parse(self, name: str) -> DivergenceSpec:
        return DivergenceSpec.parse(name, clamp_lo=self.clamp.lo, clamp_hi=self.clamp.hi,
                                    clamp=self.clamp.enabled)

    def divergence_specs(self) -> List[DivergenceSpec]:
        return [self._parse(n) for n in self.divergences]

    def divergence(self, name: str) -> DivergenceSpec:
        wanted = self._parse(name).name
        for spec in self.divergence_specs():
            if spec.name == wanted:
                return spec
        raise KeyError(f"divergence '{name}' is not configured; choose from {self.divergences}")


# ---------- Metric ----------
def jsd(p: BeliefGrid, q: BeliefGrid) -> float:
    """Jensen-Shannon distance (natural log) between two beliefs on the same grid."""
    if not p.grid.same_as(q.grid):
        raise ValueError(f"beliefs live on different grids {p.grid.shape} and {q.grid.shape}")
    value = float(jensenshannon(p.mass, q.mass))
    # identical inputs can round to a tiny negative divergence inside the sqrt
    return 0.0 if np.isnan(value) else min(value, JSD_MAX)


# ---------- Results ----------
@dataclass(frozen=True)
class CellOutcome:
    seed: int
    method: str
    jsds: Dict[str, float]
    error: Optional[str] = None
    beliefs: Optional[Dict[str, BeliefGrid]] = None
    traces: Optional[Dict[str, AcquisitionTrace]] = None


@dataclass
class ResultTable:
    true_process: str
    divergences: List[str]
    methods: List[str]
    seeds: List[int]
    # (divergence, method) -> seed -> jsd; NaN marks a failed cell
    values: Dict[Tuple[str, str], Dict[int, float]]
    failures: List[Tuple[int, str, str]] = field(default_factory=list)
    cells: List[CellOutcome] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for div in self.divergences:
            for method in self.methods:
                per_seed = [self.values[(div, method)].get(s, np.nan) for s in self.seeds]
                finite = [v for v in per_seed if np.isfinite(v)]
                rows.append({
                    "true_process": self.true_process,
                    "divergence": div,
                    "method": method,
                    "mean_jsd": float(np.mean(finite)) if finite else np.nan,
                    "n_seeds": len(finite),
                    "per_seed": "[" + ", ".join(f"{v:.10g}" for v in per_seed) + "]",
                })
        return pd.DataFrame(rows)

    def to_csv(self) -> str:
        return self.to_frame().to_csv(index=False, float_format="%.10g", lineterminator="\n")

    def pivot(self) -> pd.DataFrame:
        frame = self.to_frame()
        table = frame.pivot(index="divergence", columns="method", values="mean_jsd")
        return table.reindex(index=self.divergences, columns=self.methods)

    def pivot_csv(self) -> str:
        return self.pivot().to_csv(float_format="%.10g", lineterminator="\n")


# ---------- Cells ----------
def _check_trace(trace: AcquisitionTrace):
    if trace.error is not None:
        raise RuntimeError(f"acquisition failed after {len(trace.records)} evaluations: {trace.error}")


def observed_data(config: ExperimentConfig, seed: int) -> Dataset:
    spec = config.problem
    return simulate_true(spec, spec.n_obs, derive_rng(seed, "observed"))


def method_beliefs(config: ExperimentConfig, seed: int, method: str, x_obs: Dataset,
                   divs: Sequence[DivergenceSpec], grid: ParameterGrid
                   ) -> Tuple[Dict[str, BeliefGrid], Dict[str, AcquisitionTrace]]:
    """Beliefs of one method per divergence, plus the traces they came from.

    Traces are keyed "shared", or by divergence name when rebuilt per divergence.
    """
    spec = config.problem
    w = config.tempering
    if method not in ALL_METHODS:
        raise ValueError(f"unknown method '{method}', expected one of {ALL_METHODS}")
    if method == "gen_grid":
        g = fit_generative(spec, x_obs, derive_rng(seed, "generative"))
        return generative_beliefs(spec, divs, x_obs, g, "grid", grid=grid, tempering=w), {}

    g = fit_generative(spec, x_obs, derive_rng(seed, "generative")) if method == "gen_bayesopt" else None

    def build(*keys) -> AcquisitionTrace:
        rng = derive_rng(seed, "trace", method, *keys)
        if g is None:
            trace = classifier_trace(spec, x_obs, method, config.bayesopt, rng)
        else:
            trace = generative_trace(spec, g, x_obs, config.bayesopt, rng)
        _check_trace(trace)
        return trace

    traces: Dict[str, AcquisitionTrace] = {}
    if not config.rebuild_trace_per_divergence:
        traces["shared"] = build()
        return surrogate_beliefs(traces["shared"], divs, spec, grid=grid, tempering=w), traces
    beliefs = {}
    for div in divs:
        traces[div.name] = build(div.name)
        beliefs.update(surrogate_beliefs(traces[div.name], [div], spec, grid=grid, tempering=w))
    return beliefs, traces


def run_cell(config: ExperimentConfig, seed: int, method: str,
             keep_artifacts: bool = False) -> CellOutcome:
    """Belief per configured divergence for one (seed, method) and its JSD to the reference."""
    divs = config.divergence_specs()
    grid = ParameterGrid.from_spec(config.problem)
    x_obs = observed_data(config, seed)
    reference = true_beliefs(config.problem, divs, x_obs, grid=grid, tempering=config.tempering)
    beliefs, traces = method_beliefs(config, seed, method, x_obs, divs, grid)
    jsds = {d.name: jsd(beliefs[d.name], reference[d.name]) for d in divs}
    return CellOutcome(seed=seed, method=method, jsds=jsds,
                       beliefs=beliefs if keep_artifacts else None,
                       traces=traces if keep_artifacts else None)


def _safe_cell(config: ExperimentConfig, seed: int, method: str, keep_artifacts: bool) -> CellOutcome:
    logger.info("cell seed=%d method=%s started", seed, method)
    try:
        outcome = run_cell(config, seed, method, keep_artifacts)
    except Exception as exc:
        logger.exception("cell seed=%d method=%s failed", seed, method)
        return CellOutcome(seed=seed, method=method, jsds={}, error=f"{type(exc).__name__}: {exc}")
    logger.info("cell seed=%d method=%s finished", seed, method)
    return outcome


def run_experiment(config: ExperimentConfig, threads: Optional[int] = None,
                   keep_artifacts: bool = False) -> ResultTable:
    """Every (seed, method) cell, in parallel when threads > 1; failures are recorded, not raised."""
    cells = [(seed, method) for seed in config.seeds for method in config.methods]
    workers = max(1, int(threads or 1))
    if workers == 1 or len(cells) == 1:
        outcomes = [_safe_cell(config, s, m, keep_artifacts) for s, m in cells]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(cells))) as pool:
            futures = [pool.submit(_safe_cell, config, s, m, keep_artifacts) for s, m in cells]
            outcomes = [f.result() for f in futures]
    return collect(config, outcomes)


def collect(config: ExperimentConfig, outcomes: List[CellOutcome]) -> ResultTable:
    names = [d.name for d in config.divergence_specs()]
    values = {(d, m): {} for d in names for m in config.methods}
    failures = []
    for out in sorted(outcomes, key=lambda o: (o.seed, config.methods.index(o.method))):
        if out.error is not None:
            failures.append((out.seed, out.method, out.error))
        for d in names:
            values[(d, out.method)][out.seed] = out.jsds.get(d, np.nan)
    return ResultTable(true_process=config.problem.true_process.label, divergences=names,
                       methods=list(config.methods), seeds=list(config.seeds), values=values,
                       failures=failures, cells=list(outcomes))

