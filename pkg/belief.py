# belief.py
import logging
import os
from dataclasses import dataclass
from typing import Callable, Dict, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from bayesopt import AcquisitionTrace, BayesOptConfig, LogRatioRecord, run_bayesopt
from classifier import Method, estimate_log_ratio
from density_models import GenerativeModel, generative_log_ratio
from divergence import DivergenceSpec, loss_from_log_ratios
from gp_core import GPModel, condition, fit_gp
from stats_models import Dataset, ProblemSpec, log_density_model, log_density_true

logger = logging.getLogger("belief")
if not logger.handlers:
    h = logging.StreamHandler()
    h.setFormatter(logging.Formatter("%(asctime)s [%(levelname)s] %(message)s"))
    logger.addHandler(h)
    logger.setLevel(os.getenv("LOG_LEVEL", "INFO"))

_GRID_CHUNK = 8192

RatioFn = Callable[[np.ndarray], np.ndarray]


class DegenerateBeliefError(ArithmeticError):
    pass


# ---------- Grid ----------
def _trapezoid_weights(axis: np.ndarray) -> np.ndarray:
    gaps = np.diff(axis)
    w = np.zeros_like(axis)
    w[:-1] += 0.5 * gaps
    w[1:] += 0.5 * gaps
    return w


@dataclass(frozen=True)
class ParameterGrid:
    axes: Tuple[np.ndarray, ...]
    names: Tuple[str, ...]

    @classmethod
    def from_spec(cls, spec: ProblemSpec) -> "ParameterGrid":
        axes = tuple(np.linspace(lo, hi, spec.grid_resolution) for lo, hi in spec.param_bounds)
        return cls(axes=axes, names=spec.param_names)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(a.size for a in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.column_stack([m.reshape(-1) for m in mesh])

    @property
    def weights(self) -> np.ndarray:
        """Product trapezoid cell measure per point, in points order."""
        w = np.ones(1)
        for axis in self.axes:
            w = np.multiply.outer(w, _trapezoid_weights(axis)).reshape(-1)
        return w

    def same_as(self, other: "ParameterGrid") -> bool:
        return self.shape == other.shape and all(
            np.array_equal(a, b) for a, b in zip(self.axes, other.axes))


@dataclass(frozen=True)
class BeliefGrid:
    grid: ParameterGrid
    losses: np.ndarray
    density: np.ndarray

    @property
    def mass(self) -> np.ndarray:
        return self.density * self.grid.weights

    def mode(self) -> np.ndarray:
        return self.grid.points[int(np.argmax(self.density))]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.grid.points, columns=list(self.grid.names))
        frame["density"] = self.density
        return frame


def uniform_prior(grid: ParameterGrid) -> np.ndarray:
    return np.ones(grid.size)


# ---------- Normalisation ----------
def belief_from_losses(grid: ParameterGrid, losses, n_obs: int, prior=None,
                       tempering: float = 1.0) -> BeliefGrid:
    """density proportional to exp(-w * n * loss) * prior, normalised under the grid weights."""
    losses = np.asarray(losses, dtype=float).reshape(-1)
    prior = uniform_prior(grid) if prior is None else np.asarray(prior, dtype=float).reshape(-1)
    if losses.shape != (grid.size,) or prior.shape != (grid.size,):
        raise ValueError(f"grid has {grid.size} points; got {losses.size} losses and {prior.size} prior values")
    if np.any(np.isnan(losses)) or np.any(losses == -np.inf):
        raise ValueError("losses must be finite or +inf")
    if np.any(prior < 0) or not np.any(prior > 0):
        raise ValueError("prior must be nonnegative and not identically zero")

    with np.errstate(divide="ignore", invalid="ignore"):
        log_w = np.where(np.isinf(losses) | (prior == 0), -np.inf,
                         -tempering * n_obs * losses + np.log(prior))
    top = np.max(log_w)
    if not np.isfinite(top):
        raise DegenerateBeliefError("every grid point has zero weight")
    unnorm = np.exp(log_w - top)
    z = float(np.sum(unnorm * grid.weights))
    if not (z > 0 and np.isfinite(z)):
        raise DegenerateBeliefError("belief normaliser underflowed")
    return BeliefGrid(grid=grid, losses=losses, density=unnorm / z)


def _grid_losses(points: np.ndarray, divs: Sequence[DivergenceSpec], ratio_fn: RatioFn) -> Dict[str, np.ndarray]:
    out = {d.name: np.empty(points.shape[0]) for d in divs}
    for s in range(0, points.shape[0], _GRID_CHUNK):
        rho = ratio_fn(points[s:s + _GRID_CHUNK])
        for d in divs:
            out[d.name][s:s + _GRID_CHUNK] = loss_from_log_ratios(d, rho, axis=-1)
    return out


def _beliefs(grid, divs, ratio_fn, n_obs, prior, tempering) -> Dict[str, BeliefGrid]:
    losses = _grid_losses(grid.points, divs, ratio_fn)
    return {d.name: belief_from_losses(grid, losses[d.name], n_obs, prior, tempering) for d in divs}


def belief_from_log_ratios(grid: ParameterGrid, div: DivergenceSpec, log_ratios, prior=None,
                           tempering: float = 1.0) -> BeliefGrid:
    rho = np.asarray(log_ratios, dtype=float)
    losses = loss_from_log_ratios(div, rho, axis=-1)
    return belief_from_losses(grid, losses, rho.shape[-1], prior, tempering)


# ---------- Exact densities ----------
def true_log_ratios(spec: ProblemSpec, x_obs: Dataset, thetas) -> np.ndarray:
    """(m, n) matrix log p(X_i | theta) - log q_T(X_i)."""
    th = np.atleast_2d(np.asarray(thetas, dtype=float))
    with np.errstate(invalid="ignore"):
        return log_density_model(spec, th, x_obs) - log_density_true(spec, x_obs)[None, :]


def true_beliefs(spec: ProblemSpec, divs: Sequence[DivergenceSpec], x_obs: Dataset, *,
                 grid: Optional[ParameterGrid] = None, prior=None,
                 tempering: float = 1.0) -> Dict[str, BeliefGrid]:
    grid = grid or ParameterGrid.from_spec(spec)
    q_t = log_density_true(spec, x_obs)[None, :]

    def ratio_fn(pts):
        with np.errstate(invalid="ignore"):
            return log_density_model(spec, pts, x_obs) - q_t

    return _beliefs(grid, divs, ratio_fn, len(x_obs), prior, tempering)


def true_belief(spec: ProblemSpec, div: DivergenceSpec, x_obs: Dataset, *,
                grid: Optional[ParameterGrid] = None, prior=None, tempering: float = 1.0) -> BeliefGrid:
    return true_beliefs(spec, [div], x_obs, grid=grid, prior=prior, tempering=tempering)[div.name]


def true_updates(spec: ProblemSpec, divs: Sequence[DivergenceSpec], x_obs: Dataset, *,
                 grid: Optional[ParameterGrid] = None, prior=None, tempering: float = 1.0) -> pd.DataFrame:
    """Reference belief per divergence on one dataset, with its difference from the KL update."""
    beliefs = true_beliefs(spec, divs, x_obs, grid=grid, prior=prior, tempering=tempering)
    first = next(iter(beliefs.values()))
    frame = pd.DataFrame(first.grid.points, columns=list(first.grid.names))
    for name, b in beliefs.items():
        frame[name] = b.density
    if "kl" not in beliefs:
        kl = DivergenceSpec(kind="kl", clamp_lo=divs[0].clamp_lo, clamp=divs[0].clamp)
        frame["kl"] = true_belief(spec, kl, x_obs, grid=first.grid, prior=prior, tempering=tempering).density
    for name in beliefs:
        if name != "kl":
            frame[f"{name}_minus_kl"] = frame[name] - frame["kl"]
    return frame


# ---------- Surrogates from acquisition traces ----------
def _mean_gp(trace: AcquisitionTrace) -> GPModel:
    if trace.gp is not None:
        return trace.gp
    return fit_gp(trace.thetas, trace.means, domain_width=trace.upper - trace.lower)


def _per_point_gp(trace: AcquisitionTrace) -> Tuple[GPModel, np.ndarray]:
    if not trace.records:
        raise ValueError("acquisition trace has no records")
    try:
        kernel = _mean_gp(trace).kernel
        targets = trace.per_point
        # centred per column so components constant in theta pass through unchanged
        offset = targets.mean(axis=0)
        return condition(kernel, trace.thetas, targets - offset), offset
    except Exception as exc:
        exc.add_note(f"while building the surrogate over {len(trace.records)} acquisitions")
        raise


def surrogate_log_ratios(trace: AcquisitionTrace, thetas) -> np.ndarray:
    """(m, n_obs) predictive means of the per-observation log ratios."""
    model, offset = _per_point_gp(trace)
    return model.predict_mean(np.atleast_2d(thetas)) + offset


def surrogate_beliefs(trace: AcquisitionTrace, divs: Sequence[DivergenceSpec], spec: ProblemSpec, *,
                      grid: Optional[ParameterGrid] = None, prior=None,
                      tempering: float = 1.0) -> Dict[str, BeliefGrid]:
    grid = grid or ParameterGrid.from_spec(spec)
    model, offset = _per_point_gp(trace)

    def ratio_fn(pts):
        return model.predict_mean(pts) + offset

    return _beliefs(grid, divs, ratio_fn, offset.size, prior, tempering)


def surrogate_belief(trace: AcquisitionTrace, div: DivergenceSpec, spec: ProblemSpec, prior=None, *,
                     grid: Optional[ParameterGrid] = None, tempering: float = 1.0) -> BeliefGrid:
    return surrogate_beliefs(trace, [div], spec, grid=grid, prior=prior, tempering=tempering)[div.name]


def surrogate_curve(trace: AcquisitionTrace, spec: ProblemSpec, x_obs: Dataset,
                    grid: Optional[ParameterGrid] = None) -> pd.DataFrame:
    """Mean-GP predictive mean and sd next to the true mean log ratio, per grid point."""
    grid = grid or ParameterGrid.from_spec(spec)
    points = grid.points
    mean, var = _mean_gp(trace).predict(points)
    q_t = log_density_true(spec, x_obs)
    true_mean = np.concatenate([
        np.mean(log_density_model(spec, points[s:s + _GRID_CHUNK], x_obs) - q_t[None, :], axis=1)
        for s in range(0, points.shape[0], _GRID_CHUNK)
    ])
    frame = pd.DataFrame(points, columns=list(grid.names))
    frame["gp_mean"] = mean
    frame["gp_sd"] = np.sqrt(var)
    frame["true_mean_log_ratio"] = true_mean
    return frame


# ---------- Traces ----------
def classifier_trace(spec: ProblemSpec, x_obs: Dataset, method: Method, config: BayesOptConfig,
                     rng: np.random.Generator) -> AcquisitionTrace:
    def evaluate(theta, eval_rng):
        return LogRatioRecord.from_estimate(estimate_log_ratio(spec, theta, x_obs, method, eval_rng))

    return run_bayesopt(evaluate, spec.param_bounds, config.n_init, config.n_total, config.beta, rng,
                        n_candidates=config.n_candidates)


def generative_trace(spec: ProblemSpec, g: GenerativeModel, x_obs: Dataset, config: BayesOptConfig,
                     rng: np.random.Generator, candidates=None) -> AcquisitionTrace:
    def evaluate(theta, _rng):
        return LogRatioRecord.from_values(theta, generative_log_ratio(spec, theta, g, x_obs))

    return run_bayesopt(evaluate, spec.param_bounds, config.n_init, config.n_total, config.beta, rng,
                        n_candidates=config.n_candidates, candidates=candidates)


def generative_beliefs(spec: ProblemSpec, divs: Sequence[DivergenceSpec], x_obs: Dataset,
                       g: GenerativeModel, mode: Literal["grid", "bayesopt"] = "grid", *,
                       prior=None, rng: Optional[np.random.Generator] = None,
                       trace: Optional[AcquisitionTrace] = None,
                       bayesopt: Optional[BayesOptConfig] = None,
                       grid: Optional[ParameterGrid] = None,
                       tempering: float = 1.0) -> Dict[str, BeliefGrid]:
    grid = grid or ParameterGrid.from_spec(spec)
    if mode == "grid":
        return _beliefs(grid, divs, lambda pts: generative_log_ratio(spec, pts, g, x_obs),
                        len(x_obs), prior, tempering)
    if mode != "bayesopt":
        raise ValueError(f"unknown generative mode '{mode}', expected 'grid' or 'bayesopt'")
    if trace is None:
        if rng is None:
            raise ValueError("bayesopt mode needs an rng or a finished trace")
        trace = generative_trace(spec, g, x_obs, bayesopt or BayesOptConfig(), rng)
    return surrogate_beliefs(trace, divs, spec, grid=grid, prior=prior, tempering=tempering)


def generative_belief(spec: ProblemSpec, div: DivergenceSpec, x_obs: Dataset, g: GenerativeModel,
                      mode: Literal["grid", "bayesopt"] = "grid", prior=None,
                      rng: Optional[np.random.Generator] = None, **kwargs) -> BeliefGrid:
    return generative_beliefs(spec, [div], x_obs, g, mode, prior=prior, rng=rng, **kwargs)[div.name]


def entropy(belief: BeliefGrid) -> float:
    return float(stats.entropy(belief.mass))
