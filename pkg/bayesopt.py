# bayesopt.py
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.stats import qmc

from gp_core import GPModel, NumericError, condition, fit_gp

logger = logging.getLogger("bayesopt")
if not logger.handlers:
    h = logging.StreamHandler()
    h.setFormatter(logging.Formatter("%(asctime)s [%(levelname)s] %(message)s"))
    logger.addHandler(h)
    logger.setLevel(os.getenv("LOG_LEVEL", "INFO"))


class BayesOptConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    beta: float = Field(default=5.0, ge=0)
    # the initial design counts towards n_total
    n_init: int = Field(default=10, ge=2)
    n_total: int = Field(default=100, ge=2)
    n_candidates: int = Field(default=2048, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if self.n_total < self.n_init:
            raise ValueError(f"n_total ({self.n_total}) must be at least n_init ({self.n_init})")
        return self


@dataclass(frozen=True)
class LogRatioRecord:
    theta: np.ndarray
    per_point: np.ndarray
    mean: float

    @classmethod
    def from_values(cls, theta, per_point) -> "LogRatioRecord":
        rho = np.asarray(per_point, dtype=float).reshape(-1)
        return cls(theta=np.asarray(theta, dtype=float).reshape(-1), per_point=rho,
                   mean=float(np.mean(rho)))

    @classmethod
    def from_estimate(cls, estimate) -> "LogRatioRecord":
        return cls.from_values(estimate.theta, estimate.per_point_log_ratios)


Evaluator = Callable[[np.ndarray, np.random.Generator], LogRatioRecord]


@dataclass(frozen=True)
class AcquisitionTrace:
    records: List[LogRatioRecord]
    # surrogate on the mean log ratio over every record; None when nothing was fitted
    gp: Optional[GPModel]
    beta: float
    n_init: int
    n_total: int
    lower: np.ndarray
    upper: np.ndarray
    ucb_values: List[float] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def complete(self) -> bool:
        return self.error is None and len(self.records) == self.n_total

    @property
    def thetas(self) -> np.ndarray:
        return np.vstack([r.theta for r in self.records])

    @property
    def means(self) -> np.ndarray:
        return np.array([r.mean for r in self.records])

    @property
    def per_point(self) -> np.ndarray:
        """(n_records, n_obs) matrix of per-observation log ratios."""
        return np.vstack([r.per_point for r in self.records])

    def to_frame(self, param_names: Optional[Sequence[str]] = None) -> pd.DataFrame:
        thetas = self.thetas
        names = list(param_names) if param_names else [f"theta_{j}" for j in range(thetas.shape[1])]
        frame = pd.DataFrame(thetas, columns=names)
        frame.insert(0, "step", np.arange(len(self.records)))
        frame["mean_log_ratio"] = self.means
        frame["ucb"] = self.ucb_values[:len(self.records)]
        return frame

    def to_records_frame(self, param_names: Optional[Sequence[str]] = None) -> pd.DataFrame:
        # line-delimited dump keeps the per-observation values
        frame = self.to_frame(param_names)
        frame["per_point"] = [r.per_point.tolist() for r in self.records]
        return frame


def ucb(mean, sd, beta: float):
    if np.any(np.asarray(sd) < 0):
        raise ValueError("standard deviation must be nonnegative")
    return mean + beta * sd


# ---------- Loop ----------
def _refit(X, y, previous: Optional[GPModel], width, rng) -> GPModel:
    init = previous.kernel if previous is not None else None
    try:
        return fit_gp(X, y, init, domain_width=width, rng=rng)
    except (NumericError, ValueError) as exc:
        if previous is None:
            raise
        logger.warning("GP refit on %d points failed (%s); keeping previous hyperparameters", len(y), exc)
        return condition(previous.kernel, X, y)


def _evaluate(evaluator: Evaluator, theta, rng) -> LogRatioRecord:
    record = evaluator(theta, rng)
    if not np.isfinite(record.mean):
        raise NumericError(f"evaluator returned a non-finite mean log ratio at theta={theta.tolist()}")
    return record


def run_bayesopt(evaluator: Evaluator, bounds, n_init: int, n_total: int, beta: float,
                 rng: np.random.Generator, *, n_candidates: int = 2048,
                 candidates: Optional[np.ndarray] = None) -> AcquisitionTrace:
    """UCB acquisitions of the mean log ratio.

    bounds is a sequence of (lo, hi) pairs, one per dimension. candidates replaces
    the fresh low-discrepancy points at every step when given. Evaluator
    failures end the loop early and return the partial trace with error set.
    """
    lower, upper = _split_bounds(bounds)
    if n_init < 2 or n_total < n_init:
        raise ValueError(f"need 2 <= n_init <= n_total, got n_init={n_init}, n_total={n_total}")
    dim = lower.size
    width = upper - lower
    design_rng, gp_rng, eval_root = rng.spawn(3)
    eval_rngs = eval_root.spawn(n_total)
    sampler = qmc.Halton(dim, scramble=True, rng=design_rng)
    fixed = None if candidates is None else np.asarray(candidates, dtype=float).reshape(-1, dim)

    records: List[LogRatioRecord] = []
    ucb_values: List[float] = []
    gp = None
    try:
        for theta in qmc.scale(sampler.random(n_init), lower, upper):
            records.append(_evaluate(evaluator, theta, eval_rngs[len(records)]))
            ucb_values.append(float("nan"))

        for step in range(n_init, n_total):
            X = np.vstack([r.theta for r in records])
            y = np.array([r.mean for r in records])
            gp = _refit(X, y, gp, width, gp_rng)
            fresh = fixed if fixed is not None else qmc.scale(sampler.random(n_candidates), lower, upper)
            pool = np.vstack([fresh, X])
            mean, var = gp.predict(pool)
            scores = ucb(mean, np.sqrt(var), beta)
            best = int(np.argmax(scores))
            theta = np.clip(pool[best], lower, upper)
            records.append(_evaluate(evaluator, theta, eval_rngs[step]))
            ucb_values.append(float(scores[best]))
            logger.debug("step %d theta=%s mean=%.5f ucb=%.5f", step, np.round(theta, 5).tolist(),
                         records[-1].mean, scores[best])

        if n_total > n_init:
            gp = _refit(np.vstack([r.theta for r in records]), np.array([r.mean for r in records]),
                        gp, width, gp_rng)
    except Exception as exc:
        logger.warning("acquisition stopped after %d of %d evaluations: %s", len(records), n_total, exc)
        return AcquisitionTrace(records=records, gp=gp, beta=beta, n_init=n_init, n_total=n_total,
                                lower=lower, upper=upper, ucb_values=ucb_values, error=repr(exc))
    return AcquisitionTrace(records=records, gp=gp, beta=beta, n_init=n_init, n_total=n_total,
                            lower=lower, upper=upper, ucb_values=ucb_values)


def _split_bounds(bounds):
    """Lower and upper vectors from a sequence of (lo, hi) pairs, one per dimension."""
    arr = np.asarray(bounds, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] == 0:
        raise ValueError(f"bounds must be (lo, hi) pairs of shape (d, 2), got {arr.shape}")
    lower, upper = arr[:, 0], arr[:, 1]
    if np.any(lower >= upper):
        raise ValueError("bounds need lower < upper in every dimension")
    return lower, upper
