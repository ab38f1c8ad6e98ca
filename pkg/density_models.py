# density_models.py
import logging
import os
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from gp_core import GPModel, fit_gp
from stats_models import Dataset, ProblemSpec, log_density_model

logger = logging.getLogger("density_models")
if not logger.handlers:
    h = logging.StreamHandler()
    h.setFormatter(logging.Formatter("%(asctime)s [%(levelname)s] %(message)s"))
    logger.addHandler(h)
    logger.setLevel(os.getenv("LOG_LEVEL", "INFO"))

# kernels further than this many bandwidths from the sample add no lattice mass
_LATTICE_REACH = 40.0
_EVAL_CHUNK = 4096


class DegenerateSampleError(ValueError):
    pass


# ---------- Kernel density ----------
@dataclass(frozen=True)
class KdeModel:
    points: np.ndarray
    bandwidth: float
    # renormalised over the nonnegative integers instead of the real line
    lattice: bool = False
    log_norm: float = 0.0


def silverman_bandwidth(samples) -> float:
    x = np.asarray(samples, dtype=float).reshape(-1)
    if x.size < 2:
        raise DegenerateSampleError("bandwidth needs at least 2 samples")
    sd = float(np.std(x, ddof=1))
    if not sd > 0:
        raise DegenerateSampleError("samples have zero spread")
    iqr = float(stats.iqr(x))
    # a zero IQR (heavily tied counts) falls back to the standard deviation
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * spread * x.size ** (-0.2)


def _mixture_log_density(points, bandwidth, x) -> np.ndarray:
    out = np.empty(x.size)
    log_n = np.log(points.size)
    for s in range(0, x.size, _EVAL_CHUNK):
        block = x[s:s + _EVAL_CHUNK, None]
        out[s:s + _EVAL_CHUNK] = logsumexp(stats.norm.logpdf(block, points[None, :], bandwidth), axis=1) - log_n
    return out


def fit_kde(samples, lattice: bool = False) -> KdeModel:
    points = np.asarray(samples, dtype=float).reshape(-1)
    h = silverman_bandwidth(points)
    log_norm = 0.0
    if lattice:
        top = int(np.ceil(points.max() + _LATTICE_REACH * h))
        support = np.arange(0, max(top, 0) + 1, dtype=float)
        log_norm = float(logsumexp(_mixture_log_density(points, h, support)))
    logger.debug("KDE on %d points, bandwidth %.5g", points.size, h)
    return KdeModel(points=points, bandwidth=h, lattice=lattice, log_norm=log_norm)


def kde_log_density(model: KdeModel, x):
    xs = np.asarray(x, dtype=float)
    flat = xs.reshape(-1)
    out = _mixture_log_density(model.points, model.bandwidth, flat)
    if model.lattice:
        off = (flat < 0) | (flat != np.round(flat))
        out = np.where(off, -np.inf, out - model.log_norm)
    return float(out[0]) if xs.ndim == 0 else out.reshape(xs.shape)


# ---------- Supervised: GP regression of y on X ----------
@dataclass(frozen=True)
class SupervisedGenModel:
    gp: GPModel

    @property
    def noise_variance(self) -> float:
        return self.gp.kernel.noise_variance


def fit_supervised(x, y, rng: Optional[np.random.Generator] = None) -> SupervisedGenModel:
    gp = fit_gp(np.asarray(x, dtype=float).reshape(-1, 1), y, rng=rng)
    return SupervisedGenModel(gp=gp)


def supervised_log_density(model: SupervisedGenModel, x, y):
    """log N(y; mu(x), var(x) + noise): predictive density of a new response."""
    xs = np.asarray(x, dtype=float)
    mean, var = model.gp.predict(xs.reshape(-1, 1))
    out = stats.norm.logpdf(np.asarray(y, dtype=float).reshape(-1), mean,
                            np.sqrt(var + model.noise_variance))
    return float(out[0]) if xs.ndim == 0 else out


# ---------- Generative baseline ----------
GenerativeModel = Union[KdeModel, SupervisedGenModel]


def fit_generative(spec: ProblemSpec, x_obs: Dataset,
                   rng: Optional[np.random.Generator] = None) -> GenerativeModel:
    if spec.supervised:
        return fit_supervised(x_obs.x, x_obs.y, rng=rng)
    return fit_kde(x_obs.values, lattice=spec.kde_lattice and spec.model_family == "poisson")


def generative_log_density(g: GenerativeModel, data: Dataset) -> np.ndarray:
    if isinstance(g, SupervisedGenModel):
        return np.atleast_1d(supervised_log_density(g, data.x, data.y))
    return np.atleast_1d(kde_log_density(g, data.values))


def generative_log_ratio(spec: ProblemSpec, theta, g: GenerativeModel, x_obs: Dataset) -> np.ndarray:
    """log p(X_i | theta) - log g(X_i) per observation; theta may be a stack (m, d)."""
    with np.errstate(invalid="ignore"):
        return log_density_model(spec, theta, x_obs) - generative_log_density(g, x_obs)
