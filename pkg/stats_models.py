# stats_models.py
from dataclasses import dataclass
from typing import Annotated, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import stats

ModelFamily = Literal["poisson", "gaussian", "regression"]

PARAM_NAMES = {
    "poisson": ("rate",),
    "gaussian": ("mean", "log_var"),
    "regression": ("beta0", "beta1", "log_var"),
}
SUMMARY_COLUMNS = {"poisson": 2, "gaussian": 3, "regression": 7}


# ---------- Errors ----------
class ConfigError(ValueError):
    pass


class DomainError(ValueError):
    pass


class DegenerateReferenceError(ValueError):
    pass


# ---------- True data-generating processes ----------
class _Law(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class PoissonTrue(_Law):
    kind: Literal["poisson"] = "poisson"
    rate: float = Field(gt=0)

    @property
    def label(self) -> str:
        return f"Pois({self.rate:g})"


class NegBinomial(_Law):
    kind: Literal["neg_binomial"] = "neg_binomial"
    r: float = Field(gt=0)
    p: float = Field(gt=0, le=1)

    @property
    def label(self) -> str:
        return f"NB({self.r:g},{self.p:g})"


class GaussianTrue(_Law):
    kind: Literal["gaussian"] = "gaussian"
    mean: float
    var: float = Field(gt=0)

    @property
    def label(self) -> str:
        return f"N({self.mean:g},{self.var:g})"


class LaplaceTrue(_Law):
    kind: Literal["laplace"] = "laplace"
    loc: float
    scale: float = Field(gt=0)

    @property
    def label(self) -> str:
        return f"Laplace({self.loc:g},{self.scale:g})"


class RegressionGaussianNoise(_Law):
    kind: Literal["regression_gaussian"] = "regression_gaussian"
    beta0: float
    beta1: float
    sigma: float = Field(gt=0)

    @property
    def label(self) -> str:
        return f"N({self.beta0:g}+{self.beta1:g}X,{self.sigma:g}^2)"


class RegressionStudentNoise(_Law):
    kind: Literal["regression_student"] = "regression_student"
    beta0: float
    beta1: float
    sigma: float = Field(gt=0)
    nu: float = Field(default=3.0, gt=0)

    @property
    def label(self) -> str:
        return f"t({self.beta0:g}+{self.beta1:g}X,{self.sigma:g},{self.nu:g})"


TrueProcess = Annotated[
    Union[PoissonTrue, NegBinomial, GaussianTrue, LaplaceTrue,
          RegressionGaussianNoise, RegressionStudentNoise],
    Field(discriminator="kind"),
]

_COMPATIBLE = {
    "poisson": {"poisson", "neg_binomial"},
    "gaussian": {"gaussian", "laplace"},
    "regression": {"regression_gaussian", "regression_student"},
}


# ---------- Problem ----------
class ProblemSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = "problem"
    model_family: ModelFamily
    # inference coordinates: variances enter as log-variance
    param_bounds: List[Tuple[float, float]]
    grid_resolution: int = Field(ge=2)
    true_process: TrueProcess
    n_obs: int = Field(default=90, ge=2)
    n_folds: int = Field(default=10, ge=2)
    kde_lattice: bool = False

    @model_validator(mode="after")
    def _check(self):
        problems = []
        dim = len(PARAM_NAMES[self.model_family])
        if len(self.param_bounds) != dim:
            problems.append(
                f"param_bounds has {len(self.param_bounds)} dimensions, "
                f"{self.model_family} needs {dim}"
            )
        for name, (lo, hi) in zip(PARAM_NAMES[self.model_family], self.param_bounds):
            if not (np.isfinite(lo) and np.isfinite(hi)):
                problems.append(f"bounds for {name} must be finite")
            elif lo >= hi:
                problems.append(f"bounds for {name} need lower < upper, got [{lo}, {hi}]")
        if self.model_family == "poisson" and self.param_bounds and self.param_bounds[0][0] < 0:
            problems.append("Poisson rate bounds must be nonnegative")
        if self.true_process.kind not in _COMPATIBLE[self.model_family]:
            problems.append(
                f"true process {self.true_process.kind} does not generate "
                f"{self.model_family} data"
            )
        if self.n_obs % self.n_folds:
            problems.append(
                f"n_obs={self.n_obs} is not divisible by n_folds={self.n_folds}"
            )
        if problems:
            raise ValueError("; ".join(problems))
        return self

    @property
    def param_dim(self) -> int:
        return len(PARAM_NAMES[self.model_family])

    @property
    def param_names(self) -> Tuple[str, ...]:
        return PARAM_NAMES[self.model_family]

    @property
    def supervised(self) -> bool:
        return self.model_family == "regression"

    @property
    def n_sim(self) -> int:
        return n_sim_for(self.n_obs, self.n_folds)

    @property
    def lower(self) -> np.ndarray:
        return np.array([b[0] for b in self.param_bounds], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array([b[1] for b in self.param_bounds], dtype=float)

    def check_theta(self, theta) -> np.ndarray:
        th = np.asarray(theta, dtype=float).reshape(-1)
        if th.shape != (self.param_dim,):
            raise DomainError(f"expected {self.param_dim} parameters, got {th.size}")
        if not np.all(np.isfinite(th)) or np.any(th < self.lower) or np.any(th > self.upper):
            raise DomainError(
                f"theta={th.tolist()} outside bounds {list(self.param_bounds)}"
            )
        return th


def n_sim_for(n_obs: int, n_folds: int) -> int:
    if n_obs % n_folds:
        raise ConfigError(f"n_obs={n_obs} is not divisible by n_folds={n_folds}")
    return n_obs * (n_folds - 1) // n_folds


# ---------- Data ----------
@dataclass(frozen=True)
class Dataset:
    # 1-D for unsupervised problems; (n, 2) columns [X, y] for regression
    values: np.ndarray

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @property
    def supervised(self) -> bool:
        return self.values.ndim == 2

    @property
    def x(self) -> np.ndarray:
        return self.values[:, 0] if self.supervised else self.values

    @property
    def y(self) -> np.ndarray:
        if not self.supervised:
            raise AttributeError("unsupervised dataset has no response")
        return self.values[:, 1]

    def take(self, idx) -> "Dataset":
        return Dataset(self.values[np.asarray(idx, dtype=int)])

    @staticmethod
    def concat(*parts: "Dataset") -> "Dataset":
        return Dataset(np.concatenate([p.values.astype(float) for p in parts], axis=0))


def _empty(spec: ProblemSpec) -> Dataset:
    if spec.supervised:
        return Dataset(np.empty((0, 2)))
    dtype = np.int64 if spec.model_family == "poisson" else float
    return Dataset(np.empty(0, dtype=dtype))


def simulate_model(spec: ProblemSpec, theta, n: int, rng: np.random.Generator) -> Dataset:
    th = spec.check_theta(theta)
    if n < 0:
        raise ValueError("sample size must be nonnegative")
    if n == 0:
        return _empty(spec)
    if spec.model_family == "poisson":
        return Dataset(rng.poisson(th[0], size=n).astype(np.int64))
    if spec.model_family == "gaussian":
        return Dataset(rng.normal(th[0], np.sqrt(np.exp(th[1])), size=n))
    x = rng.standard_normal(n)
    y = th[0] + th[1] * x + np.sqrt(np.exp(th[2])) * rng.standard_normal(n)
    return Dataset(np.column_stack([x, y]))


def simulate_true(spec: ProblemSpec, n: int, rng: np.random.Generator) -> Dataset:
    law = spec.true_process
    if n < 0:
        raise ValueError("sample size must be nonnegative")
    if n == 0:
        return _empty(spec)
    if law.kind == "poisson":
        return Dataset(rng.poisson(law.rate, size=n).astype(np.int64))
    if law.kind == "neg_binomial":
        # failures before the r-th success, mean r(1-p)/p
        return Dataset(rng.negative_binomial(law.r, law.p, size=n).astype(np.int64))
    if law.kind == "gaussian":
        return Dataset(rng.normal(law.mean, np.sqrt(law.var), size=n))
    if law.kind == "laplace":
        return Dataset(rng.laplace(law.loc, law.scale, size=n))
    x = rng.standard_normal(n)
    if law.kind == "regression_gaussian":
        eps = law.sigma * rng.standard_normal(n)
    else:
        eps = law.sigma * rng.standard_t(law.nu, size=n)
    return Dataset(np.column_stack([x, law.beta0 + law.beta1 * x + eps]))


# ---------- Densities ----------
def _as_values(spec: ProblemSpec, data) -> Tuple[np.ndarray, bool]:
    if isinstance(data, Dataset):
        return data.values, False
    arr = np.asarray(data, dtype=float)
    if spec.supervised:
        if arr.ndim == 1 and arr.shape[0] == 2:
            return arr.reshape(1, 2), True
        return arr.reshape(-1, 2), False
    if arr.ndim == 0:
        return arr.reshape(1), True
    return arr.reshape(-1), False


def _finish(out: np.ndarray, single_theta: bool, is_point: bool):
    if single_theta:
        out = out[0]
        return float(out[0]) if is_point else out
    return out[:, 0] if is_point else out


def log_density_model(spec: ProblemSpec, theta, data):
    """log p(data | theta), pointwise.

    theta is one parameter vector (d,) or a stack (m, d); data is a Dataset,
    an array of points, or a single point. Shapes follow (m, n) with the
    singleton axes dropped. Regression densities are conditional on X.
    """
    values, is_point = _as_values(spec, data)
    th = np.asarray(theta, dtype=float)
    single = th.ndim == 1
    th = np.atleast_2d(th)
    if th.shape[1] != spec.param_dim:
        raise DomainError(f"expected {spec.param_dim} parameters, got {th.shape[1]}")
    col = [th[:, [j]] for j in range(spec.param_dim)]
    if spec.model_family == "poisson":
        out = stats.poisson.logpmf(values[None, :], col[0])
    elif spec.model_family == "gaussian":
        out = stats.norm.logpdf(values[None, :], loc=col[0], scale=np.sqrt(np.exp(col[1])))
    else:
        x, y = values[:, 0][None, :], values[:, 1][None, :]
        out = stats.norm.logpdf(y, loc=col[0] + col[1] * x, scale=np.sqrt(np.exp(col[2])))
    return _finish(np.asarray(out, dtype=float), single, is_point)


def log_density_true(spec: ProblemSpec, data):
    values, is_point = _as_values(spec, data)
    law = spec.true_process
    if law.kind == "poisson":
        out = stats.poisson.logpmf(values, law.rate)
    elif law.kind == "neg_binomial":
        out = stats.nbinom.logpmf(values, law.r, law.p)
    elif law.kind == "gaussian":
        out = stats.norm.logpdf(values, loc=law.mean, scale=np.sqrt(law.var))
    elif law.kind == "laplace":
        out = stats.laplace.logpdf(values, loc=law.loc, scale=law.scale)
    else:
        x, y = values[:, 0], values[:, 1]
        loc = law.beta0 + law.beta1 * x
        if law.kind == "regression_gaussian":
            out = stats.norm.logpdf(y, loc=loc, scale=law.sigma)
        else:
            out = stats.t.logpdf(y, law.nu, loc=loc, scale=law.sigma)
    out = np.asarray(out, dtype=float)
    return float(out[0]) if is_point else out


# ---------- Summaries ----------
@dataclass(frozen=True)
class SummaryReference:
    x_mean: float
    y_mean: float = 0.0
    y_sd: float = 1.0


def reference_moments(spec: ProblemSpec, reference: Dataset) -> SummaryReference:
    if len(reference) == 0:
        raise DegenerateReferenceError("summary reference sample is empty")
    if not spec.supervised:
        return SummaryReference(x_mean=float(np.mean(reference.values)))
    y = reference.y
    y_sd = float(np.std(y, ddof=1)) if len(y) > 1 else 0.0
    if not y_sd > 0:
        raise DegenerateReferenceError("responses in the summary reference have zero spread")
    return SummaryReference(x_mean=float(np.mean(reference.x)), y_mean=float(np.mean(y)), y_sd=y_sd)


def summaries(spec: ProblemSpec, data, reference: Union[Dataset, SummaryReference]) -> np.ndarray:
    ref = reference if isinstance(reference, SummaryReference) else reference_moments(spec, reference)
    values, _ = _as_values(spec, data)
    values = values.astype(float)
    ones = np.ones(values.shape[0])
    if spec.model_family == "poisson":
        return np.column_stack([ones, values])
    if spec.model_family == "gaussian":
        return np.column_stack([ones, values, np.abs(values - ref.x_mean)])
    x, y = values[:, 0], values[:, 1]
    dy, dx = y - ref.y_mean, x - ref.x_mean
    return np.column_stack([ones, y, dy**2, dy**4 / ref.y_sd**4, x, dx**2, dy * dx])


def true_parameters(spec: ProblemSpec) -> Optional[np.ndarray]:
    """Model coordinates of the true process when it lies inside the family."""
    law = spec.true_process
    if law.kind == "poisson":
        return np.array([law.rate])
    if law.kind == "gaussian":
        return np.array([law.mean, np.log(law.var)])
    if law.kind == "regression_gaussian":
        return np.array([law.beta0, law.beta1, 2.0 * np.log(law.sigma)])
    return None
