# gp_core.py
import logging
import os
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import linalg, optimize
from scipy.spatial.distance import cdist

logger = logging.getLogger("gp_core")
if not logger.handlers:
    h = logging.StreamHandler()
    h.setFormatter(logging.Formatter("%(asctime)s [%(levelname)s] %(message)s"))
    logger.addHandler(h)
    logger.setLevel(os.getenv("LOG_LEVEL", "INFO"))

SQRT3 = np.sqrt(3.0)
JITTER = 1e-8
MAX_JITTER = 1e-4
LENGTHSCALE_RANGE = (1e-2, 1e2)  # times the domain width
VARIANCE_RANGE = (1e-6, 1e4)
N_STARTS = 4
_PREDICT_CHUNK = 16384


class NumericError(RuntimeError):
    pass


class KernelConfig(BaseModel):
    """Matern-3/2 (ARD) plus constant kernel with Gaussian observation noise."""

    model_config = ConfigDict(frozen=True)

    matern_lengthscales: Tuple[float, ...]
    matern_variance: float = Field(gt=0)
    constant_variance: float = Field(gt=0)
    noise_variance: float = Field(ge=0)

    @field_validator("matern_lengthscales")
    @classmethod
    def _positive(cls, v):
        if len(v) == 0 or any(not (x > 0 and np.isfinite(x)) for x in v):
            raise ValueError("lengthscales must be positive and finite")
        return tuple(float(x) for x in v)

    @property
    def dim(self) -> int:
        return len(self.matern_lengthscales)

    @property
    def prior_variance(self) -> float:
        return self.matern_variance + self.constant_variance


# ---------- Kernel ----------
def matern32(a: np.ndarray, b: np.ndarray, lengthscales, variance: float) -> np.ndarray:
    ls = np.asarray(lengthscales, dtype=float)
    r = cdist(np.atleast_2d(a) / ls, np.atleast_2d(b) / ls)
    return variance * (1.0 + SQRT3 * r) * np.exp(-SQRT3 * r)


def kernel_matrix(config: KernelConfig, a: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
    b = a if b is None else b
    return matern32(a, b, config.matern_lengthscales, config.matern_variance) + config.constant_variance


def _cholesky(K: np.ndarray) -> Tuple[np.ndarray, float]:
    jitter = JITTER
    eye = np.eye(K.shape[0])
    while jitter <= MAX_JITTER * (1 + 1e-9):
        try:
            return linalg.cholesky(K + jitter * eye, lower=True), jitter
        except linalg.LinAlgError:
            jitter *= 10.0
            logger.warning("covariance not positive definite, raising jitter to %.0e", jitter)
    raise NumericError(f"covariance not positive definite with jitter up to {MAX_JITTER:g}")


# ---------- Model ----------
@dataclass(frozen=True)
class GPModel:
    kernel: KernelConfig
    inputs: np.ndarray
    # (n,) or (n, m) for several target columns sharing one factorisation
    targets: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float
    log_marginal_likelihood: float

    def predict(self, points):
        """Posterior mean and latent-function variance at points (q, d) or (d,)."""
        pts = np.asarray(points, dtype=float)
        single = pts.ndim == 1
        pts = pts.reshape(-1, self.kernel.dim)
        means, variances = [], []
        for start in range(0, pts.shape[0], _PREDICT_CHUNK):
            block = pts[start:start + _PREDICT_CHUNK]
            Ks = kernel_matrix(self.kernel, block, self.inputs)
            means.append(Ks @ self.alpha)
            v = linalg.solve_triangular(self.chol, Ks.T, lower=True)
            variances.append(np.maximum(self.kernel.prior_variance - np.sum(v * v, axis=0), 0.0))
        mean = np.concatenate(means, axis=0)
        var = np.concatenate(variances)
        if single:
            return (float(mean[0]) if mean.ndim == 1 else mean[0]), float(var[0])
        return mean, var

    def predict_mean(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, self.kernel.dim)
        return np.concatenate([
            kernel_matrix(self.kernel, pts[s:s + _PREDICT_CHUNK], self.inputs) @ self.alpha
            for s in range(0, pts.shape[0], _PREDICT_CHUNK)
        ], axis=0)


def predict(model: GPModel, theta_star):
    return model.predict(theta_star)


def condition(kernel: KernelConfig, inputs, targets) -> GPModel:
    """GP posterior for fixed hyperparameters; no optimisation."""
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    if X.shape[1] != kernel.dim and X.shape[0] == kernel.dim:
        X = X.T
    Y = np.asarray(targets, dtype=float)
    if Y.shape[0] != X.shape[0]:
        raise ValueError(f"{X.shape[0]} inputs but {Y.shape[0]} targets")
    K = kernel_matrix(kernel, X) + kernel.noise_variance * np.eye(X.shape[0])
    L, jitter = _cholesky(K)
    alpha = linalg.cho_solve((L, True), Y)
    y1 = Y if Y.ndim == 1 else Y[:, 0]
    a1 = alpha if alpha.ndim == 1 else alpha[:, 0]
    lml = -0.5 * float(y1 @ a1) - float(np.sum(np.log(np.diag(L)))) - 0.5 * X.shape[0] * np.log(2 * np.pi)
    return GPModel(kernel=kernel, inputs=X, targets=Y, chol=L, alpha=alpha,
                   jitter=jitter, log_marginal_likelihood=lml)


# ---------- Marginal likelihood ----------
def _unpack(log_params: np.ndarray, dim: int, fixed_noise: Optional[float]) -> KernelConfig:
    p = np.exp(np.asarray(log_params, dtype=float))
    noise = float(p[dim + 2]) if fixed_noise is None else float(fixed_noise)
    return KernelConfig(matern_lengthscales=tuple(p[:dim]), matern_variance=float(p[dim]),
                        constant_variance=float(p[dim + 1]), noise_variance=noise)


def pack(config: KernelConfig, include_noise: bool = True) -> np.ndarray:
    parts = list(config.matern_lengthscales) + [config.matern_variance, config.constant_variance]
    if include_noise:
        parts.append(config.noise_variance)
    return np.log(np.asarray(parts, dtype=float))


def log_marginal_likelihood(log_params, inputs, targets, *, fixed_noise: Optional[float] = None,
                            eval_gradient: bool = False):
    """log p(y | X, hyperparameters) over log-hyperparameters.

    Parameter order: log lengthscales, log matern variance, log constant
    variance, then log noise variance unless fixed_noise is given.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(targets, dtype=float).reshape(-1)
    n, dim = X.shape
    cfg = _unpack(log_params, dim, fixed_noise)
    ls = np.asarray(cfg.matern_lengthscales)

    r = cdist(X / ls, X / ls)
    decay = np.exp(-SQRT3 * r)
    Km = cfg.matern_variance * (1.0 + SQRT3 * r) * decay
    K = Km + cfg.constant_variance + cfg.noise_variance * np.eye(n)
    L, _ = _cholesky(K)
    alpha = linalg.cho_solve((L, True), y)
    lml = -0.5 * float(y @ alpha) - float(np.sum(np.log(np.diag(L)))) - 0.5 * n * np.log(2 * np.pi)
    if not eval_gradient:
        return lml

    A = np.outer(alpha, alpha) - linalg.cho_solve((L, True), np.eye(n))
    grads = []
    for j in range(dim):
        diff = (X[:, [j]] - X[:, j][None, :]) / ls[j]
        dK = 3.0 * cfg.matern_variance * decay * diff**2
        grads.append(0.5 * float(np.sum(A * dK)))
    grads.append(0.5 * float(np.sum(A * Km)))
    grads.append(0.5 * cfg.constant_variance * float(np.sum(A)))
    if fixed_noise is None:
        grads.append(0.5 * cfg.noise_variance * float(np.trace(A)))
    return lml, np.asarray(grads)


# ---------- Fitting ----------
def _clip(v: float) -> float:
    return float(np.clip(v, *VARIANCE_RANGE))


def default_kernel(inputs, targets, domain_width) -> KernelConfig:
    y = np.asarray(targets, dtype=float)
    var = float(np.var(y)) if y.size > 1 else 1.0
    return KernelConfig(
        matern_lengthscales=tuple(np.asarray(domain_width, dtype=float) / 3.0),
        matern_variance=_clip(var),
        # a zero-mean prior carries the targets' offset through the constant kernel
        constant_variance=_clip(float(np.mean(y)) ** 2),
        noise_variance=_clip(0.1 * var),
    )


def fit_gp(inputs, targets, init: Optional[KernelConfig] = None, *,
           domain_width: Optional[Sequence[float]] = None, fix_noise: bool = False,
           n_starts: int = N_STARTS, rng: Optional[np.random.Generator] = None) -> GPModel:
    """Type-II maximum likelihood with multi-start L-BFGS-B on log-hyperparameters.

    The first start is init (or the default initialisation); the others are
    drawn log-uniformly inside the bounds.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    if X.shape[0] == 1 and np.ndim(inputs) == 1:
        X = X.T
    y = np.asarray(targets, dtype=float).reshape(-1)
    if X.shape[0] < 2:
        raise ValueError("fit_gp needs at least 2 training points")
    if y.shape[0] != X.shape[0]:
        raise ValueError(f"{X.shape[0]} inputs but {y.shape[0]} targets")
    if not np.all(np.isfinite(y)):
        raise NumericError("GP targets must be finite")
    dim = X.shape[1]
    width = np.ptp(X, axis=0) if domain_width is None else np.asarray(domain_width, dtype=float)
    width = np.where(width > 0, width, 1.0)
    init = init or default_kernel(X, y, width)
    fixed_noise = init.noise_variance if fix_noise else None

    bounds = [(np.log(LENGTHSCALE_RANGE[0] * w), np.log(LENGTHSCALE_RANGE[1] * w)) for w in width]
    bounds += [tuple(np.log(VARIANCE_RANGE))] * (2 if fix_noise else 3)
    lo, hi = np.array(bounds).T
    rng = rng if rng is not None else np.random.default_rng(0)
    starts = [np.clip(pack(init, include_noise=not fix_noise), lo, hi)]
    starts += [rng.uniform(lo, hi) for _ in range(max(n_starts, 1) - 1)]

    def objective(p):
        try:
            lml, grad = log_marginal_likelihood(p, X, y, fixed_noise=fixed_noise, eval_gradient=True)
        except NumericError:
            return 1e25, np.zeros_like(p)
        return -lml, -grad

    best = None
    for x0 in starts:
        res = optimize.minimize(objective, x0, jac=True, method="L-BFGS-B", bounds=bounds)
        if not np.isfinite(res.fun) or res.fun >= 1e25:
            logger.warning("GP restart from %s failed: %s", np.round(x0, 3).tolist(), res.message)
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise NumericError("every marginal-likelihood restart failed")

    cfg = _unpack(best.x, dim, fixed_noise)
    logger.debug("GP hyperparameters %s (lml %.4f)", cfg.model_dump(), -best.fun)
    return condition(cfg, X, y)
