# classifier.py
import logging
import os
import warnings
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from scipy import linalg, optimize
from scipy.special import expit
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression, LogisticRegressionCV
from sklearn.model_selection import StratifiedKFold

from randomness import seed_int
from stats_models import (
    ConfigError,
    Dataset,
    ProblemSpec,
    n_sim_for,
    reference_moments,
    simulate_model,
    summaries,
)

logger = logging.getLogger("classifier")
if not logger.handlers:
    h = logging.StreamHandler()
    h.setFormatter(logging.Formatter("%(asctime)s [%(levelname)s] %(message)s"))
    logger.addHandler(h)
    logger.setLevel(os.getenv("LOG_LEVEL", "INFO"))

Method = Literal["cv", "eb", "vb"]
METHODS = ("cv", "eb", "vb")

# lasso penalty search
CV_FOLDS = 5
PENALTY_GRID = np.logspace(-3, 2, 20)
# prior precision search range shared by EB and VB
PRECISION_BOUNDS = (1e-6, 1e6)
MAX_ITER = 1000
TOL = 1e-8
VB_PARAM_TOL = 1e-6


class ConvergenceError(RuntimeError):
    def __init__(self, method: str, iterations: int, last_change: float, detail: str = ""):
        self.method = method
        self.iterations = iterations
        self.last_change = last_change
        msg = f"{method} fit did not converge after {iterations} iterations (last change {last_change:.3g})"
        super().__init__(f"{msg}: {detail}" if detail else msg)


@dataclass(frozen=True)
class LogisticModel:
    # column 0 multiplies the constant summary and is never penalised
    weights: np.ndarray
    method: str
    penalty: Optional[float] = None
    prior_precision: Optional[float] = None
    posterior_cov: Optional[np.ndarray] = None
    n_iter: int = 0


@dataclass(frozen=True)
class RatioEstimate:
    theta: np.ndarray
    per_point_log_ratios: np.ndarray
    mean: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "mean", float(np.mean(self.per_point_log_ratios)))


# ---------- Fitting ----------
def _check_inputs(features, labels, sample_weight):
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float).reshape(-1)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError(f"features {X.shape} do not match {y.shape[0]} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    n1 = int(y.sum())
    n0 = y.size - n1
    if min(n0, n1) < 2:
        raise ValueError(f"need at least 2 rows per class, got {n0} and {n1}")
    if n0 != n1:
        raise ValueError(f"classes must be balanced, got {n0} observed and {n1} simulated")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain non-finite values")
    sw = np.ones_like(y) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    if sw.shape != y.shape or np.any(sw < 0):
        raise ValueError("sample_weight must be nonnegative, one per row")
    return X, y, sw


def fit_logistic(features, labels, method: Method, rng: np.random.Generator, *,
                 sample_weight=None, penalty: Optional[float] = None) -> LogisticModel:
    """Fit a logistic classifier whose first column is the constant summary.

    penalty fixes the lasso strength for "cv" (skipping the search); EB and
    VB learn their prior precision from the data.
    """
    X, y, sw = _check_inputs(features, labels, sample_weight)
    if method == "cv":
        return _fit_lasso(X, y, sw, rng, penalty)
    if method == "eb":
        return _fit_empirical_bayes(X, y, sw)
    if method == "vb":
        return _fit_variational(X, y, sw)
    raise ValueError(f"unknown classifier method '{method}', expected one of {METHODS}")


def decision_function(model: LogisticModel, features) -> np.ndarray:
    X = np.atleast_2d(np.asarray(features, dtype=float))
    if X.shape[1] != model.weights.shape[0]:
        raise ValueError(f"model has {model.weights.shape[0]} weights, features have {X.shape[1]} columns")
    return X @ model.weights


# ---------- Lasso with cross-validated penalty ----------
def _fit_lasso(X, y, sw, rng, penalty) -> LogisticModel:
    # standardise the non-constant columns; the constant becomes sklearn's intercept
    Z = X[:, 1:]
    mu = Z.mean(axis=0)
    sd = Z.std(axis=0)
    sd[sd == 0] = 1.0
    Z = (Z - mu) / sd
    seed = seed_int(rng)

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        if penalty is None:
            clf = LogisticRegressionCV(
                Cs=1.0 / PENALTY_GRID,
                cv=StratifiedKFold(CV_FOLDS, shuffle=True, random_state=seed),
                penalty="l1",
                solver="saga",
                scoring="neg_log_loss",
                tol=1e-6,
                max_iter=MAX_ITER,
                random_state=seed,
            )
            clf.fit(Z, y, sample_weight=sw)
            chosen = float(1.0 / clf.C_[0])
        else:
            if not penalty > 0:
                raise ValueError("lasso penalty must be positive")
            clf = LogisticRegression(C=1.0 / penalty, penalty="l1", solver="saga",
                                     tol=1e-6, max_iter=MAX_ITER, random_state=seed)
            clf.fit(Z, y, sample_weight=sw)
            chosen = float(penalty)
    if any(issubclass(w.category, ConvergenceWarning) for w in caught):
        logger.warning("lasso solver hit %d iterations (penalty %.4g)", MAX_ITER, chosen)

    b = clf.coef_.reshape(-1) / sd
    w = np.concatenate([[clf.intercept_[0] - float(b @ mu)], b])
    logger.debug("lasso penalty %.4g, weights %s", chosen, np.round(w, 4).tolist())
    return LogisticModel(weights=w, method="cv", penalty=chosen, n_iter=int(np.max(clf.n_iter_)))


# ---------- Empirical Bayes (Laplace evidence) ----------
def _penalty_mask(d: int) -> np.ndarray:
    mask = np.ones(d)
    mask[0] = 0.0
    return mask


def _map_weights(X, y, sw, tau, mask):
    """Damped Newton for the penalised log-loss; returns (w, Hessian at w, iterations)."""
    d = X.shape[1]
    ridge = 1e-10 * np.eye(d)
    grad_tol = 1e-8 * max(1.0, float(sw.sum()))

    def objective(w):
        z = X @ w
        return float(np.sum(sw * (np.logaddexp(0.0, z) - y * z))) + 0.5 * tau * float(np.sum(mask * w * w))

    def derivatives(w):
        s = expit(X @ w)
        grad = X.T @ (sw * (s - y)) + tau * mask * w
        hess = (X * (sw * s * (1.0 - s))[:, None]).T @ X + np.diag(tau * mask)
        return grad, hess

    w = np.zeros(d)
    obj = objective(w)
    change = float("inf")
    for it in range(1, MAX_ITER + 1):
        grad, hess = derivatives(w)
        if np.linalg.norm(grad) < grad_tol:
            return w, hess, it
        step = linalg.solve(hess + ridge, -grad, assume_a="pos")
        t = 1.0
        new = objective(w + step)
        while new > obj and t > 1e-10:
            t *= 0.5
            new = objective(w + t * step)
        if new > obj:
            # no descent left along the Newton direction
            return w, hess, it
        change = obj - new
        w = w + t * step
        obj = new
        if change <= TOL * max(abs(obj), 1.0):
            return w, derivatives(w)[1], it
    raise ConvergenceError("eb", MAX_ITER, change)


def _log_evidence(X, y, sw, tau, mask):
    w, H, _ = _map_weights(X, y, sw, tau, mask)
    z = X @ w
    loglik = -float(np.sum(sw * (np.logaddexp(0.0, z) - y * z)))
    _, logdet = np.linalg.slogdet(H)
    d_pen = mask.sum()
    return loglik - 0.5 * tau * float(np.sum(mask * w * w)) + 0.5 * d_pen * np.log(tau) - 0.5 * logdet


def _fit_empirical_bayes(X, y, sw) -> LogisticModel:
    mask = _penalty_mask(X.shape[1])
    lo, hi = np.log(PRECISION_BOUNDS[0]), np.log(PRECISION_BOUNDS[1])
    res = optimize.minimize_scalar(
        lambda log_tau: -_log_evidence(X, y, sw, np.exp(log_tau), mask),
        bounds=(lo, hi), method="bounded", options={"xatol": 1e-8, "maxiter": MAX_ITER},
    )
    if not res.success:
        raise ConvergenceError("eb", int(res.nfev), float("nan"), str(res.message))
    tau = float(np.exp(res.x))
    w, H, nit = _map_weights(X, y, sw, tau, mask)
    logger.debug("EB prior precision %.4g", tau)
    return LogisticModel(weights=w, method="eb", prior_precision=tau,
                         posterior_cov=linalg.inv(H), n_iter=nit)


# ---------- Variational Bayes (Jaakkola-Jordan bound) ----------
def _jj_lambda(xi):
    xi = np.abs(xi)
    out = np.full_like(xi, 0.125)
    big = xi > 1e-6
    out[big] = np.tanh(0.5 * xi[big]) / (4.0 * xi[big])
    return out


def _fit_variational(X, y, sw) -> LogisticModel:
    n, d = X.shape
    mask = _penalty_mask(d)
    d_pen = mask.sum()
    xi = np.ones(n)
    tau = 1.0
    b = X.T @ (sw * (y - 0.5))
    prev = None
    prev_m = None
    change = float("inf")
    for it in range(1, MAX_ITER + 1):
        lam = _jj_lambda(xi)
        prec = np.diag(tau * mask) + 2.0 * (X * (sw * lam)[:, None]).T @ X
        cho = linalg.cho_factor(prec)
        S = linalg.cho_solve(cho, np.eye(d))
        m = S @ b

        logdet_S = -2.0 * float(np.sum(np.log(np.diag(cho[0]))))
        bound = (0.5 * logdet_S + 0.5 * d_pen * np.log(tau) + 0.5 * float(m @ b)
                 + float(np.sum(sw * (-np.logaddexp(0.0, -xi) - 0.5 * xi + lam * xi**2))))

        E = S + np.outer(m, m)
        xi = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", X, E, X), 0.0))
        second = float(np.sum(mask * np.diag(E)))
        prev_tau = tau
        tau = float(np.clip(d_pen / max(second, 1e-300), *PRECISION_BOUNDS))

        if prev is not None:
            change = abs(bound - prev) / max(abs(bound), 1.0)
            m_stable = float(np.max(np.abs(m - prev_m))) < VB_PARAM_TOL * (1.0 + float(np.max(np.abs(m))))
            pinned = tau == prev_tau and tau in PRECISION_BOUNDS
            tau_stable = pinned or abs(np.log(tau) - np.log(prev_tau)) < VB_PARAM_TOL
            if change < TOL or (m_stable and tau_stable) or (pinned and change < VB_PARAM_TOL):
                if pinned:
                    logger.debug("VB prior precision pinned at %.4g", tau)
                logger.debug("VB converged in %d iterations, prior precision %.4g", it, tau)
                return LogisticModel(weights=m, method="vb", prior_precision=tau,
                                     posterior_cov=S, n_iter=it)
        prev = bound
        prev_m = m
    raise ConvergenceError("vb", MAX_ITER, change)


# ---------- K-fold classifier ratio ----------
def estimate_log_ratio(spec: ProblemSpec, theta, x_obs: Dataset, method: Method,
                       rng: np.random.Generator) -> RatioEstimate:
    """Per-observation log p(x|theta)/g(x) from held-out classifier decisions.

    One simulated set of n_obs (K-1)/K points is drawn for theta; each fold
    trains simulated (label 1) against the other folds' observations (label 0)
    and scores its own observations, so every observation is scored once by
    a classifier that never saw it.
    """
    theta = spec.check_theta(theta)
    n_obs, k = len(x_obs), spec.n_folds
    if n_obs % k:
        raise ConfigError(f"{n_obs} observations cannot be split into {k} equal folds")
    n_sim = n_sim_for(n_obs, k)

    x_sim = simulate_model(spec, theta, n_sim, rng)
    folds = np.array_split(rng.permutation(n_obs), k)
    fold_rngs = rng.spawn(k)

    rho = np.empty(n_obs)
    for held, fold_rng in zip(folds, fold_rngs):
        train = np.setdiff1d(np.arange(n_obs), held, assume_unique=True)
        obs_in = x_obs.take(train)
        ref = reference_moments(spec, Dataset.concat(x_sim, obs_in))
        features = np.vstack([summaries(spec, x_sim, ref), summaries(spec, obs_in, ref)])
        labels = np.concatenate([np.ones(n_sim), np.zeros(len(obs_in))])
        model = fit_logistic(features, labels, method, fold_rng)
        rho[held] = decision_function(model, summaries(spec, x_obs.take(held), ref))
    return RatioEstimate(theta=theta, per_point_log_ratios=rho)
