# divergence.py
import logging
import os
import re
from dataclasses import dataclass
from typing import Callable, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy import integrate

logger = logging.getLogger("divergence")
if not logger.handlers:
    h = logging.StreamHandler()
    h.setFormatter(logging.Formatter("%(asctime)s [%(levelname)s] %(message)s"))
    logger.addHandler(h)
    logger.setLevel(os.getenv("LOG_LEVEL", "INFO"))

DivergenceKind = Literal["kl", "sq_hellinger", "tvd", "alpha"]

DEFAULT_CLAMP_LO = -5.0
DEFAULT_CLAMP_HI = 3.0

DEFAULT_DIVERGENCES = (
    "tvd", "sq_hellinger",
    "alpha_0.5", "alpha_0.6", "alpha_0.7", "alpha_0.8", "alpha_0.9",
    "kl",
)

_ALPHA_NAME = re.compile(r"^alpha[_=]?([0-9.eE+-]+)$")


class DivergenceSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: DivergenceKind
    alpha: Optional[float] = None
    clamp_lo: float = DEFAULT_CLAMP_LO
    clamp_hi: Optional[float] = None
    # False turns clamp_log_ratio into the identity
    clamp: bool = True

    @model_validator(mode="before")
    @classmethod
    def _default_ceiling(cls, data):
        if isinstance(data, dict) and data.get("clamp_hi") is None:
            data = dict(data)
            data["clamp_hi"] = 0.0 if data.get("kind") == "tvd" else DEFAULT_CLAMP_HI
        return data

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "alpha":
            if self.alpha is None or not 0.0 < self.alpha < 1.0:
                raise ValueError(f"alpha divergence needs 0 < alpha < 1, got {self.alpha}")
        elif self.alpha is not None:
            raise ValueError(f"alpha is only meaningful for the alpha divergence, not {self.kind}")
        if not self.clamp_lo < self.clamp_hi:
            raise ValueError(f"clamp_lo ({self.clamp_lo}) must be below clamp_hi ({self.clamp_hi})")
        if self.kind == "tvd" and self.clamp_hi != 0.0:
            raise ValueError("TVD truncates log ratios above zero: clamp_hi must be 0")
        return self

    @property
    def name(self) -> str:
        return f"alpha_{self.alpha:g}" if self.kind == "alpha" else self.kind

    @property
    def label(self) -> str:
        if self.kind == "alpha":
            return f"alpha={self.alpha:g}"
        return {"kl": "KL", "sq_hellinger": "Sq. Hellinger", "tvd": "TVD"}[self.kind]

    @classmethod
    def parse(cls, name: str, clamp_lo: float = DEFAULT_CLAMP_LO,
              clamp_hi: float = DEFAULT_CLAMP_HI, clamp: bool = True) -> "DivergenceSpec":
        key = name.strip().lower().replace(" ", "").replace("-", "_")
        hi = 0.0 if key == "tvd" else clamp_hi
        if key in ("kl", "sq_hellinger", "tvd"):
            return cls(kind=key, clamp_lo=clamp_lo, clamp_hi=hi, clamp=clamp)
        m = _ALPHA_NAME.match(key)
        if m:
            return cls(kind="alpha", alpha=float(m.group(1)),
                       clamp_lo=clamp_lo, clamp_hi=hi, clamp=clamp)
        raise ValueError(f"unknown divergence '{name}'")


# ---------- Pointwise ----------
def clamp_log_ratio(spec: DivergenceSpec, rho):
    if not spec.clamp:
        return rho
    out = np.clip(rho, spec.clamp_lo, spec.clamp_hi)
    return float(out) if np.ndim(out) == 0 else out


def generator(spec: DivergenceSpec, rho):
    """f(t) at t = exp(rho), the integrand of the loss against g.

    KL uses f(t) = -log t, which makes exp(-n * loss) proportional to the
    likelihood so g drops out in normalisation. Alpha uses
    f(t) = (1 - t**(1 - alpha)) / (alpha (1 - alpha)), which tends to the KL
    generator as alpha -> 1.
    """
    rho = np.asarray(rho, dtype=float)
    if spec.kind == "kl":
        out = -rho
    elif spec.kind == "sq_hellinger":
        out = -np.expm1(0.5 * rho)
    elif spec.kind == "tvd":
        out = np.abs(np.expm1(rho))
    else:
        a = spec.alpha
        out = -np.expm1((1.0 - a) * rho) / (a * (1.0 - a))
    return float(out) if out.ndim == 0 else out


def loss_from_log_ratios(spec: DivergenceSpec, rho, axis: int = -1):
    rho = np.asarray(rho, dtype=float)
    if rho.ndim == 0 or rho.shape[axis] == 0:
        raise ValueError("loss needs at least one log ratio")
    with np.errstate(invalid="ignore"):
        out = np.mean(generator(spec, clamp_log_ratio(spec, rho)), axis=axis)
    return float(out) if np.ndim(out) == 0 else out


# ---------- Quadrature oracle ----------
TAIL_MASS = 1e-12
_CHUNK = 4096
_MAX_SUPPORT = 10**7

LogDensity = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class IntegerDomain:
    lo: int = 0
    # None: sum until both laws have tail mass below TAIL_MASS
    hi: Optional[int] = None


@dataclass(frozen=True)
class RealDomain:
    lo: float
    hi: float
    breakpoints: Tuple[float, ...] = ()

    @classmethod
    def around(cls, center: float, scale: float, width: float = 12.0) -> "RealDomain":
        return cls(center - width * scale, center + width * scale)


def _integrand(spec: DivergenceSpec, lp, lg, classical_kl: bool):
    p, g = np.exp(lp), np.exp(lg)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        if spec.kind == "kl":
            if classical_kl:
                return np.where(p > 0, p * (lp - lg), 0.0)
            return np.where(g > 0, g * (lg - lp), 0.0)
        if spec.kind == "sq_hellinger":
            return g - np.exp(0.5 * (lp + lg))
        if spec.kind == "tvd":
            return np.abs(p - g)
        a = spec.alpha
        if classical_kl:
            return (g - np.exp(a * lp + (1.0 - a) * lg)) / (a * (1.0 - a))
        return (g - np.exp((1.0 - a) * lp + a * lg)) / (a * (1.0 - a))


def analytic_divergence(spec: DivergenceSpec, log_p: LogDensity, log_g: LogDensity,
                        domain: Union[IntegerDomain, RealDomain],
                        classical_kl: bool = False) -> float:
    """D_f(p || g) = integral of f(p/g) g, by summation or adaptive quadrature.

    For KL this is KL(g || p) under the loss convention; classical_kl=True
    gives KL(p || g) instead, and swaps the alpha exponents so the alpha
    family tends to KL(p || g) as alpha -> 1. Divergent integrals come back as +inf.
    """
    if isinstance(domain, IntegerDomain):
        return _sum_integer(spec, log_p, log_g, domain, classical_kl)

    def f(x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return float(_integrand(spec, log_p(x), log_g(x), classical_kl)[0])

    points = [b for b in domain.breakpoints if domain.lo < b < domain.hi] or None
    with np.errstate(invalid="ignore"):
        value, err = integrate.quad(f, domain.lo, domain.hi, points=points,
                                    limit=500, epsabs=1e-13, epsrel=1e-11)
    if not np.isfinite(value):
        return float("inf")
    logger.debug("quad %s: %.12g (err %.2g)", spec.name, value, err)
    return float(value)


def _sum_integer(spec, log_p, log_g, domain: IntegerDomain, classical_kl: bool) -> float:
    if domain.hi is not None:
        ks = np.arange(domain.lo, domain.hi + 1, dtype=float)
        terms = _integrand(spec, log_p(ks), log_g(ks), classical_kl)
        return float(np.sum(terms)) if np.all(np.isfinite(terms)) else float("inf")

    total, mass_p, mass_g = 0.0, 0.0, 0.0
    start = domain.lo
    while True:
        ks = np.arange(start, start + _CHUNK, dtype=float)
        lp, lg = log_p(ks), log_g(ks)
        terms = _integrand(spec, lp, lg, classical_kl)
        if not np.all(np.isfinite(terms)):
            return float("inf")
        total += float(np.sum(terms))
        mass_p += float(np.sum(np.exp(lp)))
        mass_g += float(np.sum(np.exp(lg)))
        if 1.0 - mass_p < TAIL_MASS and 1.0 - mass_g < TAIL_MASS:
            return total
        start += _CHUNK
        if start - domain.lo > _MAX_SUPPORT:
            logger.warning("integer sum for %s stopped at %d with tail mass %.3g / %.3g",
                           spec.name, start, 1.0 - mass_p, 1.0 - mass_g)
            return total
