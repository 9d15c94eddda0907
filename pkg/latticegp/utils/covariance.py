"""
Correlation families, the cutoff-modified correlation used for the torus
embedding, and the BCCB base vector.

Cutoff distances are measured in units of the base-domain diagonal D, so
the match point h = 1 sits at the largest distance inside the observation
window and every observed pair keeps its original correlation phi.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import gammaln, kve

from .lattice import EmbeddingSpec, torus_offsets

logger = logging.getLogger(__name__)

POWEXP = "powered_exponential"
MATERN = "matern"
FAMILIES = (POWEXP, MATERN)

ALPHA_MAX = 2.0
NU_MAX = 50.0
C_MAX = 10.0


@dataclass(frozen=True)
class ParamSet:
    mu: float
    sigma2: float
    lam: float
    shape: float
    c: float = 0.0

    def validate(self, family: str) -> "ParamSet":
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if not self.c >= 0:
            raise ValueError(f"noise ratio c must be nonnegative, got {self.c}")
        if family == POWEXP and not 0 < self.shape <= ALPHA_MAX:
            raise ValueError(f"powered exponential alpha must lie in (0, 2], got {self.shape}")
        if family == MATERN and not self.shape > 0:
            raise ValueError(f"Matern nu must be positive, got {self.shape}")
        return self

    @property
    def tau2(self) -> float:
        return self.c * self.sigma2

    def as_dict(self) -> Dict[str, float]:
        return {"mu": self.mu, "sigma2": self.sigma2, "lambda": self.lam, "shape": self.shape, "c": self.c}

    def with_theta(self, **kwargs) -> "ParamSet":
        return replace(self, **kwargs)


@dataclass(frozen=True)
class CorrelationModel:
    family: str = POWEXP
    cutoff: Optional[float] = None
    scale: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown correlation family '{self.family}'")
        if self.cutoff is not None and not self.cutoff > 1:
            raise ValueError(f"cutoff radius must exceed 1 in normalized units, got {self.cutoff}")
        if not self.scale > 0:
            raise ValueError("distance scale must be positive")

    @property
    def raw(self) -> "CorrelationModel":
        return replace(self, cutoff=None)


def model_for_embedding(family: str, emb: EmbeddingSpec, use_cutoff: bool = True) -> CorrelationModel:
    """Correlation model whose cutoff radius is half the torus period."""
    ratio = emb.cutoff_ratio
    cutoff = ratio if use_cutoff and ratio > 1 else None
    if use_cutoff and cutoff is None:
        logger.info("[COV] r/D = %.3f <= 1, falling back to plain periodization", ratio)
    return CorrelationModel(family=family, cutoff=cutoff, scale=emb.base.diameter)


def _powexp(h: np.ndarray, lam: float, alpha: float) -> np.ndarray:
    return np.exp(-np.power(h / lam, alpha))


def _powexp_deriv(h, lam: float, alpha: float):
    x = h / lam
    return -(alpha / lam) * np.power(x, alpha - 1.0) * np.exp(-np.power(x, alpha))


def _matern(h: np.ndarray, lam: float, nu: float) -> np.ndarray:
    shape = np.shape(h)
    x = np.atleast_1d(np.asarray(h, dtype=float)) / lam
    out = np.ones_like(x)
    pos = x > 0
    if np.any(pos):
        xp = x[pos]
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            # kve(nu, x) = K_nu(x) e^x keeps the Bessel factor in range
            logv = (1.0 - nu) * math.log(2.0) - gammaln(nu) + nu * np.log(xp) + np.log(kve(nu, xp)) - xp
        vals = np.exp(logv)
        # K_nu overflows only near the origin and underflows only far out
        bad = ~np.isfinite(vals)
        vals[bad] = np.where(xp[bad] < nu, 1.0, 0.0)
        out[pos] = np.minimum(vals, 1.0)
    return out.reshape(shape)


def _matern_deriv(h, lam: float, nu: float):
    x = np.asarray(h, dtype=float) / lam
    if np.any(x <= 0):
        raise ValueError("Matern derivative needs h > 0")
    logv = (1.0 - nu) * math.log(2.0) - gammaln(nu) + nu * np.log(x) + np.log(kve(nu - 1.0, x)) - x
    return -np.exp(logv) / lam


def _scalar_or_array(value, h):
    return float(value) if np.ndim(h) == 0 else value


def powexp_corr(h, p: ParamSet):
    """exp{-(h/lam)^alpha} plus the nugget c at h = 0."""
    if not p.lam > 0 or not 0 < p.shape <= ALPHA_MAX:
        raise ValueError(f"invalid powered exponential parameters lam={p.lam}, alpha={p.shape}")
    h = np.asarray(h, dtype=float)
    out = _powexp(h, p.lam, p.shape) + p.c * (h == 0)
    return _scalar_or_array(out, h)


def matern_corr(h, p: ParamSet):
    if not p.lam > 0 or not p.shape > 0:
        raise ValueError(f"invalid Matern parameters lam={p.lam}, nu={p.shape}")
    h = np.asarray(h, dtype=float)
    out = _matern(h, p.lam, p.shape) + p.c * (h == 0)
    return _scalar_or_array(out, h)


def _phi(family: str) -> Tuple[Callable, Callable]:
    if family == POWEXP:
        return _powexp, _powexp_deriv
    return _matern, _matern_deriv


@dataclass(frozen=True)
class CutoffCorrelation:
    """rho(h) in normalized distance u = h/scale: phi below 1, a + b(u - r)^2 up to r, a beyond."""
    family: str
    p: ParamSet
    r: float
    scale: float
    a: float
    b: float

    def __call__(self, h):
        h = np.asarray(h, dtype=float)
        phi, _ = _phi(self.family)
        u = h / self.scale
        out = np.where(u < 1.0, phi(h, self.p.lam, self.p.shape), self.a + self.b * (u - self.r) ** 2)
        out = np.where(u >= self.r, self.a, out)
        return _scalar_or_array(out, h)


def cutoff_modify(model: CorrelationModel, r: float, p: ParamSet) -> CutoffCorrelation:
    if not r > 1:
        raise ValueError(f"cutoff radius must exceed 1, got {r}")
    phi, dphi = _phi(model.family)
    D = model.scale
    phi1 = float(phi(np.asarray(D), p.lam, p.shape))
    slope = D * float(dphi(np.asarray(D), p.lam, p.shape))
    b = -slope / (2.0 * (r - 1.0))
    a = phi1 - b * (r - 1.0) ** 2
    return CutoffCorrelation(family=model.family, p=p, r=float(r), scale=D, a=a, b=b)


def correlation(model: CorrelationModel, p: ParamSet, h, nugget: bool = True):
    """rho(h) under ``model`` (cutoff when configured), nugget on exact zeros only."""
    h = np.asarray(h, dtype=float)
    if model.cutoff is not None:
        out = np.asarray(cutoff_modify(model, model.cutoff, p)(h))
    else:
        phi, _ = _phi(model.family)
        out = phi(h, p.lam, p.shape)
    if nugget and p.c:
        out = out + p.c * (h == 0)
    return _scalar_or_array(out, h)


def base_vector(emb: EmbeddingSpec, model: CorrelationModel, p: ParamSet) -> np.ndarray:
    """First column of C(theta): rho at the wrap distance from site 0 to every site."""
    d1, d2 = torus_offsets(emb)
    h = emb.delta * np.hypot(d1, d2)
    return np.asarray(correlation(model, p, h), dtype=float).ravel()


def distance_matrix(coords_a: np.ndarray, coords_b: Optional[np.ndarray] = None) -> np.ndarray:
    return cdist(coords_a, coords_a if coords_b is None else coords_b)


def dense_correlation(model: CorrelationModel, p: ParamSet, coords: np.ndarray) -> np.ndarray:
    """n x n correlation matrix (nugget on the diagonal) at plain Euclidean distances."""
    H = distance_matrix(coords)
    R = np.asarray(correlation(model, p, H, nugget=False))
    R[np.diag_indices_from(R)] += p.c
    return R


def matern_spectral_density(omega: np.ndarray, sigma2: float, lam: float, nu: float) -> np.ndarray:
    """2-D Matern spectral density at angular frequency norm ``omega``."""
    omega = np.asarray(omega, dtype=float)
    log_const = gammaln(nu + 1.0) - gammaln(nu) - math.log(math.pi) + 2.0 * math.log(lam)
    return sigma2 * np.exp(log_const - (nu + 1.0) * np.log1p((lam * omega) ** 2))


class ThetaSpace:
    """
    Unconstrained coordinates for the free correlation parameters.

    lambda, nu and c use logs; alpha uses logit(alpha/2) unless
    ``alpha_transform='log'``, in which case proposals above 2 fall outside
    the prior support and get rejected.
    """

    def __init__(self, family: str, free: Sequence[str] = ("lam", "shape"), alpha_transform: str = "logit"):
        for name in free:
            if name not in ("lam", "shape", "c"):
                raise ValueError(f"'{name}' is not a correlation parameter")
        if alpha_transform not in ("logit", "log"):
            raise ValueError(f"unknown alpha transform '{alpha_transform}'")
        self.family = family
        self.free = tuple(free)
        self.alpha_transform = alpha_transform

    @property
    def dim(self) -> int:
        return len(self.free)

    def _logit_alpha(self, name: str) -> bool:
        return name == "shape" and self.family == POWEXP and self.alpha_transform == "logit"

    def to_unconstrained(self, p: ParamSet) -> np.ndarray:
        out = []
        for name in self.free:
            v = getattr(p, name)
            if self._logit_alpha(name):
                t = min(max(v / ALPHA_MAX, 1e-12), 1.0 - 1e-12)
                out.append(math.log(t / (1.0 - t)))
            else:
                out.append(math.log(max(v, 1e-12)))
        return np.array(out, dtype=float)

    def from_unconstrained(self, u: np.ndarray, template: ParamSet) -> ParamSet:
        values = {}
        for name, ui in zip(self.free, np.clip(np.asarray(u, dtype=float), -700.0, 700.0)):
            if self._logit_alpha(name):
                values[name] = ALPHA_MAX / (1.0 + math.exp(-ui))
            else:
                values[name] = math.exp(ui)
        return template.with_theta(**values)

    def log_jacobian(self, p: ParamSet) -> float:
        """log |du/dtheta| summed over the free parameters."""
        total = 0.0
        for name in self.free:
            v = getattr(p, name)
            if self._logit_alpha(name):
                total += math.log(ALPHA_MAX) - math.log(v) - math.log(ALPHA_MAX - v) if v < ALPHA_MAX else math.inf
            else:
                total -= math.log(v)
        return total

    def names(self):
        return ["lambda" if n == "lam" else n for n in self.free]
