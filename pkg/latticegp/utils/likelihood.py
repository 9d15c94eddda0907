"""
Loglikelihoods, posterior kernels and priors.

complete_loglik, theta_log_kernel and the Monte Carlo profile drop the
constant (N/2) log 2pi. dense_loglik and the composite likelihood are full
Gaussian log densities so their values compare directly.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from .. import DENSE_MAX_N
from ..errors import ConfigError, NotPositiveDefinite, NumericalError
from . import bccb
from .bccb import EigenSpectrum, build_spectrum_safe
from .covariance import ALPHA_MAX, C_MAX, NU_MAX, POWEXP, CorrelationModel, ParamSet, dense_correlation
from .lattice import EmbeddingSpec

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PosteriorKernelParts:
    logdet_C: float
    logdet_ones: float
    S2: float
    mu_hat: float
    N: int


@dataclass(frozen=True)
class Prior:
    """Prior over the free correlation parameters; fixed ones contribute nothing."""
    family: str = POWEXP
    free: Tuple[str, ...] = ("lam", "shape")

    def __call__(self, p: ParamSet) -> float:
        return log_prior(p, self.family, self.free)


def log_lambda_prior(lam: float) -> float:
    """pi(lambda) = 0.5 / (1 + 0.5 lambda)^2, a proper prior with median 2."""
    if not lam > 0:
        return -math.inf
    return math.log(0.5) - 2.0 * math.log1p(0.5 * lam)


def log_prior(
    p: ParamSet,
    family: str = POWEXP,
    free: Sequence[str] = ("lam", "shape", "c"),
    include_sigma2: bool = False,
) -> float:
    total = 0.0
    if include_sigma2:
        if not p.sigma2 > 0:
            return -math.inf
        total -= math.log(p.sigma2)
    if "lam" in free:
        total += log_lambda_prior(p.lam)
    if "shape" in free:
        if family == POWEXP:
            total += -math.log(ALPHA_MAX) if 0 < p.shape <= ALPHA_MAX else -math.inf
        else:
            total += -math.log(NU_MAX) if 0 < p.shape < NU_MAX else -math.inf
    if "c" in free:
        total += -math.log(C_MAX) if 0 <= p.c < C_MAX else -math.inf
    return total


def complete_loglik(z: np.ndarray, p: ParamSet, spec: EigenSpectrum) -> float:
    spec.require_positive("complete_loglik")
    N = spec.N
    quad = float(bccb.inv_quad_form(spec, np.asarray(z, dtype=float) - p.mu))
    return -0.5 * N * math.log(p.sigma2) - 0.5 * bccb.logdet(spec) - quad / (2.0 * p.sigma2)


def kernel_parts(z: np.ndarray, spec: EigenSpectrum) -> PosteriorKernelParts:
    """GLS mean and sum of squares; for BCCB C the GLS mean is the plain average."""
    spec.require_positive("posterior kernel")
    z = np.asarray(z, dtype=float)
    mu_hat = float(z.mean())
    S2 = float(bccb.inv_quad_form(spec, z - mu_hat))
    return PosteriorKernelParts(
        logdet_C=bccb.logdet(spec),
        logdet_ones=math.log(bccb.ones_quad(spec)),
        S2=S2,
        mu_hat=mu_hat,
        N=spec.N,
    )


def theta_log_kernel(
    theta: ParamSet,
    z: np.ndarray,
    emb: EmbeddingSpec,
    model: CorrelationModel,
    prior: Prior,
    spec: Optional[EigenSpectrum] = None,
) -> float:
    """log pi(theta | Z) up to a constant, with mu and sigma2 integrated out; -inf off support."""
    lp = prior(theta)
    if not math.isfinite(lp):
        return -math.inf
    if spec is None:
        spec = build_spectrum_safe(emb, model, theta)
        if spec is None:
            return -math.inf
    if not spec.positive:
        return -math.inf
    parts = kernel_parts(z, spec)
    if not parts.S2 > 0:
        return -math.inf
    return (
        -0.5 * parts.logdet_C
        - 0.5 * parts.logdet_ones
        - 0.5 * (parts.N - 1) * math.log(parts.S2)
        + lp
    )


def draw_sigma2_mu(theta: ParamSet, z: np.ndarray, spec: EigenSpectrum, rng: np.random.Generator) -> Tuple[float, float]:
    """sigma2 ~ IG((N-1)/2, S2/2), then mu | sigma2 ~ N(zbar, sigma2 / 1'C^{-1}1)."""
    parts = kernel_parts(z, spec)
    if not parts.S2 > 0:
        raise NumericalError(f"sum of squares must be positive, got {parts.S2:.3e}")
    sigma2 = 0.5 * parts.S2 / rng.gamma(0.5 * (parts.N - 1))
    mu = rng.normal(parts.mu_hat, math.sqrt(sigma2 / bccb.ones_quad(spec)))
    return float(sigma2), float(mu)


# ---------------------------------------------------------------------------
# Dense oracles
# ---------------------------------------------------------------------------


def _guard(n: int) -> None:
    if n > DENSE_MAX_N:
        raise ConfigError(
            f"{n} observations exceed the dense limit {DENSE_MAX_N}; raise LATTICEGP_DENSE_MAX_N to override"
        )


def _dense_factor(R: np.ndarray):
    try:
        return linalg.cho_factor(R, lower=True)
    except linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"dense {R.shape[0]}x{R.shape[0]} correlation matrix is not positive definite") from exc


def dense_loglik(z_o: np.ndarray, coords: np.ndarray, p: ParamSet, model: CorrelationModel) -> float:
    """Exact Gaussian loglikelihood of the observed data under the unperiodized correlation."""
    z_o = np.asarray(z_o, dtype=float)
    n = z_o.size
    _guard(n)
    cf = _dense_factor(p.sigma2 * dense_correlation(model.raw, p, coords))
    r = z_o - p.mu
    quad = float(r @ linalg.cho_solve(cf, r))
    logdet = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    return -0.5 * (n * LOG_2PI + logdet + quad)


@dataclass(frozen=True)
class DenseProfile:
    loglik: float
    mu_hat: float
    sigma2_hat: float


def dense_profile_loglik(z_o: np.ndarray, coords: np.ndarray, theta: ParamSet, model: CorrelationModel) -> DenseProfile:
    """Exact loglikelihood with mu (GLS) and sigma2 (S2/n) profiled out."""
    z_o = np.asarray(z_o, dtype=float)
    n = z_o.size
    _guard(n)
    cf = _dense_factor(dense_correlation(model.raw, theta, coords))
    ones = np.ones(n)
    Ri1 = linalg.cho_solve(cf, ones)
    mu_hat = float(Ri1 @ z_o / (ones @ Ri1))
    r = z_o - mu_hat
    S2 = float(r @ linalg.cho_solve(cf, r))
    sigma2_hat = S2 / n
    logdet = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    loglik = -0.5 * (n * LOG_2PI + n * math.log(sigma2_hat) + logdet + n)
    return DenseProfile(loglik=loglik, mu_hat=mu_hat, sigma2_hat=sigma2_hat)


# ---------------------------------------------------------------------------
# Monte Carlo profile for the EM M-step
# ---------------------------------------------------------------------------


def field_power(fields: np.ndarray, shape: Tuple[int, int], mu_hat: float) -> np.ndarray:
    """sum_i |fft2(Z_i - mu_hat)|^2 over a stack of completed fields."""
    block = (np.atleast_2d(np.asarray(fields, dtype=float)) - mu_hat).reshape((-1,) + tuple(shape))
    return np.sum(np.abs(bccb.fft2(block)) ** 2, axis=0)


class MonteCarloProfile:
    """
    Q_p(theta) = -(N/2) log sigma2_hat(theta) - 1/2 log|C(theta)| from M completed fields.

    The averaged power spectrum of the centred fields is theta independent,
    so each evaluation costs one base vector FFT.
    """

    def __init__(self, power: np.ndarray, M: int, mu_hat: float, emb: EmbeddingSpec, model: CorrelationModel):
        if power.shape != emb.shape:
            raise ValueError(f"power spectrum shape {power.shape} does not match embedding {emb.shape}")
        self.emb = emb
        self.model = model
        self.M = int(M)
        self.mu_hat = float(mu_hat)
        self.power = power / self.M

    @classmethod
    def from_sims(cls, sims: np.ndarray, emb: EmbeddingSpec, model: CorrelationModel,
                  mu_hat: Optional[float] = None, chunk: int = 32) -> "MonteCarloProfile":
        sims = np.atleast_2d(np.asarray(sims, dtype=float))
        if sims.shape[1] != emb.N:
            raise ValueError(f"simulated fields have length {sims.shape[1]}, embedding has {emb.N}")
        mu_hat = float(sims.mean()) if mu_hat is None else float(mu_hat)
        power = np.zeros(emb.shape)
        for start in range(0, sims.shape[0], chunk):
            power += field_power(sims[start:start + chunk], emb.shape, mu_hat)
        return cls(power, sims.shape[0], mu_hat, emb, model)

    def evaluate(self, theta: ParamSet, spec: Optional[EigenSpectrum] = None) -> Tuple[float, float]:
        """(Q_p, sigma2_hat); Q_p = -inf where the spectrum is not positive."""
        if spec is None:
            spec = build_spectrum_safe(self.emb, self.model, theta)
        if spec is None or not spec.positive:
            return -math.inf, math.nan
        N = spec.N
        S2 = float(np.sum(self.power / spec.values)) / N
        sigma2_hat = S2 / N
        if not sigma2_hat > 0:
            return -math.inf, math.nan
        Qp = -0.5 * N * math.log(sigma2_hat) - 0.5 * bccb.logdet(spec)
        return Qp, sigma2_hat

    def __call__(self, theta: ParamSet) -> float:
        return self.evaluate(theta)[0]


def profile_Qp(theta: ParamSet, sims: np.ndarray, emb: EmbeddingSpec, model: CorrelationModel,
               mu_hat: Optional[float] = None) -> Tuple[float, float, float]:
    """(Q_p, sigma2_hat, mu_hat) for one theta; pass the kriging mean's average as ``mu_hat``."""
    profile = MonteCarloProfile.from_sims(sims, emb, model, mu_hat=mu_hat)
    Qp, sigma2_hat = profile.evaluate(theta)
    return Qp, sigma2_hat, profile.mu_hat
