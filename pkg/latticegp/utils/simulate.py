"""
Unconditional simulation by coloring white noise, and exact conditional
simulation by substitution: Z*_u = Z~_u + C_uo C_oo^{-1} (z_o - Z~_o).

The PCG system is always the correlation system C_oo x = b; sigma2
cancels between C_uo and C_oo^{-1}, so preconditioners built at one sigma2
stay valid when only sigma2 changes.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ..errors import NotConverged
from ..schemas import PcgConfig
from . import bccb
from .bccb import EigenSpectrum
from .covariance import ParamSet
from .lattice import ObservationMask
from .solver import Operator, PcgStats, c_oo_operator, pcg_solve

logger = logging.getLogger(__name__)


@dataclass
class ConditionalDraw:
    z_u: np.ndarray
    solver_iters: int
    residual: float
    converged: bool = True


def unconditional_pair(spec: EigenSpectrum, p: ParamSet, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Two independent N(mu 1, sigma2 C) fields from one complex coloring."""
    spec.require_nonnegative("unconditional simulation")
    eps = rng.standard_normal(spec.N) + 1j * rng.standard_normal(spec.N)
    y = bccb.color(spec, eps)
    sd = np.sqrt(p.sigma2)
    return p.mu + sd * y.real, p.mu + sd * y.imag


class FieldSampler:
    """Hands out unconditional fields one at a time, banking the second field of each pair."""

    def __init__(self, spec: EigenSpectrum, p: ParamSet, rng: np.random.Generator):
        self.spec = spec
        self.p = p
        self.rng = rng
        self._banked: Optional[np.ndarray] = None

    def draw(self) -> np.ndarray:
        if self._banked is not None:
            field, self._banked = self._banked, None
            return field
        first, self._banked = unconditional_pair(self.spec, self.p, self.rng)
        return first

    def reset(self, spec: EigenSpectrum, p: ParamSet) -> None:
        self.spec, self.p = spec, p
        self._banked = None


def complete_field(mask: ObservationMask, z_o: np.ndarray, z_u: np.ndarray) -> np.ndarray:
    z = mask.scatter(z_o)
    z[mask.unobserved] = z_u
    return z


def _check_result(result, what: str, draw_index: Optional[int] = None):
    if not result.converged:
        raise NotConverged(
            f"{what}: PCG stopped after {result.iters} iterations at relative residual {result.residual:.2e}",
            result=result,
            draw_index=draw_index,
        )


def conditional_draw(
    z_o: np.ndarray,
    mask: ObservationMask,
    spec: EigenSpectrum,
    p: ParamSet,
    precond: Operator,
    cfg: PcgConfig,
    rng: Optional[np.random.Generator] = None,
    sampler: Optional[FieldSampler] = None,
    stats: Optional[PcgStats] = None,
    draw_index: Optional[int] = None,
    allow_unconverged: bool = False,
) -> ConditionalDraw:
    """
    Z*_u = Z~_u + C_uo x with C_oo x = z_o - Z~_o.

    With ``allow_unconverged`` a PCG run that hits max_iters yields a draw
    built from its last iterate (flagged ``converged=False``) instead of raising.
    """
    if mask.unobserved.size == 0:
        return ConditionalDraw(z_u=np.empty(0), solver_iters=0, residual=0.0)
    if sampler is None:
        if rng is None:
            raise ValueError("conditional_draw needs a random stream or a FieldSampler")
        sampler = FieldSampler(spec, p, rng)
    spec.require_positive("conditional simulation")
    z_o = np.asarray(z_o, dtype=float)
    if not np.all(np.isfinite(z_o)):
        raise ValueError("observed values must be finite")

    z_tilde = sampler.draw()
    rhs = z_o - z_tilde[mask.observed]
    result = pcg_solve(c_oo_operator(spec, mask), precond, rhs, cfg)
    if stats is not None:
        stats.add(result)
    if not allow_unconverged:
        _check_result(result, "conditional draw", draw_index)
    _, c_uo_x = bccb.partitioned_matvec(spec, mask, result.x)
    return ConditionalDraw(
        z_u=z_tilde[mask.unobserved] + c_uo_x,
        solver_iters=result.iters,
        residual=result.residual,
        converged=result.converged,
    )


def conditional_mean(
    z_o: np.ndarray,
    mask: ObservationMask,
    spec: EigenSpectrum,
    p: ParamSet,
    precond: Operator,
    cfg: PcgConfig,
    stats: Optional[PcgStats] = None,
) -> np.ndarray:
    """E(Z | Z_o) over the whole embedding lattice (observed sites keep their data)."""
    z_o = np.asarray(z_o, dtype=float)
    mu_tilde = mask.scatter(z_o, fill=p.mu)
    if mask.unobserved.size == 0:
        return mu_tilde
    spec.require_positive("conditional mean")
    result = pcg_solve(c_oo_operator(spec, mask), precond, z_o - p.mu, cfg)
    if stats is not None:
        stats.add(result)
    _check_result(result, "conditional mean")
    _, c_uo_x = bccb.partitioned_matvec(spec, mask, result.x)
    mu_tilde[mask.unobserved] = p.mu + c_uo_x
    logger.debug("[SIM] kriging solve took %d PCG iterations", result.iters)
    return mu_tilde
