"""
Monte Carlo EM with a profiled M-step.

E-step: M conditional simulations at Theta^t plus the exact kriging mean.
M-step: mu_hat = mean of the kriging mean (theta independent because C^{-1}
is BCCB), theta maximizes the Monte Carlo profile Q_p by Nelder-Mead in
ThetaSpace coordinates, then sigma2_hat = S2_hat(theta_hat) / N.
"""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from ..errors import InitializationError, NegativeEigenvalue, OptimizerFailed
from ..schemas import EmConfig, PcgConfig, SimplexConfig
from .bccb import EigenSpectrum, build_spectrum_safe
from .covariance import CorrelationModel, ParamSet, ThetaSpace
from .lattice import EmbeddingSpec, ObservationMask
from .likelihood import MonteCarloProfile
from .mcmc import method_of_moments
from .rng import spawn_streams
from .simulate import FieldSampler, complete_field, conditional_draw, conditional_mean
from .solver import Operator, PcgStats, make_preconditioner

logger = logging.getLogger(__name__)

EM_COLUMNS = ["iter", "mu", "sigma2", "lambda", "shape", "Qp", "pcg_total", "seconds"]

# objective value handed to the simplex where Q_p is not finite
_out_of_bounds_val = 1e100


# ---------------------------------------------------------------------------
# Simplex
# ---------------------------------------------------------------------------


@dataclass
class SimplexResult:
    x: np.ndarray
    value: float
    nit: int
    restarted: bool = False


def nelder_mead(f: Callable[[np.ndarray], float], x0: Sequence[float], cfg: Optional[SimplexConfig] = None) -> SimplexResult:
    """Maximize ``f`` with the standard Nelder-Mead simplex; one restart from a perturbed vertex."""
    cfg = cfg or SimplexConfig()
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    f0 = f(x0)
    if not np.isfinite(f0):
        raise OptimizerFailed(f"objective is not finite at the starting point {x0}")

    def neg(x):
        val = f(x)
        return -val if np.isfinite(val) else _out_of_bounds_val

    def run(start):
        simplex = np.vstack([start, start + cfg.initial_step * np.eye(start.size)])
        return minimize(
            neg, start, method="Nelder-Mead",
            options={"xatol": cfg.xatol, "fatol": cfg.fatol, "maxiter": cfg.maxiter, "initial_simplex": simplex},
        )

    res = run(x0)
    restarted = False
    if not res.success or res.fun >= _out_of_bounds_val:
        logger.info("[SIMPLEX] %s; restarting from a perturbed vertex", res.message)
        start = res.x if res.fun < _out_of_bounds_val else x0
        res = run(start + 0.5 * cfg.initial_step)
        restarted = True
        if res.fun >= _out_of_bounds_val:
            raise OptimizerFailed(f"simplex failed after restart: {res.message}")
        if not res.success:
            logger.warning("[SIMPLEX] stopped without meeting tolerances: %s", res.message)
    return SimplexResult(x=np.asarray(res.x), value=float(-res.fun), nit=int(res.nit), restarted=restarted)


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------


@dataclass
class EStep:
    sims: np.ndarray
    mu_tilde: np.ndarray
    pcg: PcgStats


def _pair_task(z_o, mask, spec, p, precond, pcg_cfg, rng, count, first_index):
    sampler = FieldSampler(spec, p, rng)
    stats = PcgStats()
    out = []
    for k in range(count):
        draw = conditional_draw(z_o, mask, spec, p, precond, pcg_cfg, sampler=sampler, stats=stats,
                                draw_index=first_index + k)
        out.append(complete_field(mask, z_o, draw.z_u))
    return out, stats


def e_step(
    z_o: np.ndarray,
    mask: ObservationMask,
    spec: EigenSpectrum,
    p: ParamSet,
    precond: Operator,
    M: int,
    pcg_cfg: PcgConfig,
    seed: int,
    stream: str = "estep",
    threads: int = 1,
) -> EStep:
    """
    M conditional fields and the kriging mean at ``p``.

    Draws come in pairs from one unconditional coloring; each pair has its
    own substream so results do not depend on ``threads``.
    """
    z_o = np.asarray(z_o, dtype=float)
    stats = PcgStats()
    mu_tilde = conditional_mean(z_o, mask, spec, p, precond, pcg_cfg, stats=stats)
    if mask.unobserved.size == 0:
        return EStep(sims=np.tile(mu_tilde, (M, 1)), mu_tilde=mu_tilde, pcg=stats)

    counts = [2] * (M // 2) + ([1] if M % 2 else [])
    streams = spawn_streams(seed, stream, len(counts))
    starts = np.cumsum([0] + counts[:-1])
    args = [(z_o, mask, spec, p, precond, pcg_cfg, rng, k, int(s)) for rng, k, s in zip(streams, counts, starts)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda a: _pair_task(*a), args))
    else:
        results = [_pair_task(*a) for a in args]

    sims = []
    for fields, task_stats in results:
        sims.extend(fields)
        stats.solves += task_stats.solves
        stats.iterations += task_stats.iterations
        stats.max_iterations = max(stats.max_iterations, task_stats.max_iterations)
        stats.failures += task_stats.failures
    return EStep(sims=np.vstack(sims), mu_tilde=mu_tilde, pcg=stats)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


@dataclass
class EmIterate:
    t: int
    params: ParamSet
    Qp: float
    seconds: float
    pcg_total: int


@dataclass
class EmPath:
    iterates: List[EmIterate] = field(default_factory=list)
    converged: bool = False

    @property
    def final(self) -> ParamSet:
        return self.iterates[-1].params

    def rows(self) -> List[list]:
        return [
            [it.t, it.params.mu, it.params.sigma2, it.params.lam, it.params.shape, it.Qp, it.pcg_total,
             round(it.seconds, 4)]
            for it in self.iterates
        ]


def relative_change(new: ParamSet, old: ParamSet, free: Sequence[str]) -> float:
    """Largest relative parameter change; mu is measured in units of the field sd."""
    changes = [abs(new.sigma2 - old.sigma2) / old.sigma2, abs(new.mu - old.mu) / math.sqrt(old.sigma2)]
    for name in free:
        a, b = getattr(new, name), getattr(old, name)
        changes.append(abs(a - b) / max(abs(b), 1e-12))
    return max(changes)


def m_step(profile: MonteCarloProfile, p_t: ParamSet, space: ThetaSpace, cfg: SimplexConfig):
    """theta_hat maximizing Q_p, then sigma2_hat(theta_hat) and the theta-free mu_hat."""
    start = space.to_unconstrained(p_t)
    if space.dim:
        found = nelder_mead(lambda u: profile(space.from_unconstrained(u, p_t)), start, cfg)
        theta = space.from_unconstrained(found.x, p_t)
    else:
        theta = p_t
    Qp, sigma2_hat = profile.evaluate(theta)
    if not math.isfinite(Qp):
        raise OptimizerFailed(f"profile is not finite at the simplex optimum {theta}")
    return theta.with_theta(sigma2=sigma2_hat, mu=profile.mu_hat), Qp


def mcem_run(
    z_o: np.ndarray,
    mask: ObservationMask,
    emb: EmbeddingSpec,
    model: CorrelationModel,
    cfg: EmConfig,
    pcg_cfg: PcgConfig,
    seed: int,
    init: Optional[ParamSet] = None,
    threads: int = 1,
) -> EmPath:
    z_o = np.asarray(z_o, dtype=float)
    space = ThetaSpace(model.family, free=tuple(cfg.free), alpha_transform="logit")
    p = init or method_of_moments(z_o, mask, model.family)
    M = cfg.M if mask.unobserved.size else 1
    path = EmPath()
    calm = 0

    for t in range(1, cfg.max_em_iters + 1):
        started = time.perf_counter()
        spec = build_spectrum_safe(emb, model, p)
        if spec is None or not spec.positive:
            if t == 1:
                raise InitializationError(f"starting parameters {p} give a non-positive spectrum")
            raise NegativeEigenvalue(f"EM iterate {p} left the positive-definite region",
                                     spec.min_eig if spec is not None else math.nan)
        precond = make_preconditioner(pcg_cfg, mask, emb, model, p, spec)
        est = e_step(z_o, mask, spec, p, precond, M, pcg_cfg, seed, stream=f"estep-{t}", threads=threads)
        profile = MonteCarloProfile.from_sims(est.sims, emb, model, mu_hat=float(est.mu_tilde.mean()))
        p_next, Qp = m_step(profile, p, space, cfg.optimizer)

        change = relative_change(p_next, p, cfg.free)
        path.iterates.append(EmIterate(t=t, params=p_next, Qp=Qp, seconds=time.perf_counter() - started,
                                       pcg_total=est.pcg.iterations))
        logger.info("[EM] iter %d  mu %.4f  sigma2 %.4f  lambda %.4f  shape %.3f  Qp %.3f  change %.2e  pcg %d",
                    t, p_next.mu, p_next.sigma2, p_next.lam, p_next.shape, Qp, change, est.pcg.iterations)
        p = p_next
        calm = calm + 1 if change < cfg.convergence_tol else 0
        if calm >= cfg.patience or (M == 1 and mask.unobserved.size == 0 and change < cfg.convergence_tol):
            path.converged = True
            break

    if not path.converged:
        logger.warning("[EM] stopped after %d iterations without meeting the convergence rule", cfg.max_em_iters)
    return path
