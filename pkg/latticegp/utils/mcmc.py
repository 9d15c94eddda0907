"""
Two-block Gibbs sampler: impute Z_u by conditional simulation, then update
(theta, sigma2, mu) with a block Metropolis-Hastings step.

The theta proposal is a Gaussian random walk in ThetaSpace coordinates
(log lambda, logit(alpha/2), ...); on acceptance sigma2 and mu are drawn
from their conditionals at the proposed theta, otherwise all three stay.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..errors import InitializationError, NotConverged
from ..schemas import McmcConfig, PcgConfig
from .bccb import EigenSpectrum, build_spectrum_safe
from .covariance import MATERN, CorrelationModel, ParamSet, ThetaSpace
from .lattice import EmbeddingSpec, ObservationMask
from .likelihood import Prior, draw_sigma2_mu, theta_log_kernel
from .simulate import FieldSampler, complete_field, conditional_draw
from .solver import PcgStats, make_preconditioner

logger = logging.getLogger(__name__)

CHAIN_COLUMNS = ["iter", "mu", "sigma2", "lambda", "shape", "c", "accepted", "pcg_iters"]
ADAPT_BATCH = 50


# ---------------------------------------------------------------------------
# Starting values
# ---------------------------------------------------------------------------


def lag_one_correlation(grid: np.ndarray) -> Tuple[float, int]:
    """Empirical correlation of horizontally and vertically adjacent observed pairs (NaN = missing)."""
    grid = np.asarray(grid, dtype=float)
    pairs_a = [grid[:, :-1].ravel(), grid[:-1, :].ravel()]
    pairs_b = [grid[:, 1:].ravel(), grid[1:, :].ravel()]
    a = np.concatenate(pairs_a)
    b = np.concatenate(pairs_b)
    ok = np.isfinite(a) & np.isfinite(b)
    if ok.sum() < 2:
        return math.nan, int(ok.sum())
    return float(np.corrcoef(a[ok], b[ok])[0, 1]), int(ok.sum())


def method_of_moments(z_o: np.ndarray, mask: ObservationMask, family: str, c: float = 0.0) -> ParamSet:
    """
    mu0 = mean, sigma2_0 (1 + c) = variance, lambda0 from the lag-one
    correlation under an exponential fit, alpha0 = 1 (nu0 = 1/2).
    """
    z_o = np.asarray(z_o, dtype=float)
    if z_o.size < 3:
        raise InitializationError(f"need at least 3 observations to initialize, got {z_o.size}")
    var = float(np.var(z_o, ddof=1))
    if not var > 0:
        raise InitializationError("observed values have zero variance")
    delta = mask.emb.delta
    rho1, npairs = lag_one_correlation(mask.to_base_grid(z_o))
    if math.isfinite(rho1):
        lam0 = -delta / math.log(min(max(rho1 * (1.0 + c), 1e-3), 0.999))
    else:
        lam0 = mask.emb.base.s / 4.0
    shape0 = 0.5 if family == MATERN else 1.0
    p0 = ParamSet(mu=float(z_o.mean()), sigma2=var / (1.0 + c), lam=lam0, shape=shape0, c=c)
    logger.info("[INIT] method of moments from %d lag-one pairs: %s", npairs, p0)
    return p0


# ---------------------------------------------------------------------------
# Chain bookkeeping
# ---------------------------------------------------------------------------


class RunningMoments:
    """Welford mean and variance of a stream of equally shaped arrays."""

    def __init__(self, size: int):
        self.count = 0
        self.mean = np.zeros(size)
        self._m2 = np.zeros(size)

    def update(self, x: np.ndarray) -> None:
        self.count += 1
        d = x - self.mean
        self.mean += d / self.count
        self._m2 += d * (x - self.mean)

    @property
    def variance(self) -> np.ndarray:
        if self.count < 2:
            return np.zeros_like(self.mean)
        return self._m2 / (self.count - 1)


@dataclass
class Chain:
    records: np.ndarray
    burn_in: int
    field_mean: np.ndarray
    field_var: np.ndarray
    snapshots: List[np.ndarray] = field(default_factory=list)
    proposal_cov: Optional[np.ndarray] = None
    pcg: PcgStats = field(default_factory=PcgStats)
    seconds: float = 0.0

    @property
    def draws(self) -> np.ndarray:
        """Post burn-in rows of (mu, sigma2, lambda, shape, c)."""
        return self.records[self.burn_in:, 1:6]

    @property
    def accepted(self) -> np.ndarray:
        return self.records[self.burn_in:, 6].astype(bool)

    @property
    def accept_rate(self) -> float:
        acc = self.accepted
        return float(acc.mean()) if acc.size else 0.0

    @property
    def pcg_iters(self) -> np.ndarray:
        return self.records[:, 7].astype(int)

    def summary(self, level: float = 0.95) -> Dict[str, Dict[str, float]]:
        lo, hi = (1.0 - level) / 2.0, 1.0 - (1.0 - level) / 2.0
        out = {}
        for k, name in enumerate(CHAIN_COLUMNS[1:6]):
            col = self.draws[:, k]
            out[name] = {
                "mean": float(col.mean()),
                "sd": float(col.std(ddof=1)) if col.size > 1 else 0.0,
                "lower": float(np.quantile(col, lo)),
                "upper": float(np.quantile(col, hi)),
                "geweke_z": geweke_z(col),
            }
        return out


def geweke_z(x: np.ndarray, first: float = 0.1, last: float = 0.5, batches: int = 10) -> float:
    """Geweke z-score comparing the early and late parts of a trace (batch-means variances)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n == 0 or np.ptp(x) == 0:
        # fixed or never-moving trace
        return math.nan
    a = x[: int(first * n)]
    b = x[n - int(last * n):]
    if a.size < 2 * batches or b.size < 2 * batches:
        return math.nan

    def batch_var(seg):
        means = np.array([m.mean() for m in np.array_split(seg, batches)])
        return means.var(ddof=1) / batches

    denom = math.sqrt(batch_var(a) + batch_var(b))
    if denom == 0:
        return 0.0 if a.mean() == b.mean() else math.inf
    return float((a.mean() - b.mean()) / denom)


# ---------------------------------------------------------------------------
# Parameter block update
# ---------------------------------------------------------------------------


@dataclass
class BlockState:
    p: ParamSet
    spec: EigenSpectrum
    log_kernel: float


def param_block_update(
    z: np.ndarray,
    state: BlockState,
    space: ThetaSpace,
    proposal_cov: np.ndarray,
    emb: EmbeddingSpec,
    model: CorrelationModel,
    prior: Prior,
    rng: np.random.Generator,
) -> Tuple[BlockState, bool]:
    """
    One block step. ``state.log_kernel`` must be the kernel of ``state.p``
    at the current field ``z``.
    """
    u = space.to_unconstrained(state.p)
    step = rng.multivariate_normal(np.zeros(space.dim), proposal_cov) if space.dim else np.zeros(0)
    proposal = space.from_unconstrained(u + step, state.p)

    spec_new = build_spectrum_safe(emb, model, proposal)
    if spec_new is None or not spec_new.positive:
        logger.debug("[MCMC] proposal %s discarded: spectrum not positive", proposal)
        return state, False
    log_new = theta_log_kernel(proposal, z, emb, model, prior, spec=spec_new)
    if not math.isfinite(log_new):
        return state, False

    log_ratio = log_new - state.log_kernel + space.log_jacobian(state.p) - space.log_jacobian(proposal)
    if np.log(rng.random()) < log_ratio:
        sigma2, mu = draw_sigma2_mu(proposal, z, spec_new, rng)
        accepted = proposal.with_theta(sigma2=sigma2, mu=mu)
        return BlockState(p=accepted, spec=spec_new, log_kernel=log_new), True
    return state, False


def adapt_proposal(history: np.ndarray, proposal_cov: np.ndarray, target: float = 0.35, step: int = 1) -> np.ndarray:
    """Robbins-Monro rescaling toward ``target`` acceptance; step size 1/sqrt(step)."""
    rate = float(np.mean(history)) if len(history) else target
    gamma = 1.0 / math.sqrt(max(step, 1))
    return proposal_cov * math.exp(2.0 * gamma * (rate - target))


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def _impute(z_o, mask, p, spec, precond, pcg_cfg, sampler, stats, emb, model, iteration):
    try:
        return conditional_draw(z_o, mask, spec, p, precond, pcg_cfg, sampler=sampler, stats=stats,
                                draw_index=iteration)
    except NotConverged as exc:
        logger.warning("[MCMC] iteration %d: %s; retrying with a jittered preconditioner", iteration, exc.detail)
    jittered = p.with_theta(c=p.c + 1e-6)
    retry_cfg = pcg_cfg.model_copy(update={"max_iters": 2 * (pcg_cfg.max_iters or mask.n)})
    retry_pre = make_preconditioner(retry_cfg, mask, emb, model, jittered, spec)
    draw = conditional_draw(z_o, mask, spec, p, retry_pre, retry_cfg, sampler=sampler, stats=stats,
                            draw_index=iteration, allow_unconverged=True)
    if not draw.converged:
        logger.warning("[MCMC] iteration %d still unconverged (residual %.2e); keeping last iterate",
                       iteration, draw.residual)
    return draw


def gibbs_run(
    z_o: np.ndarray,
    mask: ObservationMask,
    emb: EmbeddingSpec,
    model: CorrelationModel,
    prior: Prior,
    cfg: McmcConfig,
    pcg_cfg: PcgConfig,
    rng: np.random.Generator,
    init: Optional[ParamSet] = None,
) -> Chain:
    started = time.perf_counter()
    z_o = np.asarray(z_o, dtype=float)
    space = ThetaSpace(model.family, free=tuple(cfg.free), alpha_transform=cfg.alpha_transform)
    p = init or method_of_moments(z_o, mask, model.family)
    spec = build_spectrum_safe(emb, model, p)
    if spec is None or not spec.positive:
        raise InitializationError(f"initial parameters {p} give a non-positive spectrum")

    stats = PcgStats()
    precond = make_preconditioner(pcg_cfg, mask, emb, model, p, spec)
    sampler = FieldSampler(spec, p, rng)
    has_missing = mask.unobserved.size > 0
    z = mask.scatter(z_o)

    cov = cfg.initial_cov()
    records = np.zeros((cfg.iterations, len(CHAIN_COLUMNS)))
    moments = RunningMoments(emb.N)
    kept = cfg.iterations - cfg.burn_in
    snap_at = set(cfg.burn_in + np.linspace(0, kept - 1, cfg.snapshots).astype(int)) if cfg.snapshots else set()
    snapshots: List[np.ndarray] = []
    window: List[bool] = []
    report_every = max(cfg.iterations // 10, 1)

    for it in range(cfg.iterations):
        iters = 0
        if has_missing:
            draw = _impute(z_o, mask, p, spec, precond, pcg_cfg, sampler, stats, emb, model, it)
            z = complete_field(mask, z_o, draw.z_u)
            iters = draw.solver_iters

        log_k = theta_log_kernel(p, z, emb, model, prior, spec=spec)
        state = BlockState(p=p, spec=spec, log_kernel=log_k)
        state, accepted = param_block_update(z, state, space, cov, emb, model, prior, rng)
        if accepted:
            theta_changed = any(getattr(state.p, n) != getattr(p, n) for n in ("lam", "shape", "c"))
            p, spec = state.p, state.spec
            sampler.reset(spec, p)
            if theta_changed and has_missing and pcg_cfg.preconditioner != "none":
                precond = make_preconditioner(pcg_cfg, mask, emb, model, p, spec)

        records[it] = (it, p.mu, p.sigma2, p.lam, p.shape, p.c, float(accepted), iters)
        window.append(accepted)
        if it < cfg.burn_in and cfg.adapt and len(window) == ADAPT_BATCH:
            cov = adapt_proposal(np.array(window), cov, cfg.target_accept, step=(it + 1) // ADAPT_BATCH)
            window = []
        elif it == cfg.burn_in - 1:
            window = []
        if it >= cfg.burn_in:
            moments.update(z)
            if it in snap_at:
                snapshots.append(z.copy())
        if (it + 1) % report_every == 0:
            done = records[: it + 1]
            logger.info("[MCMC] %d/%d  accept %.2f  lambda %.4f  sigma2 %.4f  pcg %.1f",
                        it + 1, cfg.iterations, done[:, 6].mean(), p.lam, p.sigma2, done[:, 7].mean())

    chain = Chain(
        records=records,
        burn_in=cfg.burn_in,
        field_mean=moments.mean,
        field_var=moments.variance,
        snapshots=snapshots,
        proposal_cov=cov,
        pcg=stats,
        seconds=time.perf_counter() - started,
    )
    logger.info("[MCMC] done in %.1fs, post burn-in acceptance %.3f", chain.seconds, chain.accept_rate)
    return chain
