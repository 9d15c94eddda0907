"""
Competing estimators and the replicate study comparing them with the exact MLE.

All three likelihood baselines profile mu and sigma2 analytically and hand
the remaining correlation parameters to the same simplex the EM M-step
uses.
"""
import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .. import DENSE_MAX_N
from ..errors import ConfigError, IncompleteLattice, InitializationError, LatticeGPError, NotPositiveDefinite
from ..schemas import EmConfig, PcgConfig, SimplexConfig
from .bccb import build_spectrum, fft2
from .covariance import MATERN, CorrelationModel, ParamSet, ThetaSpace, matern_spectral_density
from .em import mcem_run, nelder_mead
from .lattice import DesignSpec, EmbeddingSpec, ObservationMask, make_mask
from .likelihood import LOG_2PI, dense_loglik, dense_profile_loglik
from .mcmc import method_of_moments
from .rng import make_stream
from .simulate import unconditional_pair
from .solver import VecchiaPrecond, build_vecchia, vecchia_apply, vecchia_quad

logger = logging.getLogger(__name__)

METHODS = ("exact", "em", "composite", "whittle")
STUDY_PARAMS = (("sigma2", "sigma2"), ("lambda", "lam"), ("mu", "mu"))
ALIAS_RANGE = 2


@dataclass
class EstimateRecord:
    method: str
    params: Optional[ParamSet]
    loglik_at_estimate: float = math.nan
    wall_seconds: float = 0.0
    replicate_id: int = 0
    design: str = ""
    failed: bool = False
    error: Optional[str] = None

    def as_row(self) -> Dict[str, object]:
        row = {
            "design": self.design, "replicate_id": self.replicate_id, "method": self.method,
            "loglik": self.loglik_at_estimate, "wall_seconds": self.wall_seconds,
            "failed": self.failed, "error": self.error,
        }
        values = self.params.as_dict() if self.params is not None else {}
        row.update({
            "mu": values.get("mu"), "sigma2": values.get("sigma2"), "lam": values.get("lambda"),
            "shape": values.get("shape"), "c": values.get("c"),
        })
        return row


def exact_loglik_or_nan(z_o, coords, p: ParamSet, model: CorrelationModel) -> float:
    if z_o.size > DENSE_MAX_N:
        return math.nan
    try:
        return dense_loglik(z_o, coords, p, model)
    except NotPositiveDefinite:
        return math.nan


def _profile_search(objective, space: ThetaSpace, init: ParamSet, cfg: SimplexConfig) -> ParamSet:
    if not space.dim:
        return init
    found = nelder_mead(lambda u: objective(space.from_unconstrained(u, init)), space.to_unconstrained(init), cfg)
    return space.from_unconstrained(found.x, init)


# ---------------------------------------------------------------------------
# Exact MLE
# ---------------------------------------------------------------------------


def exact_mle(
    z_o: np.ndarray,
    coords: np.ndarray,
    model: CorrelationModel,
    cfg: Optional[SimplexConfig] = None,
    init: Optional[ParamSet] = None,
    free: Sequence[str] = ("lam",),
) -> EstimateRecord:
    """Dense MLE with mu by GLS and sigma2 = S2 / n profiled out."""
    started = time.perf_counter()
    z_o = np.asarray(z_o, dtype=float)
    if z_o.size < 3:
        raise InitializationError(f"exact MLE needs at least 3 observations, got {z_o.size}")
    cfg = cfg or SimplexConfig()
    init = init or ParamSet(mu=float(z_o.mean()), sigma2=float(z_o.var()), lam=0.1, shape=1.0)
    space = ThetaSpace(model.family, free=tuple(free))

    def objective(theta: ParamSet) -> float:
        try:
            return dense_profile_loglik(z_o, coords, theta, model).loglik
        except (NotPositiveDefinite, ValueError, FloatingPointError):
            return -math.inf

    theta = _profile_search(objective, space, init, cfg)
    prof = dense_profile_loglik(z_o, coords, theta, model)
    est = theta.with_theta(mu=prof.mu_hat, sigma2=prof.sigma2_hat)
    return EstimateRecord(method="exact", params=est, loglik_at_estimate=prof.loglik,
                          wall_seconds=time.perf_counter() - started)


# ---------------------------------------------------------------------------
# Composite (Vecchia) likelihood
# ---------------------------------------------------------------------------


def composite_loglik(z_o: np.ndarray, precond_struct: VecchiaPrecond, p: ParamSet) -> float:
    """sum_j log N(A_j z; mu + K_j (B_j z - mu), sigma2 V_j) with blocks on the correlation scale."""
    z_o = np.asarray(z_o, dtype=float)
    n = z_o.size
    quad = vecchia_quad(precond_struct, z_o - p.mu)
    return -0.5 * (n * LOG_2PI + n * math.log(p.sigma2) + precond_struct.logdet_V + quad / p.sigma2)


def composite_profile(z_o: np.ndarray, vp: VecchiaPrecond):
    """(profiled loglik, mu_hat, sigma2_hat): GLS mean under V^{-1}, sigma2 = Q / n."""
    ones = np.ones(z_o.size)
    Vi1 = vecchia_apply(vp, ones)
    mu_hat = float(Vi1 @ z_o / (Vi1 @ ones))
    sigma2_hat = vecchia_quad(vp, z_o - mu_hat) / z_o.size
    n = z_o.size
    loglik = -0.5 * (n * LOG_2PI + n * math.log(sigma2_hat) + vp.logdet_V + n)
    return loglik, mu_hat, sigma2_hat


def composite_mle(
    z_o: np.ndarray,
    mask: ObservationMask,
    emb: EmbeddingSpec,
    model: CorrelationModel,
    cfg: Optional[SimplexConfig] = None,
    init: Optional[ParamSet] = None,
    free: Sequence[str] = ("lam",),
    cond_size: int = 52,
    pred_size: int = 4,
) -> EstimateRecord:
    started = time.perf_counter()
    z_o = np.asarray(z_o, dtype=float)
    cfg = cfg or SimplexConfig()
    raw = model.raw
    init = init or method_of_moments(z_o, mask, model.family)
    space = ThetaSpace(model.family, free=tuple(free))

    def structure(theta):
        return build_vecchia(mask, emb, raw, theta, pred_size=pred_size, cond_size=cond_size, wrap=False)

    def objective(theta: ParamSet) -> float:
        try:
            return composite_profile(z_o, structure(theta))[0]
        except (LatticeGPError, ValueError, FloatingPointError):
            return -math.inf

    theta = _profile_search(objective, space, init, cfg)
    loglik, mu_hat, sigma2_hat = composite_profile(z_o, structure(theta))
    est = theta.with_theta(mu=mu_hat, sigma2=sigma2_hat)
    logger.debug("[CL] composite loglik %.4f at %s", loglik, est)
    return EstimateRecord(method="composite", params=est, wall_seconds=time.perf_counter() - started)


# ---------------------------------------------------------------------------
# Whittle
# ---------------------------------------------------------------------------


def _whittle_nu(model: CorrelationModel, p: ParamSet) -> float:
    if model.family == MATERN:
        return p.shape
    if abs(p.shape - 1.0) > 1e-12:
        raise ConfigError("Whittle likelihood supports the exponential (alpha = 1) and Matern families only")
    return 0.5


def lattice_spectral_density(shape, delta: float, p: ParamSet, model: CorrelationModel, unit_sill: bool = False):
    """
    Spectral density of the sampled field on the n1 x n2 Fourier grid,
    normalized so that E|fft2(z)|^2 / n matches it; aliased over +-2 images.
    """
    n1, n2 = shape
    nu = _whittle_nu(model, p)
    w1 = 2.0 * np.pi * np.fft.fftfreq(n1)
    w2 = 2.0 * np.pi * np.fft.fftfreq(n2)
    W1, W2 = np.meshgrid(w1, w2, indexing="ij")
    g = np.zeros(shape)
    for j1, j2 in itertools.product(range(-ALIAS_RANGE, ALIAS_RANGE + 1), repeat=2):
        omega = np.hypot(W1 + 2.0 * np.pi * j1, W2 + 2.0 * np.pi * j2) / delta
        g += matern_spectral_density(omega, 1.0, p.lam, nu)
    g *= (2.0 * np.pi) ** 2 / delta**2
    g += p.c
    return g if unit_sill else p.sigma2 * g


def _periodogram(z_grid: np.ndarray) -> np.ndarray:
    z_grid = np.asarray(z_grid, dtype=float)
    if not np.all(np.isfinite(z_grid)):
        raise IncompleteLattice("Whittle likelihood needs a complete lattice")
    return np.abs(fft2(z_grid - z_grid.mean())) ** 2 / z_grid.size


def whittle_loglik(z_complete: np.ndarray, p: ParamSet, model: CorrelationModel, delta: float) -> float:
    """-1/2 sum over nonzero Fourier frequencies of log f + I / f."""
    I = _periodogram(z_complete)
    f = lattice_spectral_density(I.shape, delta, p, model)
    keep = np.ones(I.shape, dtype=bool)
    keep[0, 0] = False
    return float(-0.5 * np.sum(np.log(f[keep]) + I[keep] / f[keep]))


def whittle_mle(
    z_complete: np.ndarray,
    model: CorrelationModel,
    delta: float,
    cfg: Optional[SimplexConfig] = None,
    init: Optional[ParamSet] = None,
    free: Sequence[str] = ("lam",),
) -> EstimateRecord:
    """sigma2 profiled as mean(I / g0), mu = sample mean."""
    started = time.perf_counter()
    I = _periodogram(z_complete)
    keep = np.ones(I.shape, dtype=bool)
    keep[0, 0] = False
    Ik = I[keep]
    cfg = cfg or SimplexConfig()
    z_complete = np.asarray(z_complete, dtype=float)
    init = init or ParamSet(mu=float(z_complete.mean()), sigma2=float(z_complete.var()), lam=0.1, shape=1.0)
    space = ThetaSpace(model.family, free=tuple(free))

    def profiled(theta: ParamSet):
        g0 = lattice_spectral_density(I.shape, delta, theta, model, unit_sill=True)[keep]
        sigma2 = float(np.mean(Ik / g0))
        return -0.5 * (Ik.size * (math.log(sigma2) + 1.0) + float(np.sum(np.log(g0)))), sigma2

    def objective(theta: ParamSet) -> float:
        try:
            value = profiled(theta)[0]
        except (ValueError, FloatingPointError):
            return -math.inf
        return value if math.isfinite(value) else -math.inf

    theta = _profile_search(objective, space, init, cfg)
    _, sigma2 = profiled(theta)
    est = theta.with_theta(mu=float(z_complete.mean()), sigma2=sigma2)
    return EstimateRecord(method="whittle", params=est, wall_seconds=time.perf_counter() - started)


# ---------------------------------------------------------------------------
# Replicate study
# ---------------------------------------------------------------------------


@dataclass
class ReplicateTask:
    design: DesignSpec
    replicate_id: int
    truth: ParamSet
    emb: EmbeddingSpec
    model: CorrelationModel
    methods: Sequence[str]
    em: EmConfig
    pcg: PcgConfig
    seed: int
    composite_cond_size: int = 52
    records: List[EstimateRecord] = field(default_factory=list)


def simulate_replicate(task: ReplicateTask):
    """One synthetic dataset: a circulant-embedding field at the truth, masked by the design."""
    rng = make_stream(task.seed, f"study-{task.design.tag}-{task.replicate_id}")
    spec = build_spectrum(task.emb, task.model, task.truth)
    z, _ = unconditional_pair(spec, task.truth, rng)
    mask = make_mask(task.emb, task.design, rng)
    return z[mask.observed], mask


def run_replicate(task: ReplicateTask) -> List[EstimateRecord]:
    """Every requested method on one replicate; failures are flagged, never raised."""
    z_o, mask = simulate_replicate(task)
    coords = task.emb.coords(mask.observed)
    free = tuple(task.em.free)
    init = method_of_moments(z_o, mask, task.model.family, c=task.truth.c)
    simplex = task.em.optimizer
    records = []
    for method in task.methods:
        started = time.perf_counter()
        try:
            if method == "exact":
                rec = exact_mle(z_o, coords, task.model, simplex, init, free)
            elif method == "em":
                path = mcem_run(z_o, mask, task.emb, task.model, task.em, task.pcg,
                                seed=task.seed + 7919 * (task.replicate_id + 1), init=init)
                rec = EstimateRecord(method="em", params=path.final)
            elif method == "composite":
                rec = composite_mle(z_o, mask, task.emb, task.model, simplex, init, free,
                                    cond_size=task.composite_cond_size)
            elif method == "whittle":
                if task.design.kind != "complete":
                    continue
                grid = mask.to_base_grid(z_o)
                rec = whittle_mle(grid, task.model, task.emb.delta, simplex, init, free)
            else:
                raise ConfigError(f"unknown method '{method}'")
            if math.isnan(rec.loglik_at_estimate):
                rec.loglik_at_estimate = exact_loglik_or_nan(z_o, coords, rec.params, task.model)
        except (LatticeGPError, ValueError, np.linalg.LinAlgError) as exc:
            detail = getattr(exc, "detail", str(exc))
            logger.warning("[STUDY] %s replicate %d: %s failed: %s", task.design.tag, task.replicate_id, method, detail)
            rec = EstimateRecord(method=method, params=None, failed=True, error=detail)
        rec.wall_seconds = time.perf_counter() - started
        rec.replicate_id = task.replicate_id
        rec.design = task.design.tag
        records.append(rec)
    return records


def _rms(values: np.ndarray) -> float:
    return float(np.sqrt(np.mean(values**2))) if values.size else math.nan


def rmsd_table(rows: Sequence[dict], truth: ParamSet, scale: float = 1000.0) -> List[Dict[str, object]]:
    """
    Per design and parameter: R_star = RMSE of the exact MLE against the
    truth, R_k = RMSD of method k against the exact MLE, both times ``scale``.
    Rows are ledger rows (``EstimateRecord.as_row`` or ORM objects).
    """
    table = []
    get = (lambda r, k: r[k]) if rows and isinstance(rows[0], dict) else (lambda r, k: getattr(r, k))
    by_design: Dict[str, Dict[str, Dict[int, object]]] = {}
    for r in rows:
        if get(r, "failed"):
            continue
        by_design.setdefault(get(r, "design"), {}).setdefault(get(r, "method"), {})[get(r, "replicate_id")] = r
    truth_values = {"sigma2": truth.sigma2, "lam": truth.lam, "mu": truth.mu}
    for design, methods in by_design.items():
        exact = methods.get("exact", {})
        for label, attr in STUDY_PARAMS:
            entry: Dict[str, object] = {"design": design, "param": label}
            ex_vals = np.array([get(r, attr) for r in exact.values()], dtype=float)
            entry["R_star"] = _rms(ex_vals - truth_values[attr]) * scale
            for method, column in (("em", "R_em"), ("composite", "R_cl"), ("whittle", "R_whittle")):
                common = sorted(set(exact) & set(methods.get(method, {})))
                diffs = np.array([get(methods[method][i], attr) - get(exact[i], attr) for i in common], dtype=float)
                entry[column] = _rms(diffs) * scale
            table.append(entry)
    return table
