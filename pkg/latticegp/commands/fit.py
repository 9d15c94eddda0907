"""
fit-* commands: every estimator on a single input grid.
"""
import json
import logging
import math

import numpy as np

from ..utils.baselines import EstimateRecord, composite_mle, exact_loglik_or_nan, exact_mle, whittle_mle
from ..utils.em import EM_COLUMNS, mcem_run
from ..utils.gridio import write_grid, write_table
from ..utils.likelihood import Prior
from ..utils.mcmc import CHAIN_COLUMNS, gibbs_run
from . import CommandRouter, RunContext, RunReport, base_view, exact_loglik_line, initial_params, load_observations

logger = logging.getLogger(__name__)

router = CommandRouter(tags=["Estimation"])


def _write_json(ctx: RunContext, report: RunReport, name: str, payload) -> None:
    path = ctx.out / name
    path.write_text(json.dumps(payload, indent=2, default=float))
    report.add(path)


def _estimate_payload(rec, z_o, mask, model):
    row = rec.as_row()
    if math.isnan(rec.loglik_at_estimate):
        row["loglik"] = exact_loglik_or_nan(z_o, mask.emb.coords(mask.observed), rec.params, model)
    row["n_observed"] = int(z_o.size)
    return row


@router.command("fit-mcmc")
def fit_mcmc(ctx: RunContext) -> RunReport:
    cfg = ctx.cfg
    report = RunReport()
    z_o, mask, model = load_observations(cfg)
    emb = mask.emb
    free = tuple(cfg.mcmc.free)
    init = initial_params(z_o, mask, cfg, free)

    chain = gibbs_run(z_o, mask, emb, model, Prior(cfg.model, free), cfg.mcmc, cfg.pcg, ctx.stream("mcmc"), init=init)
    report.pcg = chain.pcg

    report.add(write_table(ctx.out / "chain.csv", chain.records.tolist(), CHAIN_COLUMNS))
    s = emb.base.s
    report.add(write_grid(ctx.out / "posterior_mean.csv", base_view(emb, chain.field_mean), s,
                          {"command": "fit-mcmc", "summary": "mean"}))
    report.add(write_grid(ctx.out / "posterior_sd.csv", base_view(emb, np.sqrt(chain.field_var)), s,
                          {"command": "fit-mcmc", "summary": "sd"}))
    for k, snap in enumerate(chain.snapshots):
        report.add(write_grid(ctx.out / f"snapshot_{k}.csv", base_view(emb, snap), s,
                              {"command": "fit-mcmc", "summary": "snapshot", "index": k}))

    summary = chain.summary()
    _write_json(ctx, report, "summary.json", {
        "parameters": summary,
        "accept_rate": chain.accept_rate,
        "burn_in": cfg.mcmc.burn_in,
        "iterations": cfg.mcmc.iterations,
        "proposal_cov": chain.proposal_cov.tolist() if chain.proposal_cov is not None else None,
        "seconds": chain.seconds,
    })
    for name in ("sigma2", "lambda", "shape"):
        stats = summary[name]
        report.lines.append(f"{name}: {stats['mean']:.4f} [{stats['lower']:.4f}, {stats['upper']:.4f}] "
                            f"geweke z {stats['geweke_z']:.2f}")
    report.lines.append(f"acceptance {chain.accept_rate:.3f}, {chain.pcg.mean_iterations:.1f} PCG iterations per draw")
    return report


@router.command("fit-em")
def fit_em(ctx: RunContext) -> RunReport:
    cfg = ctx.cfg
    report = RunReport()
    z_o, mask, model = load_observations(cfg)
    init = initial_params(z_o, mask, cfg, tuple(cfg.em.free))

    path = mcem_run(z_o, mask, mask.emb, model, cfg.em, cfg.pcg, seed=ctx.seed, init=init, threads=ctx.threads)
    report.add(write_table(ctx.out / "em_path.csv", path.rows(), EM_COLUMNS))
    report.pcg.iterations = sum(it.pcg_total for it in path.iterates)

    payload = _estimate_payload(EstimateRecord(method="em", params=path.final), z_o, mask, model)
    payload["converged"] = path.converged
    payload["em_iterations"] = len(path.iterates)
    _write_json(ctx, report, "estimates.json", payload)
    if not path.converged:
        report.lines.append(f"⚠️ EM stopped after {len(path.iterates)} iterations without converging")
    report.lines.append(f"EM estimate {path.final}")
    report.lines.append(exact_loglik_line("EM", payload["loglik"]))
    return report


def _single_estimate(ctx: RunContext, rec, z_o, mask, model) -> RunReport:
    report = RunReport()
    payload = _estimate_payload(rec, z_o, mask, model)
    _write_json(ctx, report, "estimates.json", payload)
    report.lines.append(f"{rec.method} estimate {rec.params} in {rec.wall_seconds:.2f}s")
    report.lines.append(exact_loglik_line(rec.method, payload["loglik"]))
    return report


@router.command("fit-exact")
def fit_exact(ctx: RunContext) -> RunReport:
    cfg = ctx.cfg
    z_o, mask, model = load_observations(cfg)
    free = tuple(cfg.em.free)
    rec = exact_mle(z_o, mask.emb.coords(mask.observed), model, cfg.em.optimizer,
                    initial_params(z_o, mask, cfg, free), free)
    return _single_estimate(ctx, rec, z_o, mask, model)


@router.command("fit-cl")
def fit_composite(ctx: RunContext) -> RunReport:
    cfg = ctx.cfg
    z_o, mask, model = load_observations(cfg)
    free = tuple(cfg.em.free)
    rec = composite_mle(z_o, mask, mask.emb, model, cfg.em.optimizer, initial_params(z_o, mask, cfg, free), free,
                        cond_size=cfg.study.composite_cond_size, pred_size=cfg.pcg.pred_size)
    return _single_estimate(ctx, rec, z_o, mask, model)


@router.command("fit-whittle")
def fit_whittle(ctx: RunContext) -> RunReport:
    cfg = ctx.cfg
    z_o, mask, model = load_observations(cfg)
    free = tuple(cfg.em.free)
    rec = whittle_mle(mask.to_base_grid(z_o), model, mask.emb.delta, cfg.em.optimizer,
                      initial_params(z_o, mask, cfg, free), free)
    return _single_estimate(ctx, rec, z_o, mask, model)
