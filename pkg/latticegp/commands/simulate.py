"""
simulate: unconditional fields on the configured lattice, masked by the
design, plus the kriging surface of an input grid when io.input is set.
"""
import logging

from ..utils import bccb
from ..utils.covariance import model_for_embedding
from ..utils.gridio import ingest_grid, write_grid
from ..utils.lattice import make_mask, write_mask_file
from ..utils.simulate import FieldSampler, conditional_mean
from ..utils.solver import make_preconditioner
from . import CommandRouter, RunContext, RunReport, base_view, configured_problem

logger = logging.getLogger(__name__)

router = CommandRouter(tags=["Simulation"])


@router.command("simulate")
def simulate_fields(ctx: RunContext) -> RunReport:
    cfg = ctx.cfg
    report = RunReport()
    base, emb, model, p = configured_problem(cfg)
    spec = bccb.build_spectrum(emb, model, p)
    spec.require_nonnegative("simulation")

    mask = make_mask(emb, cfg.design.to_spec(), ctx.stream("design"))
    if not mask.is_full:
        path = ctx.out / "mask.txt"
        write_mask_file(path, mask.base_flags())
        report.add(path)

    sampler = FieldSampler(spec, p, ctx.stream("simulate"))
    provenance = {"command": "simulate", "seed": str(ctx.seed), "model": cfg.model, "params": p.as_dict(),
                  "design": mask.design_tag}
    for k in range(cfg.io.n_fields):
        z = sampler.draw()
        grid = mask.to_base_grid(z[mask.observed])
        path = write_grid(ctx.out / f"field_{k:03d}.csv", grid, base.s, dict(provenance, index=k))
        report.add(path)
    report.lines.append(f"{cfg.io.n_fields} field(s) on {base.n1}x{base.n2}, embedding {emb.N1}x{emb.N2}, "
                        f"design {mask.design_tag}")

    if cfg.io.input:
        report.add(_kriging_surface(ctx, report))
    report.extra["embedding"] = [emb.N1, emb.N2]
    report.extra["cutoff"] = model.cutoff
    return report


def _kriging_surface(ctx: RunContext, report: RunReport):
    cfg = ctx.cfg
    z_o, base, mask = ingest_grid(cfg.io.input, cfg.lattice.r_factor)
    model = model_for_embedding(cfg.model, mask.emb)
    p = cfg.params.to_paramset()
    spec = bccb.build_spectrum(mask.emb, model, p)
    precond = make_preconditioner(cfg.pcg, mask, mask.emb, model, p, spec)
    mu_tilde = conditional_mean(z_o, mask, spec, p, precond, cfg.pcg, stats=report.pcg)
    report.lines.append(f"kriging mean for {cfg.io.input} ({mask.unobserved.size} unobserved sites, "
                        f"{report.pcg.iterations} PCG iterations)")
    return write_grid(ctx.out / "kriging_mean.csv", base_view(mask.emb, mu_tilde), base.s,
                      {"command": "simulate", "input": str(cfg.io.input), "params": p.as_dict()})
