"""
benchmark-pcg: iterations and wall time of the C_oo solve under each
preconditioner for the configured lattice and design.
"""
import logging
import time

from ..utils import bccb
from ..utils.gridio import write_records
from ..utils.lattice import make_mask
from ..utils.simulate import unconditional_pair
from ..utils.solver import c_oo_operator, make_preconditioner, pcg_solve
from . import CommandRouter, RunContext, RunReport, configured_problem

logger = logging.getLogger(__name__)

router = CommandRouter(tags=["Benchmark"])

PRECONDITIONERS = ("vecchia", "inv_block", "none")


@router.command("benchmark-pcg")
def benchmark_pcg(ctx: RunContext) -> RunReport:
    cfg = ctx.cfg
    report = RunReport()
    base, emb, model, p = configured_problem(cfg)
    spec = bccb.build_spectrum(emb, model, p)
    spec.require_positive("PCG benchmark")
    mask = make_mask(emb, cfg.design.to_spec(), ctx.stream("design"))
    apply_A = c_oo_operator(spec, mask)

    # one right-hand side per field, shared by every preconditioner
    rng = ctx.stream("benchmark")
    rhs = []
    while len(rhs) < cfg.io.n_fields:
        for z in unconditional_pair(spec, p, rng):
            rhs.append(z[mask.observed] - p.mu)
    rhs = rhs[: cfg.io.n_fields]

    rows = []
    for kind in PRECONDITIONERS:
        started = time.perf_counter()
        precond = make_preconditioner(cfg.pcg, mask, emb, model, p, spec, kind=kind)
        setup = time.perf_counter() - started
        for k, b in enumerate(rhs):
            started = time.perf_counter()
            result = pcg_solve(apply_A, precond, b, cfg.pcg)
            report.pcg.add(result)
            rows.append({
                "lattice_size": f"{base.n1}x{base.n2}",
                "design": mask.design_tag,
                "preconditioner": kind,
                "cond_size": cfg.pcg.cond_size if kind == "vecchia" else 0,
                "iterations": result.iters,
                "wall_seconds": time.perf_counter() - started,
                "setup_seconds": setup,
                "converged": result.converged,
                "field": k,
            })
        mean_iters = sum(r["iterations"] for r in rows if r["preconditioner"] == kind) / len(rhs)
        report.lines.append(f"{kind:>9}: {mean_iters:.1f} iterations per solve (setup {setup:.2f}s)")
        logger.info("[BENCH] %s on %s/%s: %.1f iterations", kind, rows[-1]["lattice_size"], mask.design_tag, mean_iters)

    report.add(write_records(ctx.out / "benchmark.csv", rows))
    return report
