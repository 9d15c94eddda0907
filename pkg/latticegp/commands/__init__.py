"""
Subcommand routing.

Each module in this package owns a ``CommandRouter`` and registers its
handlers with ``@router.command(name)``; ``latticegp.main`` includes the
routers and dispatches on the command name.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConfigError
from ..schemas import RunConfig
from ..utils.covariance import CorrelationModel, ParamSet, model_for_embedding
from ..utils.gridio import ingest_grid
from ..utils.lattice import EmbeddingSpec, LatticeSpec, ObservationMask, build_embedding, build_lattice
from ..utils.mcmc import method_of_moments
from ..utils.rng import make_stream
from ..utils.solver import PcgStats

logger = logging.getLogger(__name__)

MIN_OBSERVED = 3


@dataclass
class RunContext:
    cfg: RunConfig
    out: Path
    seed: int
    threads: int = 1

    def stream(self, name: str) -> np.random.Generator:
        return make_stream(self.seed, name)


@dataclass
class RunReport:
    artifacts: List[str] = field(default_factory=list)
    pcg: PcgStats = field(default_factory=PcgStats)
    lines: List[str] = field(default_factory=list)
    extra: Dict[str, object] = field(default_factory=dict)

    def add(self, path) -> None:
        self.artifacts.append(Path(path).name)


Handler = Callable[[RunContext], RunReport]


class CommandRouter:
    def __init__(self, tags: Sequence[str] = ()):
        self.tags = list(tags)
        self.routes: Dict[str, Handler] = {}

    def command(self, name: str):
        def register(func: Handler) -> Handler:
            if name in self.routes:
                raise ValueError(f"command '{name}' registered twice")
            self.routes[name] = func
            return func
        return register

    def include_router(self, other: "CommandRouter") -> None:
        for name, func in other.routes.items():
            if name in self.routes:
                raise ValueError(f"command '{name}' registered twice")
            self.routes[name] = func

    def dispatch(self, name: str, ctx: RunContext) -> RunReport:
        try:
            handler = self.routes[name]
        except KeyError:
            raise ConfigError(f"unknown command '{name}'") from None
        logger.info("[RUN] %s -> %s", name, ctx.out)
        return handler(ctx)


# ---------------------------------------------------------------------------
# Shared setup
# ---------------------------------------------------------------------------


def configured_problem(cfg: RunConfig) -> Tuple[LatticeSpec, EmbeddingSpec, CorrelationModel, ParamSet]:
    """Base lattice, embedding, cutoff model and parameters from the config blocks."""
    base = build_lattice(cfg.lattice.n1, cfg.lattice.n2, cfg.lattice.s)
    emb = build_embedding(base, cfg.lattice.r_factor)
    return base, emb, model_for_embedding(cfg.model, emb), cfg.params.to_paramset()


def load_observations(cfg: RunConfig) -> Tuple[np.ndarray, ObservationMask, CorrelationModel]:
    if not cfg.io.input:
        raise ConfigError(f"{cfg.command} needs io.input (a grid file)")
    z_o, _, mask = ingest_grid(cfg.io.input, cfg.lattice.r_factor)
    if z_o.size < MIN_OBSERVED:
        raise ConfigError(f"{cfg.io.input} has {z_o.size} observed values; fitting needs at least {MIN_OBSERVED}")
    return z_o, mask, model_for_embedding(cfg.model, mask.emb)


def initial_params(z_o: np.ndarray, mask: ObservationMask, cfg: RunConfig, free: Sequence[str]) -> ParamSet:
    """Moment estimates for the free parameters; fixed ones come from the params block."""
    fixed = cfg.params.to_paramset()
    init = method_of_moments(z_o, mask, cfg.model, c=fixed.c)
    pinned = {name: getattr(fixed, name) for name in ("lam", "shape", "c") if name not in free}
    return init.with_theta(**pinned) if pinned else init


def base_view(emb: EmbeddingSpec, z: np.ndarray) -> np.ndarray:
    """Base-lattice corner of a length-N embedding field."""
    return np.asarray(z).reshape(emb.shape)[: emb.base.n1, : emb.base.n2].copy()


def exact_loglik_line(label: str, value: Optional[float]) -> str:
    if value is None or not np.isfinite(value):
        return f"⚠️ {label}: exact loglik skipped (dense guard or not positive definite)"
    return f"{label}: exact loglik {value:.4f}"
