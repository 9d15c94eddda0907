"""
Pydantic schemas for run configuration, grid headers and ledger rows
"""
from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .utils.covariance import FAMILIES, ParamSet
from .utils.lattice import SPACING_CONVENTION, DesignSpec

Command = Literal[
    "simulate", "fit-mcmc", "fit-em", "fit-cl", "fit-whittle", "fit-exact", "benchmark-pcg", "rmsd-study"
]
FreeParam = Literal["lam", "shape", "c"]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class ParamsBlock(StrictModel):
    mu: float = 0.0
    sigma2: float = Field(1.0, gt=0)
    lam: float = Field(0.1, gt=0, alias="lambda")
    shape: float = Field(1.0, gt=0)
    c: float = Field(0.0, ge=0)

    def to_paramset(self) -> ParamSet:
        return ParamSet(mu=self.mu, sigma2=self.sigma2, lam=self.lam, shape=self.shape, c=self.c)

    @classmethod
    def from_paramset(cls, p: ParamSet) -> "ParamsBlock":
        return cls(mu=p.mu, sigma2=p.sigma2, lam=p.lam, shape=p.shape, c=p.c)


class LatticeBlock(StrictModel):
    n1: int = Field(32, ge=2)
    n2: int = Field(32, ge=2)
    s: float = Field(0.7071067811865476, gt=0)
    r_factor: float = Field(1.5, ge=1)


class DesignBlock(StrictModel):
    kind: Literal["complete", "random", "disk", "file"] = "complete"
    p: float = Field(0.0, ge=0, lt=1)
    path: Optional[str] = None

    @model_validator(mode="after")
    def check_path(self):
        if self.kind == "file" and not self.path:
            raise ValueError("design kind 'file' needs a path")
        return self

    def to_spec(self) -> DesignSpec:
        return DesignSpec(kind=self.kind, p=self.p, path=self.path)


class PcgConfig(StrictModel):
    tolerance: float = Field(1e-5, gt=0, lt=1)
    max_iters: Optional[int] = Field(None, ge=1)
    preconditioner: Literal["vecchia", "inv_block", "none"] = "vecchia"
    cond_size: int = Field(33, ge=1)
    pred_size: Literal[1, 2, 4] = 4
    # "lattice": factor over the complete base lattice, applied to the observed block
    vecchia_support: Literal["lattice", "observed"] = "lattice"


class McmcConfig(StrictModel):
    iterations: int = Field(2500, ge=1)
    burn_in: int = Field(500, ge=0)
    free: List[FreeParam] = Field(default_factory=lambda: ["lam", "shape"])
    proposal_scale: float = Field(0.1, gt=0)
    proposal_cov: Optional[List[List[float]]] = None
    target_accept: float = Field(0.35, gt=0, lt=1)
    adapt: bool = True
    alpha_transform: Literal["logit", "log"] = "logit"
    snapshots: int = Field(3, ge=0)

    @model_validator(mode="after")
    def check_chain(self):
        if self.burn_in >= self.iterations:
            raise ValueError(f"burn_in ({self.burn_in}) must be below iterations ({self.iterations})")
        if self.proposal_cov is not None:
            cov = np.asarray(self.proposal_cov, dtype=float)
            k = len(self.free)
            if cov.shape != (k, k):
                raise ValueError(f"proposal_cov must be {k}x{k} for free parameters {self.free}")
            if not np.allclose(cov, cov.T) or np.any(np.linalg.eigvalsh(cov) <= 0):
                raise ValueError("proposal_cov must be symmetric positive definite")
        return self

    def initial_cov(self) -> np.ndarray:
        if self.proposal_cov is not None:
            return np.asarray(self.proposal_cov, dtype=float)
        return np.eye(len(self.free)) * self.proposal_scale**2


class SimplexConfig(StrictModel):
    xatol: float = Field(1e-4, gt=0)
    fatol: float = Field(1e-6, gt=0)
    maxiter: int = Field(400, ge=1)
    initial_step: float = Field(0.2, gt=0)


class EmConfig(StrictModel):
    M: int = Field(400, ge=1)
    max_em_iters: int = Field(30, ge=1)
    convergence_tol: float = Field(1e-3, gt=0)
    patience: int = Field(3, ge=1)
    free: List[FreeParam] = Field(default_factory=lambda: ["lam"])
    optimizer: SimplexConfig = Field(default_factory=SimplexConfig)


class StudyBlock(StrictModel):
    designs: List[DesignBlock] = Field(default_factory=lambda: [DesignBlock()])
    n_reps: int = Field(50, ge=1)
    methods: List[Literal["exact", "em", "composite", "whittle"]] = Field(
        default_factory=lambda: ["exact", "em", "composite", "whittle"]
    )
    composite_cond_size: int = Field(52, ge=1)


class IoBlock(StrictModel):
    input: Optional[str] = None
    out: str = "runs/latest"
    n_fields: int = Field(1, ge=1)


class RunConfig(StrictModel):
    command: Optional[Command] = None
    model: Literal["powered_exponential", "matern"] = "powered_exponential"
    params: ParamsBlock = Field(default_factory=ParamsBlock)
    lattice: LatticeBlock = Field(default_factory=LatticeBlock)
    design: DesignBlock = Field(default_factory=DesignBlock)
    pcg: PcgConfig = Field(default_factory=PcgConfig)
    mcmc: McmcConfig = Field(default_factory=McmcConfig)
    em: EmConfig = Field(default_factory=EmConfig)
    study: StudyBlock = Field(default_factory=StudyBlock)
    io: IoBlock = Field(default_factory=IoBlock)
    seed: int = Field(0, ge=0, lt=2**64)
    threads: Optional[int] = Field(None, ge=1)

    @field_validator("model")
    @classmethod
    def known_family(cls, v):
        assert v in FAMILIES
        return v

    @model_validator(mode="after")
    def check_params(self):
        try:
            self.params.to_paramset().validate(self.model)
        except ValueError as exc:
            raise ValueError(f"params: {exc}") from exc
        return self


class GridHeader(StrictModel):
    n1: int = Field(..., ge=2)
    n2: int = Field(..., ge=2)
    s: float = Field(..., gt=0)
    missing_count: int = Field(0, ge=0)
    spacing: str = SPACING_CONVENTION
    provenance: Dict[str, object] = Field(default_factory=dict)


class EstimateOut(BaseModel):
    study_id: int
    design: str
    replicate_id: int
    method: str
    mu: Optional[float] = None
    sigma2: Optional[float] = None
    lam: Optional[float] = None
    shape: Optional[float] = None
    c: Optional[float] = None
    loglik: Optional[float] = None
    wall_seconds: Optional[float] = None
    failed: bool = False
    error: Optional[str] = None

    class Config:
        from_attributes = True
