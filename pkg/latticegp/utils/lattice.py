"""
Observation lattices, their toroidal embedding lattices and missingness
designs.

Spacing convention: the base lattice is half-open, so site (i, j) sits at
(i*delta, j*delta) with delta = s/n1 and the far edge s is never a site.
With this convention 3*n1 points span exactly [0, 3s) and the torus period
N1*delta equals 2r exactly.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy.fft import next_fast_len

logger = logging.getLogger(__name__)

SPACING_CONVENTION = "half-open"
DESIGN_TAGS = ("complete", "random", "disk", "file", "explicit")


@dataclass(frozen=True)
class LatticeSpec:
    n1: int
    n2: int
    s: float

    def __post_init__(self):
        if self.n1 < 2 or self.n2 < 2:
            raise ValueError(f"lattice needs at least 2x2 sites, got {self.n1}x{self.n2}")
        if not self.s > 0:
            raise ValueError(f"domain side must be positive, got {self.s}")

    @property
    def delta(self) -> float:
        return self.s / self.n1

    @property
    def size(self) -> int:
        return self.n1 * self.n2

    @property
    def diameter(self) -> float:
        """Length of the domain diagonal; the unit distance of the cutoff model."""
        return self.delta * math.hypot(self.n1, self.n2)

    def site_coords(self) -> np.ndarray:
        ii, jj = np.meshgrid(np.arange(self.n1), np.arange(self.n2), indexing="ij")
        return np.column_stack([ii.ravel(), jj.ravel()]) * self.delta


@dataclass(frozen=True)
class EmbeddingSpec:
    N1: int
    N2: int
    base: LatticeSpec
    r_factor: float

    @property
    def N(self) -> int:
        return self.N1 * self.N2

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.N1, self.N2)

    @property
    def delta(self) -> float:
        return self.base.delta

    @property
    def period(self) -> float:
        return self.N1 * self.delta

    @property
    def r(self) -> float:
        """Cutoff radius in spatial units: half the torus period."""
        return self.period / 2.0

    @property
    def cutoff_ratio(self) -> float:
        """Cutoff radius measured in units of the base-domain diagonal."""
        return self.r / self.base.diameter

    def footprint(self) -> np.ndarray:
        """Embedding-lattice linear indices of the base-lattice sites, lexicographic."""
        ii, jj = np.meshgrid(np.arange(self.base.n1), np.arange(self.base.n2), indexing="ij")
        return (ii * self.N2 + jj).ravel()

    def index_to_rc(self, idx) -> Tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(idx)
        return idx // self.N2, idx % self.N2

    def coords(self, idx) -> np.ndarray:
        rows, cols = self.index_to_rc(idx)
        return np.column_stack([rows, cols]).astype(float) * self.delta


@dataclass(frozen=True)
class DesignSpec:
    kind: str = "complete"
    p: float = 0.0
    path: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("complete", "random", "disk", "file"):
            raise ValueError(f"unknown design '{self.kind}'")
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"missing fraction must lie in [0, 1), got {self.p}")
        if self.kind == "file" and not self.path:
            raise ValueError("file design needs a mask path")

    @property
    def tag(self) -> str:
        if self.kind in ("random", "disk"):
            return f"{self.kind}({self.p:g})"
        return self.kind


@dataclass(frozen=True)
class ObservationMask:
    emb: EmbeddingSpec
    observed: np.ndarray
    unobserved: np.ndarray
    design_tag: str = "explicit"
    _flags: np.ndarray = field(default=None, repr=False, compare=False)

    @classmethod
    def from_indices(cls, emb: EmbeddingSpec, observed, design_tag: str = "explicit") -> "ObservationMask":
        flags = np.zeros(emb.N, dtype=bool)
        observed = np.unique(np.asarray(observed, dtype=np.int64))
        if observed.size and (observed[0] < 0 or observed[-1] >= emb.N):
            raise ValueError("observed index outside the embedding lattice")
        flags[observed] = True
        obs = np.flatnonzero(flags)
        uno = np.flatnonzero(~flags)
        obs.setflags(write=False)
        uno.setflags(write=False)
        flags.setflags(write=False)
        return cls(emb=emb, observed=obs, unobserved=uno, design_tag=design_tag, _flags=flags)

    @classmethod
    def from_base_flags(cls, emb: EmbeddingSpec, base_flags: np.ndarray, design_tag: str) -> "ObservationMask":
        base_flags = np.asarray(base_flags, dtype=bool)
        if base_flags.shape != (emb.base.n1, emb.base.n2):
            raise ValueError(
                f"mask shape {base_flags.shape} does not match base lattice {emb.base.n1}x{emb.base.n2}"
            )
        return cls.from_indices(emb, emb.footprint()[base_flags.ravel()], design_tag)

    @property
    def n(self) -> int:
        return int(self.observed.size)

    @property
    def flags(self) -> np.ndarray:
        return self._flags

    @property
    def is_full(self) -> bool:
        return self.unobserved.size == 0

    def scatter(self, x_o: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """Embed an observed-ordered vector into a length-N field padded with ``fill``."""
        x_o = np.asarray(x_o)
        if x_o.shape != (self.n,):
            raise ValueError(f"expected {self.n} observed values, got shape {x_o.shape}")
        out = np.full(self.emb.N, fill, dtype=np.result_type(x_o.dtype, float))
        out[self.observed] = x_o
        return out

    def to_base_grid(self, x_o: np.ndarray) -> np.ndarray:
        """Observed values laid out on the base lattice, NaN where missing."""
        full = self.scatter(x_o, fill=np.nan).reshape(self.emb.shape)
        return full[: self.emb.base.n1, : self.emb.base.n2].copy()

    def base_flags(self) -> np.ndarray:
        return self.flags.reshape(self.emb.shape)[: self.emb.base.n1, : self.emb.base.n2].copy()


def build_lattice(n1: int, n2: int, s: float) -> LatticeSpec:
    return LatticeSpec(int(n1), int(n2), float(s))


def build_embedding(base: LatticeSpec, r_factor: float = 1.5) -> EmbeddingSpec:
    """
    Square N x N embedding lattice for ``base``.

    Square bases use N = 2*r_factor*n1 rounded up to a 5-smooth size. Other
    bases use the diagonal as the reference length (the satellite-grid
    recipe): N is at least 2*r_factor*diag/sqrt(2) sites and never below
    twice the longer side.
    """
    if r_factor < 1:
        raise ValueError(f"r_factor must be >= 1, got {r_factor}")
    if base.n1 == base.n2:
        target = 2.0 * r_factor * base.n1
    else:
        target = max(2.0 * r_factor * math.hypot(base.n1, base.n2) / math.sqrt(2.0), 2.0 * max(base.n1, base.n2))
    size = next_fast_len(int(math.ceil(target - 1e-9)), real=True)
    emb = EmbeddingSpec(N1=size, N2=size, base=base, r_factor=float(r_factor))
    logger.debug("[LATTICE] %dx%d base -> %dx%d embedding (r=%.4f)", base.n1, base.n2, size, size, emb.r)
    return emb


def load_mask_file(path) -> np.ndarray:
    """Read an 'o'/'.' text mask into a boolean array (True = observed)."""
    lines = [line.rstrip("\r\n") for line in Path(path).read_text().splitlines() if line.strip()]
    if not lines:
        raise ValueError(f"mask file {path} is empty")
    width = len(lines[0])
    rows = []
    for number, line in enumerate(lines, start=1):
        if len(line) != width:
            raise ValueError(f"mask file {path}: row {number} has {len(line)} cells, expected {width}")
        bad = set(line) - {"o", "."}
        if bad:
            raise ValueError(f"mask file {path}: row {number} has invalid characters {sorted(bad)}")
        rows.append([ch == "o" for ch in line])
    return np.array(rows, dtype=bool)


def write_mask_file(path, base_flags: np.ndarray) -> None:
    text = "\n".join("".join("o" if v else "." for v in row) for row in np.asarray(base_flags, dtype=bool))
    Path(path).write_text(text + "\n")


def _disk_flags(base: LatticeSpec, p: float) -> np.ndarray:
    ci, cj = (base.n1 - 1) / 2.0, (base.n2 - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(base.n1), np.arange(base.n2), indexing="ij")
    dist2 = (ii - ci) ** 2 + (jj - cj) ** 2
    target = p * base.size
    if target <= 0:
        return np.ones_like(dist2, dtype=bool)
    # radii only matter at ring boundaries; pick the ring count nearest the target
    rings = np.unique(dist2)
    counts = np.searchsorted(np.sort(dist2.ravel()), rings, side="right")
    radius2 = rings[int(np.argmin(np.abs(counts - target)))]
    return dist2 > radius2


def make_mask(emb: EmbeddingSpec, design: DesignSpec, rng: Optional[np.random.Generator] = None) -> ObservationMask:
    base = emb.base
    if design.kind == "complete":
        flags = np.ones((base.n1, base.n2), dtype=bool)
    elif design.kind == "random":
        if rng is None:
            raise ValueError("random design needs a random stream")
        flags = rng.random((base.n1, base.n2)) >= design.p
    elif design.kind == "disk":
        flags = _disk_flags(base, design.p)
    else:
        flags = load_mask_file(design.path)
    mask = ObservationMask.from_base_flags(emb, flags, design.tag)
    logger.info("[LATTICE] design %s: %d of %d base sites observed", design.tag, mask.n, base.size)
    return mask


def wrap_distance(emb: EmbeddingSpec, idx_a, idx_b):
    """Euclidean distance on the embedding torus (per-coordinate wrap)."""
    ra, ca = emb.index_to_rc(idx_a)
    rb, cb = emb.index_to_rc(idx_b)
    d1 = np.abs(ra - rb)
    d2 = np.abs(ca - cb)
    d1 = np.minimum(d1, emb.N1 - d1)
    d2 = np.minimum(d2, emb.N2 - d2)
    out = emb.delta * np.hypot(d1, d2)
    return float(out) if np.ndim(out) == 0 else out


def torus_offsets(emb: EmbeddingSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Wrapped row/column offsets of every embedding site from site 0, as N1 x N2 grids."""
    d1 = np.arange(emb.N1)
    d2 = np.arange(emb.N2)
    d1 = np.minimum(d1, emb.N1 - d1)
    d2 = np.minimum(d2, emb.N2 - d2)
    return np.meshgrid(d1, d2, indexing="ij")
