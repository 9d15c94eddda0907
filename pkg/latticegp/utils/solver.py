"""
Preconditioned conjugate gradient for C_oo x = b and its preconditioners.

Vecchia preconditioner: observed sites are grouped into 2x2 tiles scanned
row by row; each tile's observed sites form a prediction block conditioned
on the m nearest observed sites of earlier tiles. The implied precision
V^{-1} = sum_j L_j' V_j^{-1} L_j with L_j = A_j - K_j B_j is applied with
gathers and scatters. Blocks with the same offset geometry share one
(K, V^{-1}) factor pair.

For the PCG system the factor is built on the complete base lattice and
applied to the observed block through zero padding, (V^{-1})_oo, the same
way as (C^{-1})_oo; the preconditioned spectrum then carries the ratios
Var(Z_u) / Var(Z_u | Z_o) of the missing sites.
"""
import hashlib
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.spatial import cKDTree

from ..errors import BreakdownZeroCurvature, SingularConditioningSet
from ..schemas import PcgConfig
from . import bccb
from .bccb import EigenSpectrum
from .covariance import CorrelationModel, ParamSet, correlation
from .lattice import EmbeddingSpec, ObservationMask

logger = logging.getLogger(__name__)

Operator = Callable[[np.ndarray], np.ndarray]

JITTER = 1e-10
TILE_SHAPES = {1: (1, 1), 2: (1, 2), 4: (2, 2)}

# plan_blocks results keyed by mask fingerprint; layouts do not depend on theta
_layout_cache: Dict[tuple, "BlockLayout"] = {}
_layout_lock = threading.Lock()
_LAYOUT_CACHE_MAX = 8


@dataclass
class PcgResult:
    x: np.ndarray
    iters: int
    residual_trace: List[float]
    converged: bool

    @property
    def residual(self) -> float:
        return self.residual_trace[-1] if self.residual_trace else 0.0


@dataclass
class PcgStats:
    solves: int = 0
    iterations: int = 0
    max_iterations: int = 0
    failures: int = 0

    def add(self, result: PcgResult) -> None:
        self.solves += 1
        self.iterations += result.iters
        self.max_iterations = max(self.max_iterations, result.iters)
        if not result.converged:
            self.failures += 1

    @property
    def mean_iterations(self) -> float:
        return self.iterations / self.solves if self.solves else 0.0

    def as_dict(self) -> Dict[str, float]:
        return {
            "solves": self.solves,
            "iterations": self.iterations,
            "mean_iterations": round(self.mean_iterations, 3),
            "max_iterations": self.max_iterations,
            "failures": self.failures,
        }


def identity(x: np.ndarray) -> np.ndarray:
    return x


def pcg_solve(apply_A: Operator, apply_Minv: Operator, b: np.ndarray, cfg: PcgConfig) -> PcgResult:
    """
    Solve A x = b. Starts from x0 = M^{-1} b and stops when |r_k| / |r_0| < tolerance.

    Hitting max_iters returns the last iterate with ``converged=False``;
    callers decide whether that is fatal.
    """
    b = np.asarray(b, dtype=float)
    n = b.size
    max_iters = cfg.max_iters or max(n, 1)

    x = np.asarray(apply_Minv(b), dtype=float).copy()
    r = b - apply_A(x)
    r0 = float(np.linalg.norm(r))
    if r0 == 0.0 or n == 0:
        return PcgResult(x=x, iters=0, residual_trace=[0.0], converged=True)

    z = apply_Minv(r)
    p = z.copy()
    rz = float(r @ z)
    trace: List[float] = []
    converged = False
    iters = 0
    for iters in range(1, max_iters + 1):
        Ap = apply_A(p)
        pAp = float(p @ Ap)
        if not pAp > 0:
            raise BreakdownZeroCurvature(f"p'Ap = {pAp:.3e} at iteration {iters}; operator is not positive definite")
        step = rz / pAp
        x += step * p
        r -= step * Ap
        rel = float(np.linalg.norm(r)) / r0
        trace.append(rel)
        if rel < cfg.tolerance:
            converged = True
            break
        z = apply_Minv(r)
        rz_next = float(r @ z)
        p = z + (rz_next / rz) * p
        rz = rz_next

    if not converged:
        logger.warning("[PCG] no convergence after %d iterations (relative residual %.2e)", iters, trace[-1])
    else:
        logger.debug("[PCG] converged in %d iterations (relative residual %.2e)", iters, trace[-1])
    return PcgResult(x=x, iters=iters, residual_trace=trace, converged=converged)


# ---------------------------------------------------------------------------
# Block layout
# ---------------------------------------------------------------------------


@dataclass
class BlockLayout:
    """Prediction/conditioning index sets in observed-vector positions; theta independent."""
    n: int
    pred: List[np.ndarray]
    cond: List[np.ndarray]
    geometry: List[int]
    signatures: List[tuple]
    offsets: List[Tuple[np.ndarray, np.ndarray]]
    emb_shape: Tuple[int, int]

    @property
    def q(self) -> int:
        return len(self.pred)


def _mask_key(mask: ObservationMask, cond_size: int, pred_size: int) -> tuple:
    digest = hashlib.sha1(np.ascontiguousarray(mask.observed).tobytes()).hexdigest()
    return (mask.emb.N1, mask.emb.N2, int(cond_size), int(pred_size), digest)


def _nearest_predecessors(tree, coords, centers, block_of, j, m, ids, k_start):
    total = coords.shape[0]
    k = min(k_start, total)
    while True:
        dist, idx = tree.query(centers[j], k=k)
        dist = np.atleast_1d(dist)
        idx = np.atleast_1d(idx)
        keep = block_of[idx] < j
        cand_d, cand_i = dist[keep], idx[keep]
        enough = cand_i.size >= m and (k >= total or cand_d[m - 1] < dist[-1] - 1e-12)
        if enough or k >= total:
            order = np.lexsort((ids[cand_i], np.round(cand_d, 9)))
            return cand_i[order[:m]]
        k = min(2 * k, total)


def plan_blocks(mask: ObservationMask, cond_size: int, pred_size: int = 4) -> BlockLayout:
    if pred_size not in TILE_SHAPES:
        raise ValueError(f"prediction block size must be one of {sorted(TILE_SHAPES)}, got {pred_size}")
    key = _mask_key(mask, cond_size, pred_size)
    with _layout_lock:
        cached = _layout_cache.get(key)
    if cached is not None:
        return cached

    emb = mask.emb
    rows, cols = emb.index_to_rc(mask.observed)
    th, tw = TILE_SHAPES[pred_size]
    tile_r, tile_c = rows // th, cols // tw
    # tiles in row-major order; within a tile the observed order is already lexicographic
    order = np.lexsort((cols, rows, tile_c, tile_r))
    tile_key = tile_r[order] * (emb.N2 // tw + 1) + tile_c[order]
    starts = np.flatnonzero(np.r_[True, tile_key[1:] != tile_key[:-1]])
    ends = np.r_[starts[1:], order.size]

    q = starts.size
    block_of = np.empty(mask.n, dtype=np.int64)
    anchors = np.empty((q, 2), dtype=np.int64)
    for j, (a, b) in enumerate(zip(starts, ends)):
        block_of[order[a:b]] = j
        anchors[j] = (tile_r[order[a]] * th, tile_c[order[a]] * tw)

    coords = np.column_stack([rows, cols]).astype(float)
    centers = anchors + np.array([(th - 1) / 2.0, (tw - 1) / 2.0])
    tree = cKDTree(coords)
    ids = np.asarray(mask.observed)
    k_start = 4 * cond_size + pred_size

    pred, cond, geometry, signatures, offsets = [], [], [], [], []
    sig_index: Dict[tuple, int] = {}
    for j, (a, b) in enumerate(zip(starts, ends)):
        P = np.sort(order[a:b])
        if j == 0 or cond_size == 0:
            C = np.empty(0, dtype=np.int64)
        else:
            C = _nearest_predecessors(tree, coords, centers, block_of, j, cond_size, ids, k_start)
        p_off = np.column_stack([rows[P] - anchors[j, 0], cols[P] - anchors[j, 1]])
        c_off = np.column_stack([rows[C] - anchors[j, 0], cols[C] - anchors[j, 1]])
        if C.size:
            canon = np.lexsort((c_off[:, 1], c_off[:, 0]))
            C, c_off = C[canon], c_off[canon]
        sig = (tuple(map(tuple, p_off)), tuple(map(tuple, c_off)))
        if sig not in sig_index:
            sig_index[sig] = len(signatures)
            signatures.append(sig)
            offsets.append((p_off, c_off))
        pred.append(P.astype(np.int64))
        cond.append(C.astype(np.int64))
        geometry.append(sig_index[sig])

    layout = BlockLayout(
        n=mask.n, pred=pred, cond=cond, geometry=geometry, signatures=signatures,
        offsets=offsets, emb_shape=emb.shape,
    )
    with _layout_lock:
        # first writer wins so concurrent callers share one plan
        if key in _layout_cache:
            return _layout_cache[key]
        if len(_layout_cache) >= _LAYOUT_CACHE_MAX:
            _layout_cache.pop(next(iter(_layout_cache)))
        _layout_cache[key] = layout
    logger.info("[VECCHIA] %d blocks, %d distinct geometries (m=%d)", q, len(signatures), cond_size)
    return layout


def single_block_layout(mask: ObservationMask) -> BlockLayout:
    """All observed sites in one prediction block with nothing to condition on."""
    rows, cols = mask.emb.index_to_rc(mask.observed)
    p_off = np.column_stack([rows, cols]).astype(np.int64)
    c_off = np.zeros((0, 2), dtype=np.int64)
    sig = (tuple(map(tuple, p_off)), ())
    return BlockLayout(
        n=mask.n, pred=[np.arange(mask.n, dtype=np.int64)], cond=[np.empty(0, dtype=np.int64)],
        geometry=[0], signatures=[sig], offsets=[(p_off, c_off)], emb_shape=mask.emb.shape,
    )



# ---------------------------------------------------------------------------
# Vecchia factors
# ---------------------------------------------------------------------------


@dataclass
class BlockGroup:
    """Blocks sharing (n_j, m_j), stacked for vectorized gathers."""
    P: np.ndarray
    C: np.ndarray
    K: np.ndarray
    Vinv: np.ndarray
    logdet: np.ndarray


@dataclass
class VecchiaPrecond:
    layout: BlockLayout
    factors: Dict[int, Tuple[np.ndarray, np.ndarray, float]]
    groups: List[BlockGroup] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.layout.n

    @property
    def cache_size(self) -> int:
        return len(self.factors)

    @property
    def logdet_V(self) -> float:
        return float(sum(g.logdet.sum() for g in self.groups))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return vecchia_apply(self, x)


def _pair_distance(off_a, off_b, delta: float, emb_shape, wrap: bool) -> np.ndarray:
    d = np.abs(off_a[..., :, None, :] - off_b[..., None, :, :]).astype(float)
    if wrap:
        period = np.asarray(emb_shape, dtype=float)
        d = np.minimum(d, period - d)
    return delta * np.hypot(d[..., 0], d[..., 1])


def _cov(model, p, off_a, off_b, delta, emb_shape, wrap) -> np.ndarray:
    return np.asarray(correlation(model, p, _pair_distance(off_a, off_b, delta, emb_shape, wrap)))


def _chol_with_jitter(S: np.ndarray, what: str):
    try:
        return linalg.cho_factor(S, lower=True)
    except linalg.LinAlgError:
        jitter = JITTER * float(np.mean(np.diag(S)))
        try:
            return linalg.cho_factor(S + jitter * np.eye(S.shape[0]), lower=True)
        except linalg.LinAlgError as exc:
            raise SingularConditioningSet(f"{what} is numerically singular even after jitter {jitter:.1e}") from exc


def _factor_one(S_AA, S_AB, S_BB) -> Tuple[np.ndarray, np.ndarray, float]:
    if S_BB.shape[0]:
        cf = _chol_with_jitter(S_BB, "conditioning covariance")
        K = linalg.cho_solve(cf, S_AB.T).T
        V = S_AA - K @ S_AB.T
    else:
        K = np.zeros((S_AA.shape[0], 0))
        V = S_AA
    cv = _chol_with_jitter(0.5 * (V + V.T), "conditional covariance V_j")
    Vinv = linalg.cho_solve(cv, np.eye(V.shape[0]))
    logdet = 2.0 * float(np.sum(np.log(np.diag(cv[0]))))
    return K, Vinv, logdet


def _factor_batch(S_AA, S_AB, S_BB):
    """Batched factors; returns None when any member needs the jittered path."""
    try:
        if S_BB.shape[-1]:
            LB = np.linalg.cholesky(S_BB)
            Y = np.linalg.solve(LB, np.swapaxes(S_AB, -1, -2))
            K = np.swapaxes(np.linalg.solve(np.swapaxes(LB, -1, -2), Y), -1, -2)
            V = S_AA - np.einsum("gij,gkj->gik", K, S_AB)
        else:
            K = np.zeros(S_AA.shape[:2] + (0,))
            V = S_AA
        LV = np.linalg.cholesky(0.5 * (V + np.swapaxes(V, -1, -2)))
    except np.linalg.LinAlgError:
        return None
    eye = np.broadcast_to(np.eye(V.shape[-1]), V.shape)
    W = np.linalg.solve(LV, eye)
    Vinv = np.einsum("gki,gkj->gij", W, W)
    logdet = 2.0 * np.sum(np.log(np.diagonal(LV, axis1=-2, axis2=-1)), axis=-1)
    return K, Vinv, logdet


def build_vecchia(
    mask: ObservationMask,
    emb: EmbeddingSpec,
    model: CorrelationModel,
    p: ParamSet,
    pred_size: int = 4,
    cond_size: int = 33,
    wrap: bool = True,
    layout: Optional[BlockLayout] = None,
) -> VecchiaPrecond:
    """
    Vecchia factors on the correlation scale (sigma2 = 1).

    ``wrap=True`` evaluates Sigma at torus distances with the periodized
    correlation, matching C_oo; the composite likelihood passes the raw
    model with ``wrap=False``.
    """
    layout = layout or plan_blocks(mask, cond_size, pred_size)
    delta = emb.delta

    by_shape: Dict[Tuple[int, int], List[int]] = {}
    for gid, (p_off, c_off) in enumerate(layout.offsets):
        by_shape.setdefault((p_off.shape[0], c_off.shape[0]), []).append(gid)

    factors: Dict[int, Tuple[np.ndarray, np.ndarray, float]] = {}
    for (nj, mj), gids in by_shape.items():
        P_off = np.stack([layout.offsets[g][0] for g in gids])
        C_off = np.stack([layout.offsets[g][1] for g in gids]) if mj else np.zeros((len(gids), 0, 2), dtype=np.int64)
        S_AA = _cov(model, p, P_off, P_off, delta, emb.shape, wrap)
        S_AB = _cov(model, p, P_off, C_off, delta, emb.shape, wrap)
        S_BB = _cov(model, p, C_off, C_off, delta, emb.shape, wrap)
        batch = _factor_batch(S_AA, S_AB, S_BB)
        if batch is not None:
            K, Vinv, logdet = batch
            for i, g in enumerate(gids):
                factors[g] = (K[i], Vinv[i], float(logdet[i]))
        else:
            for i, g in enumerate(gids):
                factors[g] = _factor_one(S_AA[i], S_AB[i], S_BB[i])

    pre = VecchiaPrecond(layout=layout, factors=factors)
    pre.groups = _stack_groups(layout, factors)
    return pre


def _stack_groups(layout: BlockLayout, factors) -> List[BlockGroup]:
    members: Dict[Tuple[int, int], List[int]] = {}
    for j in range(layout.q):
        members.setdefault((layout.pred[j].size, layout.cond[j].size), []).append(j)
    groups = []
    for (nj, mj), js in members.items():
        P = np.stack([layout.pred[j] for j in js])
        C = np.stack([layout.cond[j] for j in js]) if mj else np.zeros((len(js), 0), dtype=np.int64)
        K = np.stack([factors[layout.geometry[j]][0] for j in js])
        Vinv = np.stack([factors[layout.geometry[j]][1] for j in js])
        logdet = np.array([factors[layout.geometry[j]][2] for j in js])
        groups.append(BlockGroup(P=P, C=C, K=K, Vinv=Vinv, logdet=logdet))
    return groups


def _residuals(group: BlockGroup, x: np.ndarray) -> np.ndarray:
    r = x[group.P]
    if group.C.shape[1]:
        r = r - np.einsum("gij,gj->gi", group.K, x[group.C])
    return r


def vecchia_apply(P: VecchiaPrecond, x: np.ndarray) -> np.ndarray:
    """sum_j L_j' V_j^{-1} L_j x."""
    x = np.asarray(x, dtype=float)
    if x.shape != (P.n,):
        raise ValueError(f"expected a vector of length {P.n}, got shape {x.shape}")
    w = np.zeros(P.n)
    for g in P.groups:
        u = np.einsum("gij,gj->gi", g.Vinv, _residuals(g, x))
        w += np.bincount(g.P.ravel(), weights=u.ravel(), minlength=P.n)
        if g.C.shape[1]:
            back = np.einsum("gij,gi->gj", g.K, u)
            w -= np.bincount(g.C.ravel(), weights=back.ravel(), minlength=P.n)
    return w


def vecchia_quad(P: VecchiaPrecond, x: np.ndarray) -> float:
    """x' V^{-1} x as a sum of blockwise residual quadratic forms."""
    x = np.asarray(x, dtype=float)
    total = 0.0
    for g in P.groups:
        r = _residuals(g, x)
        total += float(np.einsum("gi,gij,gj->", r, g.Vinv, r))
    return total


@dataclass
class RestrictedVecchia:
    """(V^{-1})_oo of a Vecchia factor built on the complete base lattice."""
    inner: VecchiaPrecond
    positions: np.ndarray

    @property
    def n(self) -> int:
        return int(self.positions.size)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise ValueError(f"expected a vector of length {self.n}, got shape {x.shape}")
        padded = np.zeros(self.inner.n)
        padded[self.positions] = x
        return vecchia_apply(self.inner, padded)[self.positions]


def lattice_vecchia_precond(
    mask: ObservationMask,
    emb: EmbeddingSpec,
    model: CorrelationModel,
    p: ParamSet,
    pred_size: int = 4,
    cond_size: int = 33,
) -> Operator:
    """
    Vecchia factor over every base-lattice site, restricted to the observed
    ones. Masks that observe sites outside the base lattice fall back to the
    observed-site factor.
    """
    base = emb.base
    lattice = ObservationMask.from_base_flags(emb, np.ones((base.n1, base.n2), dtype=bool), "complete")
    positions = np.searchsorted(lattice.observed, mask.observed)
    inside = positions < lattice.n
    if not inside.all() or not np.array_equal(lattice.observed[positions], mask.observed):
        logger.debug("[VECCHIA] mask reaches past the base lattice; conditioning on observed sites only")
        return build_vecchia(mask, emb, model, p, pred_size=pred_size, cond_size=cond_size)
    inner = build_vecchia(lattice, emb, model, p, pred_size=pred_size, cond_size=cond_size)
    if mask.n == lattice.n:
        return inner
    return RestrictedVecchia(inner=inner, positions=positions)


def inv_block_precond(spec: EigenSpectrum, mask: ObservationMask) -> Operator:
    """x -> (C^{-1})_oo x via a zero-padded FFT solve."""
    spec.require_positive("inverse-block preconditioner")

    def apply(x: np.ndarray) -> np.ndarray:
        return bccb.solve(spec, mask.scatter(x))[mask.observed]

    return apply


def c_oo_operator(spec: EigenSpectrum, mask: ObservationMask) -> Operator:
    def apply(x: np.ndarray) -> np.ndarray:
        return bccb.matvec(spec, mask.scatter(x))[mask.observed]

    return apply


def make_preconditioner(
    cfg: PcgConfig,
    mask: ObservationMask,
    emb: EmbeddingSpec,
    model: CorrelationModel,
    p: ParamSet,
    spec: EigenSpectrum,
    kind: Optional[str] = None,
) -> Operator:
    kind = kind or cfg.preconditioner
    if kind == "vecchia":
        if cfg.vecchia_support == "lattice":
            return lattice_vecchia_precond(mask, emb, model, p, pred_size=cfg.pred_size, cond_size=cfg.cond_size)
        return build_vecchia(mask, emb, model, p, pred_size=cfg.pred_size, cond_size=cfg.cond_size)
    if kind == "inv_block":
        return inv_block_precond(spec, mask)
    return identity


def dense_vecchia_matrix(P: VecchiaPrecond) -> np.ndarray:
    """Assembled L'DL for small problems."""
    eye = np.eye(P.n)
    return np.column_stack([vecchia_apply(P, eye[:, k]) for k in range(P.n)])
