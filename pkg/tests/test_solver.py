import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from pydantic import ValidationError

from latticegp.errors import BreakdownZeroCurvature, SingularConditioningSet
from latticegp.schemas import McmcConfig, PcgConfig
from latticegp.utils import bccb
from latticegp.utils.covariance import POWEXP, ParamSet, model_for_embedding
from latticegp.utils.lattice import DesignSpec, ObservationMask, build_embedding, build_lattice, make_mask
from latticegp.utils.likelihood import Prior
from latticegp.utils.mcmc import gibbs_run
from latticegp.utils.simulate import unconditional_pair
from latticegp.utils.solver import (
    PcgStats,
    RestrictedVecchia,
    VecchiaPrecond,
    _chol_with_jitter,
    build_vecchia,
    c_oo_operator,
    dense_vecchia_matrix,
    identity,
    inv_block_precond,
    lattice_vecchia_precond,
    make_preconditioner,
    pcg_solve,
    plan_blocks,
    vecchia_apply,
    vecchia_quad,
)
from tests.oracles import dense_bccb, smooth_spectrum

TRUTH = ParamSet(mu=0.0, sigma2=1.0, lam=0.141, shape=1.0)
STUDY_TRUTH = ParamSet(mu=10.0, sigma2=4.0, lam=0.1, shape=1.0, c=0.01)


def _problem(n, design=DesignSpec("complete"), seed=0):
    emb = build_embedding(build_lattice(n, n, 1 / math.sqrt(2)), 1.5)
    model = model_for_embedding(POWEXP, emb)
    mask = make_mask(emb, design, np.random.default_rng(seed))
    return emb, model, mask


def _dense_coo(spec, mask):
    apply = c_oo_operator(spec, mask)
    eye = np.eye(mask.n)
    return np.column_stack([apply(eye[:, k]) for k in range(mask.n)])


def test_identity_system_needs_no_work():
    b = np.arange(1.0, 6.0)
    res = pcg_solve(identity, identity, b, PcgConfig())
    assert res.iters <= 1
    assert res.converged
    np.testing.assert_allclose(res.x, b)


def test_dense_spd_system(rng):
    G = rng.standard_normal((20, 20))
    A = G @ G.T + 20 * np.eye(20)
    b = rng.standard_normal(20)
    res = pcg_solve(lambda x: A @ x, identity, b, PcgConfig(tolerance=1e-8))
    assert res.converged
    expected = np.linalg.solve(A, b)
    assert np.linalg.norm(res.x - expected) / np.linalg.norm(expected) < 1e-6
    assert res.residual_trace[-1] < 1e-8


def test_preconditioned_and_plain_agree(rng):
    G = rng.standard_normal((30, 30))
    A = G @ G.T + np.diag(np.linspace(1, 50, 30))
    Dinv = 1.0 / np.diag(A)
    b = rng.standard_normal(30)
    cfg = PcgConfig(tolerance=1e-10)
    plain = pcg_solve(lambda x: A @ x, identity, b, cfg)
    jacobi = pcg_solve(lambda x: A @ x, lambda x: Dinv * x, b, cfg)
    np.testing.assert_allclose(plain.x, jacobi.x, rtol=1e-7, atol=1e-9)


def test_indefinite_operator_breaks_down():
    with pytest.raises(BreakdownZeroCurvature):
        pcg_solve(lambda x: -x, identity, np.ones(4), PcgConfig())


def test_iteration_cap_flags_result(rng):
    A = np.diag(np.linspace(1.0, 1000.0, 50))
    res = pcg_solve(lambda x: A @ x, identity, rng.standard_normal(50), PcgConfig(max_iters=2))
    assert not res.converged
    assert res.iters == 2
    stats = PcgStats()
    stats.add(res)
    assert stats.failures == 1 and stats.max_iterations == 2


def test_layout_partitions_observed_sites():
    emb, model, mask = _problem(8, DesignSpec("random", 0.2), seed=4)
    layout = plan_blocks(mask, cond_size=18)
    allpred = np.sort(np.concatenate(layout.pred))
    np.testing.assert_array_equal(allpred, np.arange(mask.n))
    assert layout.cond[0].size == 0
    position = np.empty(mask.n, dtype=int)
    for j, P in enumerate(layout.pred):
        assert 1 <= P.size <= 4
        position[P] = j
    for j, C in enumerate(layout.cond):
        assert C.size <= 18
        assert np.all(position[C] < j)


def test_complete_lattice_shares_geometries():
    emb, model, mask = _problem(32)
    P = build_vecchia(mask, emb, model, TRUTH, cond_size=33)
    assert P.layout.q == 256
    assert P.cache_size < P.layout.q // 2


def test_full_conditioning_reproduces_exact_inverse():
    emb, model, mask = _problem(4)
    spec = bccb.build_spectrum(emb, model, TRUTH)
    P = build_vecchia(mask, emb, model, TRUTH, cond_size=mask.n)
    C_oo = _dense_coo(spec, mask)
    np.testing.assert_allclose(dense_vecchia_matrix(P), np.linalg.inv(C_oo), rtol=1e-7, atol=1e-7)
    assert P.logdet_V == pytest.approx(np.linalg.slogdet(C_oo)[1], rel=1e-8)


def test_vecchia_apply_matches_assembled_ldl(rng):
    emb = build_embedding(build_lattice(4, 4, 1 / math.sqrt(2)), 1.5)
    model = model_for_embedding(POWEXP, emb)
    keep = emb.footprint()[[0, 1, 2, 4, 5, 7, 9, 10, 13, 15]]
    mask = ObservationMask.from_indices(emb, keep)
    P = build_vecchia(mask, emb, model, TRUTH, cond_size=3)
    n = mask.n
    dense = np.zeros((n, n))
    for j in range(P.layout.q):
        K, Vinv, _ = P.factors[P.layout.geometry[j]]
        L = np.zeros((P.layout.pred[j].size, n))
        L[np.arange(P.layout.pred[j].size), P.layout.pred[j]] = 1.0
        if P.layout.cond[j].size:
            L[:, P.layout.cond[j]] -= K
        dense += L.T @ Vinv @ L
    x, y = rng.standard_normal((2, n))
    np.testing.assert_allclose(vecchia_apply(P, x), dense @ x, atol=1e-10)
    np.testing.assert_allclose(vecchia_apply(P, np.zeros(n)), 0.0)
    assert x @ vecchia_apply(P, y) == pytest.approx(y @ vecchia_apply(P, x), rel=1e-10)
    assert vecchia_quad(P, x) == pytest.approx(x @ dense @ x, rel=1e-10)


def test_vecchia_rejects_wrong_length():
    emb, model, mask = _problem(4)
    P = build_vecchia(mask, emb, model, TRUTH, cond_size=4)
    with pytest.raises(ValueError):
        vecchia_apply(P, np.ones(mask.n + 1))


def test_singular_conditioning_set_raises():
    with pytest.raises(SingularConditioningSet):
        _chol_with_jitter(-np.eye(2), "test block")


def test_inverse_block_preconditioner(rng):
    spec, c = smooth_spectrum((4, 4))
    emb = build_embedding(build_lattice(2, 2, 1.0), 1.0)
    Cinv = np.linalg.inv(dense_bccb(c, spec.shape))
    complete = ObservationMask.from_indices(emb, np.arange(16))
    x = rng.standard_normal(16)
    np.testing.assert_allclose(inv_block_precond(spec, complete)(x), Cinv @ x, atol=1e-10)

    mask = ObservationMask.from_indices(emb, [0, 3, 5, 6, 10, 12])
    M = inv_block_precond(spec, mask)
    y = rng.standard_normal(6)
    o = mask.observed
    np.testing.assert_allclose(M(y), Cinv[np.ix_(o, o)] @ y, atol=1e-10)
    assert y @ M(y) > 0


def test_lattice_vecchia_is_a_principal_block_of_the_complete_factor():
    emb, model, mask = _problem(6, DesignSpec("random", 0.25), seed=3)
    complete = make_mask(emb, DesignSpec("complete"))
    P = lattice_vecchia_precond(mask, emb, model, TRUTH, cond_size=8)
    assert isinstance(P, RestrictedVecchia)
    assert P.n == mask.n
    full = dense_vecchia_matrix(build_vecchia(complete, emb, model, TRUTH, cond_size=8))
    keep = np.searchsorted(complete.observed, mask.observed)
    restricted = np.column_stack([P(col) for col in np.eye(mask.n)])
    np.testing.assert_allclose(restricted, full[np.ix_(keep, keep)], atol=1e-10)
    assert np.all(np.linalg.eigvalsh(0.5 * (restricted + restricted.T)) > 0)
    with pytest.raises(ValueError):
        P(np.ones(mask.n + 1))


def test_lattice_vecchia_on_complete_and_torus_masks(full_mask, small_emb, small_model, exp_params):
    complete = make_mask(small_emb, DesignSpec("complete"))
    assert isinstance(lattice_vecchia_precond(complete, small_emb, small_model, exp_params), VecchiaPrecond)
    torus = lattice_vecchia_precond(full_mask, small_emb, small_model, exp_params)
    assert isinstance(torus, VecchiaPrecond)
    assert torus.n == small_emb.N


def test_preconditioner_support_is_configurable():
    emb, model, mask = _problem(16, DesignSpec("disk", 0.1), seed=1)
    spec = bccb.build_spectrum(emb, model, TRUTH)
    lattice = make_preconditioner(PcgConfig(), mask, emb, model, TRUTH, spec)
    observed = make_preconditioner(PcgConfig(vecchia_support="observed"), mask, emb, model, TRUTH, spec)
    assert isinstance(lattice, RestrictedVecchia)
    assert isinstance(observed, VecchiaPrecond)
    assert observed.n == lattice.n == mask.n


def test_unsupported_tile_size_is_rejected():
    emb, model, mask = _problem(4)
    with pytest.raises(ValueError, match="prediction block size"):
        plan_blocks(mask, cond_size=4, pred_size=3)
    with pytest.raises(ValidationError):
        PcgConfig(pred_size=3)


def test_concurrent_layout_requests_share_one_plan():
    emb, model, mask = _problem(16, DesignSpec("random", 0.1), seed=2)
    with ThreadPoolExecutor(max_workers=4) as pool:
        layouts = list(pool.map(lambda _: plan_blocks(mask, cond_size=12), range(8)))
    again = plan_blocks(mask, cond_size=12)
    assert all(layout is again for layout in layouts)


def test_vecchia_beats_plain_cg_on_complete_32():
    emb, model, mask = _problem(32)
    spec = bccb.build_spectrum(emb, model, TRUTH)
    assert spec.positive
    z, _ = unconditional_pair(spec, TRUTH, np.random.default_rng(11))
    b = z[mask.observed]
    cfg = PcgConfig(tolerance=1e-5)
    A = c_oo_operator(spec, mask)
    vec = pcg_solve(A, make_preconditioner(cfg, mask, emb, model, TRUTH, spec), b, cfg)
    plain = pcg_solve(A, identity, b, cfg)
    assert vec.converged and plain.converged
    assert vec.iters < plain.iters
    assert vec.iters <= 15


def _draw_system_iterations(emb, model, mask, p, n_draws=8, seed=0):
    """Mean PCG iterations over C_oo x = z_o - Z~_o with fresh unconditional fields."""
    spec = bccb.build_spectrum(emb, model, p)
    z, _ = unconditional_pair(spec, p, np.random.default_rng(seed))
    cfg = PcgConfig()
    pre = make_preconditioner(cfg, mask, emb, model, p, spec)
    A = c_oo_operator(spec, mask)
    stats = PcgStats()
    sampler = np.random.default_rng(seed + 1)
    for _ in range(n_draws // 2):
        for tilde in unconditional_pair(spec, p, sampler):
            stats.add(pcg_solve(A, pre, z[mask.observed] - tilde[mask.observed], cfg))
    assert stats.failures == 0
    return stats.mean_iterations


@pytest.mark.slow
@pytest.mark.parametrize("n", [32, 64, 128])
def test_complete_lattice_iterations_grow_at_most_like_sqrt_n(n):
    counts = {}
    for size in (32, n):
        emb, model, mask = _problem(size)
        counts[size] = _draw_system_iterations(emb, model, mask, STUDY_TRUTH)
    assert counts[n] <= 2.0 * (n / 32) * counts[32]
    assert counts[n] < 0.5 * n + 20


@pytest.mark.slow
def test_design_ordering_on_128():
    reference = {"complete": 13, "random": 46, "disk": 74}
    iters = {}
    for design in (DesignSpec("complete"), DesignSpec("random", 0.1), DesignSpec("disk", 0.1)):
        emb, model, mask = _problem(128, design, seed=5)
        spec = bccb.build_spectrum(emb, model, STUDY_TRUTH)
        z, _ = unconditional_pair(spec, STUDY_TRUTH, np.random.default_rng(2))
        chain = gibbs_run(z[mask.observed], mask, emb, model, Prior(POWEXP, ("lam", "shape")),
                          McmcConfig(iterations=12, burn_in=2, snapshots=0), PcgConfig(),
                          np.random.default_rng(3), init=STUDY_TRUTH)
        assert chain.pcg.solves == 12 and chain.pcg.failures == 0
        iters[design.kind] = chain.pcg.mean_iterations
    assert iters["complete"] < iters["random"] < iters["disk"]
    for kind, count in reference.items():
        assert count / 2 <= iters[kind] <= 2 * count, (kind, iters)
