import math

import numpy as np
import pytest

from latticegp.errors import NegativeEigenvalue, NotConverged
from latticegp.schemas import PcgConfig
from latticegp.utils import bccb
from latticegp.utils.covariance import ParamSet
from latticegp.utils.lattice import ObservationMask, build_embedding, build_lattice
from latticegp.utils.simulate import (
    FieldSampler,
    complete_field,
    conditional_draw,
    conditional_mean,
    unconditional_pair,
)
from latticegp.utils.solver import PcgStats, identity
from tests.oracles import dense_bccb, smooth_spectrum

TIGHT = PcgConfig(tolerance=1e-10)


@pytest.fixture
def tiny():
    """4x4 torus, six observed sites, and the dense covariance oracle."""
    emb = build_embedding(build_lattice(2, 2, 1.0), 1.0)
    spec, c = smooth_spectrum((4, 4))
    mask = ObservationMask.from_indices(emb, [0, 3, 5, 6, 10, 12])
    return emb, spec, dense_bccb(c, (4, 4)), mask


def _kriging(C, mask, z_o, mu):
    o, u = mask.observed, mask.unobserved
    W = C[np.ix_(u, o)] @ np.linalg.inv(C[np.ix_(o, o)])
    mean = mu + W @ (z_o - mu)
    cov = C[np.ix_(u, u)] - W @ C[np.ix_(o, u)]
    return mean, cov


def test_degenerate_variance_gives_constant_fields(tiny):
    _, spec, _, _ = tiny
    p = ParamSet(mu=3.0, sigma2=1e-14, lam=1.0, shape=1.0)
    a, b = unconditional_pair(spec, p, np.random.default_rng(0))
    np.testing.assert_allclose(a, 3.0, atol=1e-5)
    np.testing.assert_allclose(b, 3.0, atol=1e-5)


def test_pair_has_right_mean_and_no_cross_correlation(tiny):
    _, spec, C, _ = tiny
    p = ParamSet(mu=1.5, sigma2=2.0, lam=1.0, shape=1.0)
    rng = np.random.default_rng(5)
    pairs = [unconditional_pair(spec, p, rng) for _ in range(4000)]
    first = np.array([a for a, _ in pairs])
    second = np.array([b for _, b in pairs])
    se = np.sqrt(p.sigma2 * np.diag(C) / first.shape[0])
    assert np.all(np.abs(first.mean(axis=0) - p.mu) < 4.5 * se)
    assert np.all(np.abs(second.mean(axis=0) - p.mu) < 4.5 * se)
    cross = np.mean((first[:, 0] - p.mu) * (second[:, 0] - p.mu))
    assert abs(cross) < 4.5 * p.sigma2 * C[0, 0] / math.sqrt(first.shape[0])


def test_unconditional_rejects_negative_spectrum(tiny):
    _, spec, _, _ = tiny
    bad = bccb.EigenSpectrum(values=np.ones(spec.shape), shape=spec.shape, min_eig=-1.0)
    with pytest.raises(NegativeEigenvalue):
        unconditional_pair(bad, ParamSet(mu=0.0, sigma2=1.0, lam=1.0, shape=1.0), np.random.default_rng(0))


def test_sampler_banks_second_field(tiny):
    _, spec, _, _ = tiny
    p = ParamSet(mu=0.0, sigma2=1.0, lam=1.0, shape=1.0)
    a, b = unconditional_pair(spec, p, np.random.default_rng(9))
    sampler = FieldSampler(spec, p, np.random.default_rng(9))
    np.testing.assert_array_equal(sampler.draw(), a)
    np.testing.assert_array_equal(sampler.draw(), b)
    sampler.reset(spec, p)
    assert sampler._banked is None


def test_complete_mask_returns_empty_draw(full_mask, small_emb, small_model, exp_params):
    spec = bccb.build_spectrum(small_emb, small_model, exp_params)
    z = np.zeros(full_mask.n)
    draw = conditional_draw(z, full_mask, spec, exp_params, identity, TIGHT, rng=np.random.default_rng(0))
    assert draw.z_u.size == 0
    assert draw.solver_iters == 0
    np.testing.assert_array_equal(conditional_mean(z, full_mask, spec, exp_params, identity, TIGHT), z)


def test_conditioning_on_the_sampler_field_reproduces_it(tiny):
    _, spec, _, mask = tiny
    p = ParamSet(mu=0.5, sigma2=1.3, lam=1.0, shape=1.0)
    field, _ = unconditional_pair(spec, p, np.random.default_rng(21))
    draw = conditional_draw(field[mask.observed], mask, spec, p, identity, TIGHT, rng=np.random.default_rng(21))
    np.testing.assert_allclose(draw.z_u, field[mask.unobserved], atol=1e-12)
    assembled = complete_field(mask, field[mask.observed], draw.z_u)
    np.testing.assert_allclose(assembled, field, atol=1e-12)


def test_draw_is_deterministic_for_a_seed(tiny):
    _, spec, _, mask = tiny
    p = ParamSet(mu=0.0, sigma2=1.0, lam=1.0, shape=1.0)
    z_o = np.linspace(-1, 1, mask.n)
    one = conditional_draw(z_o, mask, spec, p, identity, TIGHT, rng=np.random.default_rng(4))
    two = conditional_draw(z_o, mask, spec, p, identity, TIGHT, rng=np.random.default_rng(4))
    np.testing.assert_array_equal(one.z_u, two.z_u)


def test_conditional_mean_matches_dense_kriging(tiny):
    _, spec, C, mask = tiny
    p = ParamSet(mu=0.7, sigma2=2.5, lam=1.0, shape=1.0)
    z_o = np.array([1.0, -0.4, 2.2, 0.3, 0.0, 1.1])
    stats = PcgStats()
    mean = conditional_mean(z_o, mask, spec, p, identity, PcgConfig(tolerance=1e-8), stats=stats)
    expected, _ = _kriging(C, mask, z_o, p.mu)
    np.testing.assert_allclose(mean[mask.unobserved], expected, atol=1e-6)
    np.testing.assert_array_equal(mean[mask.observed], z_o)
    assert stats.solves == 1


def test_prior_mean_is_a_fixed_point(tiny):
    _, spec, _, mask = tiny
    p = ParamSet(mu=-2.0, sigma2=1.0, lam=1.0, shape=1.0)
    mean = conditional_mean(np.full(mask.n, -2.0), mask, spec, p, identity, TIGHT)
    np.testing.assert_allclose(mean, -2.0, atol=1e-10)


def test_draws_follow_the_dense_conditional_law(tiny):
    _, spec, C, mask = tiny
    p = ParamSet(mu=0.3, sigma2=1.7, lam=1.0, shape=1.0)
    z_o = np.array([0.9, -1.2, 0.4, 1.5, -0.2, 0.0])
    mean, cov = _kriging(p.sigma2 * C, mask, z_o, p.mu)
    sampler = FieldSampler(spec, p, np.random.default_rng(77))
    M = 5000
    draws = np.array([
        conditional_draw(z_o, mask, spec, p, identity, TIGHT, sampler=sampler).z_u for _ in range(M)
    ])
    se_mean = np.sqrt(np.diag(cov) / M)
    assert np.all(np.abs(draws.mean(axis=0) - mean) < 4.5 * se_mean)
    emp = np.cov(draws, rowvar=False)
    se_cov = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov**2) / M)
    assert np.all(np.abs(emp - cov) < 5 * se_cov)


def test_unconverged_solve_raises_with_iterate(tiny):
    _, spec, _, mask = tiny
    p = ParamSet(mu=0.0, sigma2=1.0, lam=1.0, shape=1.0)
    z_o = np.array([3.0, -2.0, 1.0, 0.5, -1.0, 2.0])
    cfg = PcgConfig(tolerance=1e-12, max_iters=1)
    with pytest.raises(NotConverged) as info:
        conditional_draw(z_o, mask, spec, p, identity, cfg, rng=np.random.default_rng(1), draw_index=7)
    assert info.value.result.iters == 1
    assert info.value.draw_index == 7
    relaxed = conditional_draw(z_o, mask, spec, p, identity, cfg, rng=np.random.default_rng(1),
                               allow_unconverged=True)
    assert not relaxed.converged
    assert np.all(np.isfinite(relaxed.z_u))


def test_draw_needs_a_random_source(tiny):
    _, spec, _, mask = tiny
    p = ParamSet(mu=0.0, sigma2=1.0, lam=1.0, shape=1.0)
    with pytest.raises(ValueError):
        conditional_draw(np.zeros(mask.n), mask, spec, p, identity, TIGHT)
