import math

import numpy as np
import pytest

from latticegp.errors import InitializationError
from latticegp.schemas import McmcConfig, PcgConfig
from latticegp.utils import bccb
from latticegp.utils.covariance import MATERN, POWEXP, ParamSet, ThetaSpace, model_for_embedding
from latticegp.utils.lattice import DesignSpec, build_embedding, build_lattice, make_mask
from latticegp.utils.likelihood import Prior, theta_log_kernel
from latticegp.utils.mcmc import (
    CHAIN_COLUMNS,
    BlockState,
    RunningMoments,
    adapt_proposal,
    geweke_z,
    gibbs_run,
    lag_one_correlation,
    method_of_moments,
    param_block_update,
)
from latticegp.utils.simulate import unconditional_pair


@pytest.fixture
def field(small_emb, small_model, exp_params):
    spec = bccb.build_spectrum(small_emb, small_model, exp_params)
    z, _ = unconditional_pair(spec, exp_params, np.random.default_rng(42))
    return spec, z


def test_lag_one_correlation_skips_missing():
    grid = np.array([[1.0, 2.0, np.nan], [2.0, 3.0, 4.0]])
    rho, pairs = lag_one_correlation(grid)
    assert pairs == 5
    assert rho == pytest.approx(np.corrcoef([1, 2, 3, 1, 2], [2, 3, 4, 2, 3])[0, 1])
    assert math.isnan(lag_one_correlation(np.array([[1.0, np.nan]]))[0])


def test_method_of_moments_starting_values(random_mask, field):
    _, z = field
    z_o = z[random_mask.observed]
    p0 = method_of_moments(z_o, random_mask, POWEXP)
    assert p0.mu == pytest.approx(z_o.mean())
    assert p0.sigma2 == pytest.approx(np.var(z_o, ddof=1))
    assert p0.shape == 1.0
    rho, _ = lag_one_correlation(random_mask.to_base_grid(z_o))
    assert p0.lam == pytest.approx(-random_mask.emb.delta / math.log(min(max(rho, 1e-3), 0.999)))
    assert method_of_moments(z_o, random_mask, MATERN).shape == 0.5
    noisy = method_of_moments(z_o, random_mask, POWEXP, c=0.25)
    assert noisy.sigma2 == pytest.approx(p0.sigma2 / 1.25)


def test_method_of_moments_rejects_degenerate_data(random_mask):
    with pytest.raises(InitializationError):
        method_of_moments(np.ones(2), random_mask, POWEXP)
    with pytest.raises(InitializationError, match="zero variance"):
        method_of_moments(np.full(random_mask.n, 4.0), random_mask, POWEXP)


def test_running_moments_match_numpy(rng):
    xs = rng.standard_normal((40, 5))
    m = RunningMoments(5)
    for x in xs:
        m.update(x)
    np.testing.assert_allclose(m.mean, xs.mean(axis=0))
    np.testing.assert_allclose(m.variance, xs.var(axis=0, ddof=1))


def test_geweke_flags_drift(rng):
    stationary = rng.standard_normal(4000)
    assert abs(geweke_z(stationary)) < 4
    drifting = np.linspace(0.0, 5.0, 4000) + 0.1 * rng.standard_normal(4000)
    assert abs(geweke_z(drifting)) > 10
    assert math.isnan(geweke_z(np.ones(10)))


def test_geweke_is_undefined_for_a_fixed_trace():
    assert math.isnan(geweke_z(np.full(4000, 0.01)))
    assert math.isnan(geweke_z(np.empty(0)))


def test_adapt_proposal_direction():
    cov = np.eye(2) * 0.01
    np.testing.assert_allclose(adapt_proposal(np.full(50, 0.35), cov), cov)
    assert adapt_proposal(np.ones(50), cov)[0, 0] > cov[0, 0]
    assert adapt_proposal(np.zeros(50), cov)[0, 0] < cov[0, 0]
    late = adapt_proposal(np.zeros(50), cov, step=100)
    assert adapt_proposal(np.zeros(50), cov)[0, 0] < late[0, 0] < cov[0, 0]


def test_block_update_keeps_a_consistent_state(small_emb, small_model, exp_params, field):
    spec, z = field
    prior = Prior(POWEXP, ("lam", "shape"))
    space = ThetaSpace(POWEXP, free=("lam", "shape"))
    state = BlockState(exp_params, spec, theta_log_kernel(exp_params, z, small_emb, small_model, prior, spec=spec))
    rng = np.random.default_rng(6)
    accepted = 0
    for _ in range(60):
        new, ok = param_block_update(z, state, space, np.eye(2) * 0.01, small_emb, small_model, prior, rng)
        if ok:
            accepted += 1
            assert new.log_kernel == pytest.approx(
                theta_log_kernel(new.p, z, small_emb, small_model, prior), rel=1e-10
            )
            assert new.p.sigma2 > 0
        else:
            assert new is state
        state = new
    assert 0 < accepted < 60


def test_gibbs_on_a_fully_observed_torus(full_mask, small_emb, small_model, exp_params, field):
    _, z = field
    cfg = McmcConfig(iterations=40, burn_in=10, snapshots=2)
    chain = gibbs_run(z, full_mask, small_emb, small_model, Prior(POWEXP, ("lam", "shape")), cfg, PcgConfig(),
                      np.random.default_rng(3), init=exp_params)
    assert chain.records.shape == (40, len(CHAIN_COLUMNS))
    assert np.all(chain.pcg_iters == 0)
    assert chain.pcg.solves == 0
    assert chain.draws.shape == (30, 5)
    np.testing.assert_allclose(chain.field_mean, z)
    np.testing.assert_allclose(chain.field_var, 0.0, atol=1e-20)
    assert len(chain.snapshots) == 2
    assert set(chain.summary()) == {"mu", "sigma2", "lambda", "shape", "c"}


def test_gibbs_imputes_missing_sites(random_mask, small_emb, small_model, exp_params, field):
    _, z = field
    z_o = z[random_mask.observed]
    cfg = McmcConfig(iterations=25, burn_in=5, snapshots=1)
    prior = Prior(POWEXP, ("lam", "shape"))

    def run():
        return gibbs_run(z_o, random_mask, small_emb, small_model, prior, cfg, PcgConfig(),
                         np.random.default_rng(12), init=exp_params)

    chain = run()
    assert np.all(chain.pcg_iters > 0)
    assert chain.pcg.failures == 0
    np.testing.assert_allclose(chain.field_mean[random_mask.observed], z_o)
    np.testing.assert_allclose(chain.field_var[random_mask.observed], 0.0, atol=1e-20)
    assert np.all(chain.field_var[random_mask.unobserved] > 0)
    assert 0.0 <= chain.accept_rate <= 1.0
    np.testing.assert_array_equal(run().records, chain.records)


def test_gibbs_rejects_invalid_start(random_mask, small_emb, small_model, field):
    _, z = field
    bad = ParamSet(mu=0.0, sigma2=1.0, lam=0.141, shape=3.0)
    with pytest.raises(InitializationError):
        gibbs_run(z[random_mask.observed], random_mask, small_emb, small_model, Prior(), McmcConfig(
            iterations=2, burn_in=0), PcgConfig(), np.random.default_rng(0), init=bad)


@pytest.mark.slow
def test_long_chain_brackets_the_truth():
    emb = build_embedding(build_lattice(32, 32, 1 / math.sqrt(2)), 1.5)
    model = model_for_embedding(POWEXP, emb)
    truth = ParamSet(mu=10.0, sigma2=4.0, lam=0.1, shape=1.0, c=0.01)
    spec = bccb.build_spectrum(emb, model, truth)
    z, _ = unconditional_pair(spec, truth, np.random.default_rng(5))
    mask = make_mask(emb, DesignSpec("complete"), np.random.default_rng(5))
    z_o = z[mask.observed]
    init = method_of_moments(z_o, mask, POWEXP, c=truth.c)
    cfg = McmcConfig(iterations=3000, burn_in=1000)
    chain = gibbs_run(z_o, mask, emb, model, Prior(POWEXP, ("lam", "shape")), cfg, PcgConfig(),
                      np.random.default_rng(5), init=init)
    summary = chain.summary(level=0.95)
    for name, value in (("mu", 10.0), ("sigma2", 4.0), ("lambda", 0.1), ("shape", 1.0)):
        assert summary[name]["lower"] < value < summary[name]["upper"], name
    assert 0.25 <= chain.accept_rate <= 0.45
    for name in ("lambda", "shape"):
        assert abs(summary[name]["geweke_z"]) < 3, name
    assert np.all(chain.draws[:, 4] == truth.c)
    assert math.isnan(summary["c"]["geweke_z"])
