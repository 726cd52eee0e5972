import numpy as np
import pytest

from conftest import BrokenModel
from src.inference import (
    DrawMatrix,
    InitializationError,
    SamplerConfig,
    conjugate_normal_posterior,
    diagnose,
    exact_posterior_sampler,
    fit_posterior,
    sample_posterior,
    thin_draws
)
from src.inference.diagnostics import bulk_ess, potential_scale_reduction, rank_normalized_rhat
from src.inference.exact import conjugate_beta_posterior, weighted_normal_posterior
from src.inference.nuts import _build_tree, _Hamiltonian, _Point
from src.model import Dataset, ImproperPriorError, ObservationWeights, simulate_dataset
from src.models import ConjugateNormalModel, GammaGlmModel

###############################################################################
# Diagnostics
###############################################################################
def test_rhat_of_identical_chains_without_split(rng):
    n = 100
    chain = rng.standard_normal(n)
    x = np.tile(chain, (2, 1))
    assert potential_scale_reduction(x, split=False) == pytest.approx(np.sqrt((n - 1) / n))

def test_rhat_of_constant_draws():
    assert potential_scale_reduction(np.ones((4, 50))) == 1.0
    assert rank_normalized_rhat(np.ones((4, 50))) == 1.0

def test_rhat_near_one_for_iid_chains(rng):
    assert rank_normalized_rhat(rng.standard_normal((4, 1000))) < 1.02

def test_rhat_flags_shifted_chains(rng):
    x = rng.standard_normal((4, 500)) + np.arange(4)[:, None]
    assert rank_normalized_rhat(x) > 1.1

def test_ess_of_iid_draws(rng):
    ess = bulk_ess(rng.standard_normal((4, 1000)))
    assert 3000 < ess <= 4000

def test_ess_of_autocorrelated_draws(rng):
    phi, m, n = 0.9, 4, 2000
    x = np.empty((m, n))
    x[:, 0] = rng.standard_normal(m) / np.sqrt(1 - phi**2)
    for i in range(1, n):
        x[:, i] = phi * x[:, i - 1] + rng.standard_normal(m)
    # AR(1) ESS is about m * n * (1 - phi) / (1 + phi) = 421
    assert 250 < bulk_ess(x) < 650

def test_diagnose_needs_two_chains(rng):
    dm = DrawMatrix(rng.standard_normal((100, 2)), np.zeros(100))
    with pytest.raises(ValueError):
        diagnose(dm)

def test_draw_matrix_validation():
    with pytest.raises(ValueError):
        DrawMatrix(np.zeros((3, 1)), [0, 0, 1])
    with pytest.raises(ValueError):
        DrawMatrix(np.array([[0.0], [np.inf]]), [0, 1])

def test_thin_draws():
    draws = np.arange(1000, dtype=float).reshape(-1, 1)
    thinned = thin_draws(draws, 250)
    assert thinned.shape == (250, 1)
    assert np.array_equal(thinned[:3, 0], [0, 4, 8])
    with pytest.raises(ValueError):
        thin_draws(draws, 1001)

###############################################################################
# Conjugate posteriors
###############################################################################
def test_power_scaled_normal_posterior(rng):
    # 100 observations at tau = 15/100 carry the information of 15
    data = Dataset(rng.standard_normal(100))
    mean, sd = conjugate_normal_posterior(0.0, 1.0, 1.0, data, tau=0.15)
    assert sd == pytest.approx(1 / np.sqrt(16))
    assert mean == pytest.approx(0.15 * data.y.sum() / 16)

def test_updating_on_preconditioning_data_then_new_data_is_one_update(rng):
    mu0, sd0, sigma = 0.3, 2.0, 1.5
    y_c = Dataset(1.0 + sigma * rng.standard_normal(12))
    y_new = Dataset(1.0 + sigma * rng.standard_normal(7))
    mean_c, sd_c = conjugate_normal_posterior(mu0, sd0, sigma, y_c)
    two_step = conjugate_normal_posterior(mean_c, sd_c, sigma, y_new)
    one_step = conjugate_normal_posterior(mu0, sd0, sigma, y_c.concat(y_new))
    assert two_step == pytest.approx(one_step, rel=1e-12, abs=1e-12)

@pytest.mark.parametrize('N,M', [(10, 1), (100, 15), (50, 50)])
def test_power_scaled_precision_is_exact(rng, N, M):
    sd0, sigma = 1.3, 0.7
    data = Dataset(rng.standard_normal(N))
    mean, sd = conjugate_normal_posterior(0.0, sd0, sigma, data, tau=M / N)
    assert 1 / sd**2 == pytest.approx(1 / sd0**2 + M / sigma**2, rel=1e-12)
    assert mean == pytest.approx((M / N) * data.y.sum() / sigma**2 * sd**2, rel=1e-12, abs=1e-12)
    if M == N:
        assert (mean, sd) == conjugate_normal_posterior(0.0, sd0, sigma, data)

def test_flat_normal_posterior_needs_data():
    with pytest.raises(ImproperPriorError):
        weighted_normal_posterior(0.0, np.inf, 1.0, np.empty(0), np.empty(0))
    mean, sd = weighted_normal_posterior(0.0, np.inf, 2.0, np.array([1.0, 3.0]), np.ones(2))
    assert (mean, sd) == pytest.approx((2.0, np.sqrt(2.0)))

def test_beta_posterior():
    a, b = conjugate_beta_posterior(1.0, 2.0, 10, np.array([3.0, 7.0]), np.array([1.0, 0.5]))
    assert (a, b) == pytest.approx((1 + 3 + 3.5, 2 + 7 + 1.5))

def test_power_scaled_posterior_converges_as_N_grows(rng):
    M = 15
    limit = M * 0.5 / (1 + M)
    for N in (100, 1000, 10000):
        data = Dataset(0.5 + rng.standard_normal(N))
        mean, sd = conjugate_normal_posterior(0.0, 1.0, 1.0, data, tau=M / N)
        assert sd == pytest.approx(1 / np.sqrt(1 + M))
        assert abs(mean - limit) < 5 * M / (1 + M) / np.sqrt(N)

def test_exact_sampler_moments(rng, normal_model, shifted_data):
    dm = exact_posterior_sampler(normal_model, shifted_data, 20000, rng)
    mean, sd = normal_model.posterior(shifted_data, ObservationWeights.uniform(shifted_data.N))
    assert dm.draws.mean() == pytest.approx(mean, abs=5 * sd / np.sqrt(20000))
    assert dm.draws.std() == pytest.approx(sd, rel=0.03)

###############################################################################
# NUTS
###############################################################################
def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(chains=1)
    with pytest.raises(ValueError):
        SamplerConfig.from_dict({'chainz': 4})
    assert SamplerConfig(backend='exact', chains=1).total_draws == 250
    assert SamplerConfig.from_dict({'draws': 10}).to_dict()['draws'] == 10

def test_nuts_matches_conjugate_posterior(rng, normal_model, small_nuts_cfg):
    data = Dataset([0.8, 1.4, 2.1, 0.3])
    w = ObservationWeights.uniform(4)
    dm, diagnostics = sample_posterior(normal_model, data, w, small_nuts_cfg, rng)
    mean, sd = normal_model.posterior(data, w)
    assert dm.S == 1000 and dm.warmup_discarded == 600
    assert diagnostics.converged
    assert dm.draws.mean() == pytest.approx(mean, abs=0.1)
    assert dm.draws.std() == pytest.approx(sd, rel=0.15)

def test_nuts_respects_weights(rng, normal_model, small_nuts_cfg):
    data = Dataset(np.full(10, 2.0))
    w = ObservationWeights.uniform(10, 0.3)
    dm, _ = sample_posterior(normal_model, data, w, small_nuts_cfg, rng)
    mean, sd = normal_model.posterior(data, w)
    assert sd == pytest.approx(0.5)
    assert dm.draws.mean() == pytest.approx(mean, abs=0.1)
    assert dm.draws.std() == pytest.approx(sd, rel=0.15)

def test_nuts_recovers_gamma_regression(rng, small_nuts_cfg):
    model = GammaGlmModel(1)
    theta = model.theta_c({'intercept': 1.0, 'coef': 0.5, 'shape': 4.0})
    data = simulate_dataset(model, theta, model.design(), 100, rng)
    dm, diagnostics = sample_posterior(model, data, ObservationWeights.uniform(100), small_nuts_cfg, rng)
    assert diagnostics.converged
    z = np.abs(dm.draws.mean(axis=0) - theta) / dm.draws.std(axis=0)
    assert np.all(z < 4)

def test_nuts_is_reproducible(normal_model):
    cfg = SamplerConfig(chains=2, warmup=50, draws=20)
    data = Dataset([1.0])
    w = ObservationWeights.uniform(1)
    first, _ = sample_posterior(normal_model, data, w, cfg, np.random.default_rng(3))
    second, _ = sample_posterior(normal_model, data, w, cfg, np.random.default_rng(3))
    assert np.array_equal(first.draws, second.draws)

def test_leapfrog_into_a_much_denser_region_is_accepted_without_overflow(rng):
    # the log density jumps by 1000 past 0.5, so one step lowers the energy by 1000
    def step_density(theta):
        return (1000.0 if theta[0] > 0.5 else 0.0), np.zeros(1)

    h = _Hamiltonian(step_density, np.ones(1))
    start = _Point(np.zeros(1), np.ones(1), 0.0, np.zeros(1))
    with np.errstate(over='raise'):
        subtree = _build_tree(h, start, 1, 0, 1.0, h.energy(start), rng)
    assert subtree.sum_accept == 1.0
    assert subtree.valid and not subtree.divergent

def test_nuts_initialization_failure(rng):
    cfg = SamplerConfig(chains=2, warmup=10, draws=10, max_init_retries=5)
    with pytest.raises(InitializationError):
        sample_posterior(BrokenModel(-np.inf), Dataset([1.0]), ObservationWeights.uniform(1), cfg, rng)

def test_fit_posterior_backends(rng, normal_model, shifted_data):
    w = ObservationWeights.uniform(shifted_data.N)
    draws, diagnostics = fit_posterior(normal_model, shifted_data, w, 100, SamplerConfig(backend='exact'), rng)
    assert draws.shape == (100, 1) and diagnostics.converged
    draws, diagnostics = fit_posterior(
        normal_model, shifted_data, w, 100, SamplerConfig(chains=2, warmup=100, draws=100, ess_min=10), rng
    )
    assert draws.shape == (100, 1)

def test_exact_backend_needs_conjugate_model(rng):
    with pytest.raises(ValueError):
        exact_posterior_sampler(GammaGlmModel(1), Dataset([1.0], [[0.0]]), 10, rng)
