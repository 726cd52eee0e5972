import numpy as np
import pandas as pd
import pytest
from scipy.stats import binom, gamma, norm

from conftest import finite_difference
from src.model import Dataset, ImproperPriorError, ObservationWeights, simulate_dataset
from src.models import (
    BetaBinomialModel,
    ConjugateNormalModel,
    GammaGlmModel,
    RandomInterceptModel,
    external_simulators
)
from src.models.bodyfat import load_bodyfat, synthesize_bodyfat

def _check_gradient(model, theta, data, weights):
    grad = model.log_likelihood_gradient(theta, data, weights)
    numeric = finite_difference(lambda x: np.sum(weights * model.log_likelihood_terms(x, data)), theta)
    np.testing.assert_allclose(grad, numeric, rtol=1e-5, atol=1e-6)

###############################################################################
# Gamma regression
###############################################################################
def test_gamma_glm_parameters():
    model = GammaGlmModel(4, 'vague')
    assert model.param_names == ('intercept', 'beta1', 'beta2', 'beta3', 'beta4', 'log_shape')
    assert model.dim == 6 and model.prior.proper
    assert not GammaGlmModel(4, 'flat').prior.proper
    with pytest.raises(ValueError):
        GammaGlmModel(4, 'informative')

def test_gamma_glm_likelihood_matches_scipy(rng):
    model = GammaGlmModel(2)
    theta = np.array([0.5, 0.2, -0.3, np.log(3.0)])
    X = rng.standard_normal((20, 2))
    y = rng.gamma(2.0, size=20)
    mu = np.exp(0.5 + X @ theta[1:3])
    expected = gamma.logpdf(y, 3.0, scale=mu / 3.0)
    np.testing.assert_allclose(model.log_likelihood_terms(theta, Dataset(y, X)), expected, rtol=1e-10)

def test_gamma_glm_gradient(rng):
    model = GammaGlmModel(3)
    theta = np.array([1.0, 0.1, -0.2, 0.3, np.log(2.0)])
    data = simulate_dataset(model, theta, model.design(), 30, rng)
    _check_gradient(model, theta + 0.05, data, rng.uniform(0.2, 1.5, size=30))

def test_gamma_glm_simulated_mean(rng):
    model = GammaGlmModel(1)
    theta = model.theta_c({'intercept': 1.0, 'coef': 0.0, 'shape': 2.0})
    data = simulate_dataset(model, theta, model.design(), 20000, rng)
    assert np.all(data.y > 0)
    assert data.y.mean() == pytest.approx(np.e, rel=0.03)

def test_vague_prior_simulates_underflowing_outcomes(rng):
    model = GammaGlmModel(4, 'vague')
    design = model.design()
    thetas = model.sample_prior(rng, 100)
    smallest = [simulate_dataset(model, theta, design, 50, rng).y.min() for theta in thetas]
    assert np.min(smallest) < 1e-16

def test_flat_preset_cannot_be_sampled(rng):
    with pytest.raises(ImproperPriorError):
        GammaGlmModel(2, 'flat').sample_prior(rng, 1)

def test_gamma_glm_derived_shape():
    model = GammaGlmModel(1)
    draws = np.array([[0.0, 0.0, np.log(2.0)], [0.0, 0.0, 0.0]])
    np.testing.assert_allclose(model.quantity_values(draws, ['shape', 'intercept'])[:, 0], [2.0, 1.0])
    with pytest.raises(ValueError):
        model.quantity_values(draws, ['sigma'])

def test_lognormal_simulator(rng):
    X = rng.standard_normal((50, 3))
    y = external_simulators['lognormal-regression']({'intercept': 0.0, 'coef': 0.2, 'sd': 0.5}, X, 50, rng)
    assert y.shape == (50, ) and np.all(y > 0)

###############################################################################
# Conjugate models
###############################################################################
def test_conjugate_normal(rng):
    model = ConjugateNormalModel(1.0, 2.0, 0.5)
    data = Dataset(rng.standard_normal(10))
    np.testing.assert_allclose(model.log_likelihood_terms(np.array([0.3]), data), norm.logpdf(data.y, 0.3, 0.5))
    _check_gradient(model, np.array([0.3]), data, rng.uniform(size=10))
    assert ConjugateNormalModel(0.0, np.inf).name == 'conjugate_normal_flat'
    assert not ConjugateNormalModel(0.0, np.inf).prior.proper

def test_beta_binomial(rng):
    model = BetaBinomialModel(2.0, 3.0, trials=8)
    data = Dataset(rng.binomial(8, 0.3, size=15).astype(float))
    p = 0.4
    theta = np.array([np.log(p / (1 - p))])
    np.testing.assert_allclose(model.log_likelihood_terms(theta, data), binom.logpmf(data.y, 8, p), rtol=1e-10)
    _check_gradient(model, theta, data, rng.uniform(size=15))

def test_beta_binomial_exact_draws(rng):
    model = BetaBinomialModel(2.0, 3.0, trials=8)
    data = Dataset([2.0, 5.0, 3.0])
    draws = model.exact_posterior_draws(data, ObservationWeights.uniform(3), 40000, rng)
    a, b = 2 + 10, 3 + 14
    assert model.quantity_values(draws, ['p']).mean() == pytest.approx(a / (a + b), abs=0.005)

###############################################################################
# Random intercept
###############################################################################
def test_random_intercept_parameters():
    model = RandomInterceptModel(3)
    assert model.param_names == ('mu', 'log_between_sd', 'log_residual_sd', 'z1', 'z2', 'z3')
    pooled = RandomInterceptModel(3, fixed={'between_sd': 0.0})
    assert pooled.param_names == ('mu', 'log_residual_sd')
    known = RandomInterceptModel(2, fixed={'residual_sd': 1.0})
    assert 'log_residual_sd' not in known.param_names
    with pytest.raises(ValueError):
        RandomInterceptModel(2, fixed={'mu': 1.0})

def test_random_intercept_gradient(rng):
    for model in (RandomInterceptModel(4), RandomInterceptModel(4, fixed={'between_sd': 0.0})):
        theta = 0.4 * rng.standard_normal(model.dim)
        data = simulate_dataset(model, theta, model.design(), 16, rng)
        _check_gradient(model, theta, data, rng.uniform(0.5, 1.5, size=16))

def test_random_intercept_group_labels(rng):
    model = RandomInterceptModel(2)
    with pytest.raises(ValueError):
        model.log_likelihood_terms(np.zeros(model.dim), Dataset([1.0], [[5.0]]))
    draws = np.zeros((2, model.dim))
    draws[:, 1] = [0.0, np.log(2.0)]
    np.testing.assert_allclose(model.quantity_values(draws, ['between_sd'])[:, 0], [1.0, 2.0])

###############################################################################
# Bodyfat data
###############################################################################
def test_synthetic_bodyfat(rng):
    data = synthesize_bodyfat(rows=250, K=4, rng=rng)
    assert (data.N, data.K) == (250, 4)
    assert np.all(data.y > 0)
    np.testing.assert_allclose(data.X.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(data.X.std(axis=0, ddof=1), 1)

def test_load_bodyfat_drops_nonpositive_outcomes(tmp_path):
    df = pd.DataFrame({'siri': [12.0, 0.0, 20.0, 31.0], 'age': [30, 40, 50, 60], 'weight': [150, 170, 160, 200],
                       'height': [70, 68, 72, 69]})
    df.to_csv(tmp_path / 'bodyfat.csv', index=False)
    data = load_bodyfat(str(tmp_path / 'bodyfat.csv'), K=2)
    assert (data.N, data.K) == (3, 2)
    with pytest.raises(ValueError):
        load_bodyfat(str(tmp_path / 'bodyfat.csv'), K=5)
