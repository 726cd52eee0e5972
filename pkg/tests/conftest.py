from pathlib import Path
import sys
ROOT_DIR = Path(__file__).parent.parent.as_posix()
sys.path.append(ROOT_DIR)

import numpy as np
import pytest

from src.inference import SamplerConfig
from src.model import Dataset, ModelSpec, PriorBlock, PriorSpec
from src.models import ConjugateNormalModel

def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: runs full NUTS simulation-based calibration (minutes)')

class BrokenModel(ModelSpec):
    """Normal location model whose likelihood and simulator return a configurable bad value"""
    name = 'broken'
    param_names = ('mu', )

    def __init__(self, bad_value=np.nan):
        self.bad_value = bad_value
        self.prior = PriorSpec((PriorBlock('mu', 'normal', (0.0, 1.0), (0, )), ), dim=1)

    def log_likelihood_terms(self, theta, data):
        return np.full(data.N, self.bad_value)

    def log_likelihood_gradient(self, theta, data, weights):
        return np.zeros(1)

    def simulate_outcomes(self, theta, X, n, rng):
        return np.full(n, self.bad_value)

def finite_difference(f, theta, h=1e-6):
    theta = np.asarray(theta, dtype=float)
    grad = np.empty_like(theta)
    for i in range(len(theta)):
        step = np.zeros_like(theta)
        step[i] = h
        grad[i] = (f(theta + step) - f(theta - step)) / (2 * h)
    return grad

@pytest.fixture
def rng():
    return np.random.default_rng(20240101)

@pytest.fixture
def exact_cfg():
    return SamplerConfig(backend='exact', chains=1, draws=400)

@pytest.fixture
def small_nuts_cfg():
    return SamplerConfig(chains=2, warmup=300, draws=500, ess_min=100)

@pytest.fixture
def normal_model():
    return ConjugateNormalModel(mu0=0.0, sd0=1.0, sigma=1.0)

@pytest.fixture
def shifted_data(rng):
    """200 observations centered far from the N(0, 1) prior mean"""
    return Dataset(3.0 + rng.standard_normal(200), id='shifted')
