"""
Module defining the gamma regression model with a log link and its prior presets
"""
from typing import Callable, Dict, Optional, Tuple

from scipy.special import digamma, gammaln
import numpy as np

from ..constants import gamma_glm_prior_presets, gamma_glm_theta_c
from ..model import Dataset, ModelSpec, PriorBlock, PriorSpec

# log shape is clipped here so exp() stays finite
MAX_LOG_SHAPE = 700.0

class GammaGlmModel(ModelSpec):
    """y_i ~ Gamma(shape, shape / mu_i) with log(mu_i) = intercept + sum_k beta_k x_ik

    Parameters on the unconstrained scale: intercept, beta1..betaK, log_shape.
    """
    def __init__(self, K: int, preset: str = 'weakly-informative'):
        if K < 1:
            raise ValueError('The gamma regression model needs at least one predictor')
        if preset not in gamma_glm_prior_presets:
            raise ValueError(f'Prior preset {preset} not supported. Choose from {list(gamma_glm_prior_presets)}')
        self.K = K
        self.preset = preset
        self.name = f'gamma_glm_K{K}_{preset}'
        self.n_covariates = K
        self.param_names = ('intercept', ) + tuple(f'beta{k+1}' for k in range(K)) + ('log_shape', )

        spec = gamma_glm_prior_presets[preset]
        family = lambda key: spec[key][0]
        params = lambda key: tuple(spec[key][1:])
        self.prior = PriorSpec(
            blocks=(
                PriorBlock('intercept', family('intercept'), params('intercept'), (0, )),
                PriorBlock('coef', family('coef'), params('coef'), tuple(range(1, K+1))),
                PriorBlock('shape', family('shape'), params('shape'), (K+1, ), transform='log'),
            ),
            dim=K+2,
            hyperparameters={
                f'{key}_{i}': v for key, block in spec.items() for i, v in enumerate(block[1:])
            }
        )

    def _unpack(self, theta: np.ndarray, X: np.ndarray) -> Tuple[np.ndarray, float]:
        eta = theta[0] + X @ theta[1:self.K+1]
        shape = np.exp(min(theta[self.K+1], MAX_LOG_SHAPE))
        return eta, shape

    def log_likelihood_terms(self, theta: np.ndarray, data: Dataset) -> np.ndarray:
        eta, a = self._unpack(theta, data.X)
        y = data.y
        with np.errstate(divide='ignore', over='ignore', invalid='ignore'):
            return a * np.log(a) - a * eta - gammaln(a) + (a - 1) * np.log(y) - a * y * np.exp(-eta)

    def log_likelihood_gradient(self, theta: np.ndarray, data: Dataset, weights: np.ndarray) -> np.ndarray:
        eta, a = self._unpack(theta, data.X)
        y, X = data.y, data.X
        with np.errstate(divide='ignore', over='ignore', invalid='ignore'):
            scaled = y * np.exp(-eta)
            d_eta = weights * a * (scaled - 1)
            d_log_shape = weights * a * (np.log(a) + 1 - eta - digamma(a) + np.log(y) - scaled)
        grad = np.empty(self.dim)
        grad[0] = np.sum(d_eta)
        grad[1:self.K+1] = X.T @ d_eta
        grad[self.K+1] = np.sum(d_log_shape)
        return grad

    def simulate_outcomes(self, theta: np.ndarray, X: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        eta, a = self._unpack(theta, X)
        big = np.finfo(float).max
        scale = np.minimum(np.exp(eta) / a, big)
        return rng.gamma(a, scale, size=n)

    @property
    def derived_quantities(self) -> Dict[str, Callable[[np.ndarray], np.ndarray]]:
        return {'shape': _shape_of}

    def theta_c(self, values: Optional[Dict[str, float]] = None) -> np.ndarray:
        """Unconstrained parameter vector from intercept / coef / shape values"""
        values = {**gamma_glm_theta_c, **(values or {})}
        return np.concatenate([[values['intercept']], np.full(self.K, values['coef']), [np.log(values['shape'])]])

def _shape_of(draws: np.ndarray) -> np.ndarray:
    return np.exp(np.minimum(draws[:, -1], MAX_LOG_SHAPE))

def make_gamma_glm(K: int, preset: str = 'weakly-informative') -> GammaGlmModel:
    return GammaGlmModel(K, preset)

###############################################################################
# External simulators
###############################################################################
def lognormal_regression_simulator(
    psi: Dict[str, float],
    X: np.ndarray,
    n: int,
    rng: np.random.Generator
) -> np.ndarray:
    """Positive outcomes from a log-normal regression, a data-generating process other than the gamma model

    psi holds intercept, coef (shared by all predictors) and sd of the log outcome.
    """
    eta = psi.get('intercept', 1.0) + X @ np.full(X.shape[1], psi.get('coef', 0.1))
    return np.exp(eta + psi.get('sd', 1.0) * rng.standard_normal(n))

external_simulators = {
    'lognormal-regression': lognormal_regression_simulator,
}
