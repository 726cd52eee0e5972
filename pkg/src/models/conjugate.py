"""
Module defining conjugate models with closed-form posteriors
"""
import numpy as np
from scipy.special import expit, gammaln, log_expit

from ..inference.exact import conjugate_beta_posterior, weighted_normal_posterior
from ..model import Dataset, ModelSpec, ObservationWeights, PriorBlock, PriorSpec

class ConjugateNormalModel(ModelSpec):
    """y_i ~ Normal(mu, sigma) with sigma known and mu ~ Normal(mu0, sd0); sd0 = inf is the flat prior"""
    has_exact_posterior = True
    param_names = ('mu', )

    def __init__(self, mu0: float = 0.0, sd0: float = 1.0, sigma: float = 1.0):
        if sd0 <= 0 or sigma <= 0:
            raise ValueError('sd0 and sigma must be strictly positive')
        self.mu0, self.sd0, self.sigma = float(mu0), float(sd0), float(sigma)
        flat = np.isinf(sd0)
        self.name = 'conjugate_normal_flat' if flat else 'conjugate_normal'
        block = PriorBlock('mu', 'flat', (), (0, )) if flat else PriorBlock('mu', 'normal', (mu0, sd0), (0, ))
        self.prior = PriorSpec((block, ), dim=1, hyperparameters={'mu0': mu0, 'sd0': sd0, 'sigma': sigma})

    def log_likelihood_terms(self, theta: np.ndarray, data: Dataset) -> np.ndarray:
        z = (data.y - theta[0]) / self.sigma
        return -0.5 * z**2 - np.log(self.sigma) - 0.5 * np.log(2 * np.pi)

    def log_likelihood_gradient(self, theta: np.ndarray, data: Dataset, weights: np.ndarray) -> np.ndarray:
        return np.array([np.sum(weights * (data.y - theta[0])) / self.sigma**2])

    def simulate_outcomes(self, theta, X, n, rng):
        return theta[0] + self.sigma * rng.standard_normal(n)

    def posterior(self, data: Dataset, weights: ObservationWeights):
        return weighted_normal_posterior(self.mu0, self.sd0, self.sigma, data.y, weights.weights)

    def exact_posterior_draws(self, data, weights, S, rng):
        mean, sd = self.posterior(data, weights)
        return (mean + sd * rng.standard_normal(S)).reshape(-1, 1)

class BetaBinomialModel(ModelSpec):
    """y_i ~ Binomial(trials, p) with p ~ Beta(a1, a2); sampled as logit(p)"""
    has_exact_posterior = True
    param_names = ('logit_p', )

    def __init__(self, a1: float = 1.0, a2: float = 1.0, trials: int = 1):
        if a1 <= 0 or a2 <= 0:
            raise ValueError('Beta shapes must be strictly positive')
        if trials < 1:
            raise ValueError('trials must be at least 1')
        self.a1, self.a2, self.trials = float(a1), float(a2), int(trials)
        self.name = 'beta_binomial'
        self.prior = PriorSpec(
            (PriorBlock('p', 'beta', (a1, a2), (0, ), transform='logit'), ), dim=1,
            hyperparameters={'a1': a1, 'a2': a2}
        )

    def log_likelihood_terms(self, theta, data):
        y, n = data.y, self.trials
        log_choose = gammaln(n + 1) - gammaln(y + 1) - gammaln(n - y + 1)
        return log_choose + y * log_expit(theta[0]) + (n - y) * log_expit(-theta[0])

    def log_likelihood_gradient(self, theta, data, weights):
        return np.array([np.sum(weights * (data.y - self.trials * expit(theta[0])))])

    def simulate_outcomes(self, theta, X, n, rng):
        return rng.binomial(self.trials, expit(theta[0]), size=n).astype(float)

    @property
    def derived_quantities(self):
        return {'p': _p_of}

    def posterior(self, data: Dataset, weights: ObservationWeights):
        return conjugate_beta_posterior(self.a1, self.a2, self.trials, data.y, weights.weights)

    def exact_posterior_draws(self, data, weights, S, rng):
        a, b = self.posterior(data, weights)
        # logit of a beta draw as a difference of log gamma draws
        return (np.log(rng.gamma(a, size=S)) - np.log(rng.gamma(b, size=S))).reshape(-1, 1)

def _p_of(draws: np.ndarray) -> np.ndarray:
    return expit(draws[:, 0])

def make_conjugate_normal(mu0: float = 0.0, sd0: float = 1.0, sigma: float = 1.0) -> ConjugateNormalModel:
    return ConjugateNormalModel(mu0, sd0, sigma)

def make_beta_binomial(a1: float = 1.0, a2: float = 1.0, trials: int = 1) -> BetaBinomialModel:
    return BetaBinomialModel(a1, a2, trials)
