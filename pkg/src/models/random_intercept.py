"""
Module defining a normal random-intercept model in non-centered form
"""
from typing import Dict, Optional

import numpy as np

from ..constants import random_intercept_priors
from ..model import Dataset, DesignSource, ModelSpec, PriorBlock, PriorSpec

class RandomInterceptModel(ModelSpec):
    """y_i ~ Normal(mu + between_sd * z_g[i], residual_sd), z_g ~ Normal(0, 1)

    The group label of each observation is the single covariate column. Parameters: mu, log_between_sd,
    log_residual_sd, z1..zG. Either sd can be fixed to a known value (between_sd may be 0, which removes the group
    intercepts and leaves an i.i.d. normal model).
    """
    n_covariates = 1

    def __init__(self, G: int, priors: Optional[Dict[str, tuple]] = None, fixed: Optional[Dict[str, float]] = None):
        if G < 1:
            raise ValueError('The random intercept model needs at least one group')
        priors = {**random_intercept_priors, **(priors or {})}
        fixed = dict(fixed or {})
        unknown = set(fixed) - {'between_sd', 'residual_sd'}
        if unknown:
            raise ValueError(f'Only between_sd and residual_sd can be fixed, got {sorted(unknown)}')
        if fixed.get('residual_sd', 1.0) <= 0 or fixed.get('between_sd', 0.0) < 0:
            raise ValueError('Fixed sds must be positive (between_sd may be 0)')
        self.G = G
        self.priors = priors
        self.fixed = fixed
        self.name = f'random_intercept_G{G}'

        names, blocks = ['mu'], [PriorBlock('grand_mean', *_family(priors['grand_mean']), (0, ))]
        if 'between_sd' not in fixed:
            blocks.append(PriorBlock('between_sd', *_family(priors['between_sd']), (len(names), ), transform='log'))
            names.append('log_between_sd')
        if 'residual_sd' not in fixed:
            blocks.append(PriorBlock('residual_sd', *_family(priors['residual_sd']), (len(names), ), transform='log'))
            names.append('log_residual_sd')
        if fixed.get('between_sd', None) != 0:
            z_idx = tuple(range(len(names), len(names) + G))
            blocks.append(PriorBlock('z', 'normal', (0.0, 1.0), z_idx))
            names += [f'z{g+1}' for g in range(G)]
        self.param_names = tuple(names)
        self.prior = PriorSpec(tuple(blocks), dim=len(names))

    def _index(self, name: str) -> Optional[int]:
        return self.param_names.index(name) if name in self.param_names else None

    def _unpack(self, theta: np.ndarray):
        i_tau, i_sigma, i_z = self._index('log_between_sd'), self._index('log_residual_sd'), self._index('z1')
        tau = np.exp(theta[i_tau]) if i_tau is not None else self.fixed['between_sd']
        sigma = np.exp(theta[i_sigma]) if i_sigma is not None else self.fixed['residual_sd']
        z = theta[i_z:i_z + self.G] if i_z is not None else np.zeros(self.G)
        return theta[0], tau, sigma, z

    def _groups(self, data: Dataset) -> np.ndarray:
        groups = data.X[:, 0].astype(int)
        if groups.min(initial=0) < 0 or groups.max(initial=0) >= self.G:
            raise ValueError(f'Group labels must lie in 0..{self.G-1}')
        return groups

    def log_likelihood_terms(self, theta, data):
        mu, tau, sigma, z = self._unpack(theta)
        resid = data.y - mu - tau * z[self._groups(data)]
        return -0.5 * (resid / sigma)**2 - np.log(sigma) - 0.5 * np.log(2 * np.pi)

    def log_likelihood_gradient(self, theta, data, weights):
        mu, tau, sigma, z = self._unpack(theta)
        groups = self._groups(data)
        resid = data.y - mu - tau * z[groups]
        d_mean = weights * resid / sigma**2
        grad = np.zeros(self.dim)
        grad[0] = np.sum(d_mean)
        per_group = np.bincount(groups, weights=d_mean, minlength=self.G)
        i_tau, i_sigma, i_z = self._index('log_between_sd'), self._index('log_residual_sd'), self._index('z1')
        if i_tau is not None:
            grad[i_tau] = tau * np.sum(per_group * z)
        if i_sigma is not None:
            grad[i_sigma] = np.sum(weights * ((resid / sigma)**2 - 1))
        if i_z is not None:
            grad[i_z:i_z + self.G] = tau * per_group
        return grad

    def simulate_outcomes(self, theta, X, n, rng):
        mu, tau, sigma, z = self._unpack(theta)
        groups = X[:, 0].astype(int)
        return mu + tau * z[groups] + sigma * rng.standard_normal(n)

    def design(self, X=None) -> DesignSource:
        return DesignSource('grouped', groups=self.G)

    @property
    def derived_quantities(self):
        quantities = {}
        if self._index('log_between_sd') is not None:
            quantities['between_sd'] = _ColumnExp(self._index('log_between_sd'))
        if self._index('log_residual_sd') is not None:
            quantities['residual_sd'] = _ColumnExp(self._index('log_residual_sd'))
        return quantities

class _ColumnExp:
    def __init__(self, col: int):
        self.col = col

    def __call__(self, draws: np.ndarray) -> np.ndarray:
        return np.exp(draws[:, self.col])

def _family(prior: tuple):
    return prior[0], tuple(prior[1:])

def make_random_intercept(
    G: int,
    priors: Optional[Dict[str, tuple]] = None,
    fixed: Optional[Dict[str, float]] = None
) -> RandomInterceptModel:
    return RandomInterceptModel(G, priors=priors, fixed=fixed)
