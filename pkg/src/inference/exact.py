"""
Module for closed-form conjugate posteriors, used as correctness oracles
"""
from typing import Optional, Tuple

import numpy as np

from ..model import Dataset, ImproperPriorError, ModelSpec, ObservationWeights
from .diagnostics import DrawMatrix

def weighted_normal_posterior(
    mu0: float,
    sd0: float,
    sigma: float,
    y: np.ndarray,
    w: np.ndarray
) -> Tuple[float, float]:
    """Normal prior, normal likelihood with known sigma and per-observation weights

    sd0 = inf gives the flat prior.
    """
    if sd0 <= 0 or sigma <= 0:
        raise ValueError('sd0 and sigma must be strictly positive')
    y, w = np.asarray(y, dtype=float), np.asarray(w, dtype=float)
    prior_precision = 0.0 if np.isinf(sd0) else 1 / sd0**2
    precision = prior_precision + np.sum(w) / sigma**2
    if precision == 0:
        raise ImproperPriorError('Flat prior without any weighted observation has no proper posterior')
    prior_term = 0.0 if np.isinf(sd0) else mu0 / sd0**2
    mean = (prior_term + np.sum(w * y) / sigma**2) / precision
    return float(mean), float(1 / np.sqrt(precision))

def conjugate_normal_posterior(
    mu0: float,
    sd0: float,
    sigma: float,
    data: Dataset,
    tau: float = 1.0
) -> Tuple[float, float]:
    """Posterior (mean, sd) of a normal mean when every observation carries the weight tau"""
    if tau <= 0:
        raise ValueError('tau must be strictly positive')
    return weighted_normal_posterior(mu0, sd0, sigma, data.y, np.full(data.N, tau))

def conjugate_beta_posterior(
    a1: float,
    a2: float,
    trials: int,
    y: np.ndarray,
    w: np.ndarray
) -> Tuple[float, float]:
    """Beta prior and binomial successes y out of trials each, weighted"""
    y, w = np.asarray(y, dtype=float), np.asarray(w, dtype=float)
    return float(a1 + np.sum(w * y)), float(a2 + np.sum(w * (trials - y)))

def exact_posterior_sampler(
    model: ModelSpec,
    data: Dataset,
    S: int,
    rng: np.random.Generator,
    weights: Optional[ObservationWeights] = None
) -> DrawMatrix:
    """Independent draws from the closed-form posterior of a conjugate model"""
    if not model.has_exact_posterior:
        raise ValueError(f'{model.name} has no closed-form posterior')
    if weights is None:
        weights = ObservationWeights.uniform(data.N)
    seed = int(rng.integers(2**63))
    draws = model.exact_posterior_draws(data, weights, S, np.random.default_rng(seed))
    return DrawMatrix(draws, np.zeros(S, dtype=int), seed=seed, names=model.param_names)
