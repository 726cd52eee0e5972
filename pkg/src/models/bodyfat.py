"""
Module to load (or synthesize) a bodyfat-like regression dataset with positive outcomes
"""
from typing import Dict, Optional

import numpy as np

from .. import logger
from ..model import Dataset, load_dataset
from ..util import report_flagged
from .gamma_glm import GammaGlmModel

# parameters of the synthetic fallback: outcomes around exp(3) ~ 20, moderately dispersed
synthetic_theta = {'intercept': 3.0, 'coef': 0.15, 'shape': 5.0}
synthetic_correlation = 0.5

def standardize(X: np.ndarray) -> np.ndarray:
    """Center each column and scale it to unit sample sd; constant columns are only centered"""
    sd = X.std(axis=0, ddof=1)
    sd[sd == 0] = 1.0
    return (X - X.mean(axis=0)) / sd

def load_bodyfat(path: str, K: Optional[int] = None, outcome_col: Optional[str] = None) -> Dataset:
    data = load_dataset(path, outcome_col=outcome_col)
    if data.X is None:
        raise ValueError(f'{path} has no covariate columns')
    X = data.X if K is None else data.X[:, :K]
    if X.shape[1] < (K or 0):
        raise ValueError(f'{path} has {X.shape[1]} covariates, {K} were requested')
    mask = data.y > 0
    report_flagged(~mask, 'rows', context=' with nonpositive outcomes (dropped).')
    return Dataset(data.y[mask], standardize(X[mask]), id=f'bodyfat:{path}')

def synthesize_bodyfat(
    rows: int = 250,
    K: int = 4,
    rng: Optional[np.random.Generator] = None,
    theta: Optional[Dict[str, float]] = None
) -> Dataset:
    """Equicorrelated standardized covariates and gamma outcomes from a known parameter vector"""
    if rng is None:
        rng = np.random.default_rng(0)
    cov = np.full((K, K), synthetic_correlation) + (1 - synthetic_correlation) * np.eye(K)
    X = standardize(rng.standard_normal((rows, K)) @ np.linalg.cholesky(cov).T)
    model = GammaGlmModel(K)
    # alternate signs so the predictors do not all push the mean the same way
    coef_signs = np.where(np.arange(K) % 2 == 0, 1.0, -1.0)
    values = {**synthetic_theta, **(theta or {})}
    theta_vec = model.theta_c(values)
    theta_vec[1:K+1] *= coef_signs
    y = model.simulate_outcomes(theta_vec, X, rows, rng)
    return Dataset(y, X, id=f'bodyfat:synthetic:{rows}x{K}')

def bodyfat_like_source(
    path: Optional[str] = None,
    rows: int = 250,
    K: int = 4,
    rng: Optional[np.random.Generator] = None
) -> Dataset:
    """Real bodyfat CSV if a path is given, otherwise the synthetic stand-in"""
    if path is not None:
        data = load_bodyfat(path, K=K)
        logger.info(f'Loaded {data.N} rows and {data.K} standardized covariates from {path}')
        return data
    return synthesize_bodyfat(rows=rows, K=K, rng=rng)
