"""
Module to dispatch a posterior fit to a backend and reduce it to S ranking draws
"""
from typing import Callable, Tuple

import numpy as np

from .. import logger
from ..model import Dataset, ModelSpec, ObservationWeights
from .diagnostics import FitDiagnostics, exact_diagnostics
from .exact import exact_posterior_sampler
from .nuts import SamplerConfig, sample_posterior

# fit_fn(model, data, weights, S, cfg, rng) -> (S x dim draws, diagnostics)
FitFunction = Callable[
    [ModelSpec, Dataset, ObservationWeights, int, SamplerConfig, np.random.Generator],
    Tuple[np.ndarray, FitDiagnostics]
]

def thin_draws(draws: np.ndarray, S: int) -> np.ndarray:
    """Keep S evenly spaced rows"""
    total = draws.shape[0]
    if S > total:
        raise ValueError(f'Cannot thin {total} draws to {S}; raise chains x draws per chain')
    idx = (np.arange(S) * total) // S
    return draws[idx]

def fit_posterior(
    model: ModelSpec,
    data: Dataset,
    weights: ObservationWeights,
    S: int,
    cfg: SamplerConfig,
    rng: np.random.Generator
) -> Tuple[np.ndarray, FitDiagnostics]:
    """Fit the weighted posterior with the configured backend

    MCMC fits are thinned to S draws and flagged low_ess when the bulk ESS falls below S/2, since ranks need
    approximately independent draws.
    """
    if cfg.backend == 'exact':
        dm = exact_posterior_sampler(model, data, S, rng, weights=weights)
        return dm.draws, exact_diagnostics(S, model.dim)

    dm, diagnostics = sample_posterior(model, data, weights, cfg, rng)
    draws = thin_draws(dm.draws, S)
    if np.min(diagnostics.ess) < S / 2:
        logger.debug(f'Bulk ESS {np.min(diagnostics.ess):.0f} is below half of the {S} ranking draws')
        diagnostics = diagnostics.with_flag('low_ess')
    return draws, diagnostics
