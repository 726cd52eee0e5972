"""
Module to test rank uniformity: gamma-score, Monte-Carlo rejection thresholds, and ECDF differences with
simultaneous confidence bands
"""
from dataclasses import dataclass
from typing import Dict, Optional

from scipy.stats import binom, chisquare
import numpy as np
import pandas as pd

from . import logger
from .constants import stats_defaults

# simulations are evaluated in chunks of this many rank sets
SIM_CHUNK = 10000

@dataclass(frozen=True)
class FractionalRanks:
    u: np.ndarray
    ranks: np.ndarray
    S: int

    @property
    def J(self) -> int:
        return len(self.u)

@dataclass
class CalibrationResult:
    quantity: str
    gamma: float
    log_gamma: float
    threshold_log_gamma: float
    reject: bool
    z: np.ndarray
    ecdf_diff: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def to_dict(self) -> Dict:
        return {
            'quantity': self.quantity,
            'gamma': self.gamma,
            'log_gamma': self.log_gamma,
            'threshold_log_gamma': self.threshold_log_gamma,
            'reject': self.reject,
            'verdict': 'miscalibrated' if self.reject else 'calibrated',
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'quantity': self.quantity, 'z': self.z, 'ecdf_diff': self.ecdf_diff, 'lower': self.lower,
            'upper': self.upper
        })

    @property
    def escapes_band(self) -> bool:
        return bool(np.any((self.ecdf_diff < self.lower) | (self.ecdf_diff > self.upper)))

###############################################################################
# Fractional ranks
###############################################################################
def fractional_ranks(
    ranks: np.ndarray,
    S: int,
    rng: Optional[np.random.Generator] = None,
    v: Optional[np.ndarray] = None
) -> FractionalRanks:
    """Spread integer ranks in [0, S] uniformly over their (S+1)-th of the unit interval

    Args:
        v: jitter in (0, 1); drawn from rng when not given
    """
    ranks = np.asarray(ranks, dtype=int).ravel()
    if ranks.min(initial=0) < 0 or ranks.max(initial=0) > S:
        raise ValueError(f'Ranks must lie in [0, {S}]')
    if v is None:
        if rng is None:
            raise ValueError('Either jitter v or an rng is needed')
        v = rng.uniform(size=len(ranks))
    u = (ranks + np.asarray(v, dtype=float)) / (S + 1)
    return FractionalRanks(u, ranks, S)

###############################################################################
# Gamma score
###############################################################################
def _grid(J: int) -> np.ndarray:
    # z_1..z_J; z_{J+1} = 1 always contributes exactly 1 and is left out
    return np.arange(1, J + 1) / (J + 1)

def _below_counts(u: np.ndarray, J: int) -> np.ndarray:
    """R_i = #{u < z_i} for i = 1..J, row-wise for a batch of rank sets (n x J)"""
    u = np.atleast_2d(u)
    bins = np.clip(np.floor(u * (J + 1)).astype(int), 0, J)
    counts = np.zeros((u.shape[0], J + 1), dtype=int)
    rows = np.repeat(np.arange(u.shape[0]), u.shape[1])
    np.add.at(counts, (rows, bins.ravel()), 1)
    return np.cumsum(counts, axis=1)[:, :J]

class _GammaTable:
    """log binomial cdf / sf lookup over the z grid for a fixed number of ranks J"""
    def __init__(self, J: int):
        self.J = J
        z = _grid(J)[:, None]
        r = np.arange(J + 1)[None, :]
        self.log_cdf = binom.logcdf(r, J, z)
        self.log_sf = binom.logsf(r - 1, J, z)

    def log_gamma(self, R: np.ndarray) -> np.ndarray:
        R = np.atleast_2d(R)
        i = np.arange(self.J)[None, :]
        extreme = np.minimum(self.log_cdf[i, R], self.log_sf[i, R]).min(axis=1)
        return np.minimum(np.log(2) + extreme, 0.0)

def log_gamma_score(u: FractionalRanks) -> float:
    J = u.J
    if J < 1:
        raise ValueError('The gamma score needs at least one rank')
    return float(_GammaTable(J).log_gamma(_below_counts(u.u, J))[0])

def gamma_score(u: FractionalRanks) -> float:
    """Probability of the most extreme ECDF point under uniformity, in (0, 1]"""
    return float(np.exp(log_gamma_score(u)))

def simulate_log_gamma(J: int, n_sims: int, rng: np.random.Generator) -> np.ndarray:
    """log gamma of n_sims sets of J i.i.d. uniform fractional ranks"""
    table = _GammaTable(J)
    out = []
    for start in range(0, n_sims, SIM_CHUNK):
        n = min(SIM_CHUNK, n_sims - start)
        out.append(table.log_gamma(_below_counts(rng.uniform(size=(n, J)), J)))
    return np.concatenate(out)

def gamma_threshold(
    J: int,
    level: float = stats_defaults['level'],
    n_sims: int = stats_defaults['n_sims'],
    rng: Optional[np.random.Generator] = None
) -> float:
    """level-quantile of log gamma under uniformity; log gamma below it rejects"""
    if not 0 < level < 1:
        raise ValueError('level must lie in (0, 1)')
    if n_sims < 1000:
        raise ValueError('At least 1000 simulations are needed for a stable threshold')
    if rng is None:
        rng = np.random.default_rng()
    return float(np.quantile(simulate_log_gamma(J, n_sims, rng), level))

###############################################################################
# ECDF differences
###############################################################################
def ecdf_diff(u: FractionalRanks):
    """(z_i, ECDF(z_i) - z_i) on the grid z_i = i/(J+1)"""
    J = u.J
    return _grid(J), _below_counts(u.u, J)[0] / J - _grid(J)

def band_from_threshold(J: int, threshold_log_gamma: float):
    """Pointwise binomial envelope at the adjusted level given by the simulated gamma quantile"""
    z = _grid(J)
    half = np.exp(threshold_log_gamma) / 2
    lower = binom.ppf(half, J, z) / J - z
    upper = binom.ppf(1 - half, J, z) / J - z
    return z, lower, upper

def ecdf_diff_band(
    u: FractionalRanks,
    level: float = stats_defaults['level'],
    n_sims: int = stats_defaults['n_sims'],
    rng: Optional[np.random.Generator] = None
) -> CalibrationResult:
    threshold = gamma_threshold(u.J, level, n_sims, rng)
    return _result('', u, threshold)

def _result(quantity: str, u: FractionalRanks, threshold: float) -> CalibrationResult:
    log_gamma = log_gamma_score(u)
    z, diff = ecdf_diff(u)
    _, lower, upper = band_from_threshold(u.J, threshold)
    return CalibrationResult(
        quantity, float(np.exp(log_gamma)), log_gamma, threshold, bool(log_gamma < threshold), z, diff, lower, upper
    )

def calibrate(
    ranks: Dict[str, np.ndarray],
    S: int,
    level: float = stats_defaults['level'],
    n_sims: int = stats_defaults['n_sims'],
    rng: Optional[np.random.Generator] = None,
    threshold: Optional[float] = None
) -> Dict[str, CalibrationResult]:
    """Calibration results for several quantities with the same number of ranks

    A single simulation supplies the gamma threshold and the band, so both reject the same rank sets.
    """
    if rng is None:
        rng = np.random.default_rng()
    sizes = {len(np.ravel(r)) for r in ranks.values()}
    if len(sizes) != 1:
        raise ValueError('All quantities must have the same number of ranks')
    if threshold is None:
        threshold = gamma_threshold(sizes.pop(), level, n_sims, rng)
    results = {}
    for quantity, r in ranks.items():
        results[quantity] = _result(quantity, fractional_ranks(r, S, rng), threshold)
    n_reject = sum(res.reject for res in results.values())
    logger.debug(f'{n_reject} of {len(results)} quantities reject uniformity at level {level}')
    return results

###############################################################################
# Chi-square test
###############################################################################
def rank_chisq_test(ranks: np.ndarray, S: int, n_bins: int = 20) -> float:
    """p-value of a chi-square test of the rank histogram against the discrete uniform on 0..S"""
    ranks = np.asarray(ranks, dtype=int).ravel()
    n_bins = min(n_bins, S + 1)
    edges = np.linspace(0, S + 1, n_bins + 1)
    observed, _ = np.histogram(ranks, bins=edges)
    # number of integer rank values falling in each bin
    values_per_bin, _ = np.histogram(np.arange(S + 1), bins=edges)
    expected = len(ranks) * values_per_bin / (S + 1)
    return float(chisquare(observed, expected).pvalue)
