"""
Module to compute convergence diagnostics (rank-normalized split R-hat and bulk ESS) of MCMC draws
"""
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

from scipy.fft import irfft, next_fast_len, rfft
from scipy.stats import norm, rankdata
import numpy as np

from .. import logger
from ..constants import sampler_defaults

@dataclass(frozen=True)
class DrawMatrix:
    """Post-warmup draws stacked chain after chain

    Attributes:
        draws: S x dim matrix on the unconstrained scale
        chains: chain index of each draw
        divergent: optional per-draw divergence flag
    """
    draws: np.ndarray
    chains: np.ndarray
    warmup_discarded: int = 0
    seed: int = 0
    divergent: Optional[np.ndarray] = None
    names: Tuple[str, ...] = ()

    def __post_init__(self):
        draws = np.atleast_2d(np.asarray(self.draws, dtype=float))
        chains = np.asarray(self.chains, dtype=int).ravel()
        object.__setattr__(self, 'draws', draws)
        object.__setattr__(self, 'chains', chains)
        if draws.shape[0] < 1:
            raise ValueError('A draw matrix needs at least one draw')
        if len(chains) != draws.shape[0]:
            raise ValueError('Every draw needs a chain index')
        counts = np.bincount(chains)
        if len(set(counts[counts > 0])) != 1:
            raise ValueError('Every chain must hold the same number of draws')
        if not np.all(np.isfinite(draws)):
            raise ValueError('Draws must be finite')

    @property
    def S(self) -> int:
        return self.draws.shape[0]

    @property
    def dim(self) -> int:
        return self.draws.shape[1]

    @property
    def n_chains(self) -> int:
        return len(np.unique(self.chains))

    @property
    def divergence_count(self) -> int:
        return 0 if self.divergent is None else int(np.sum(self.divergent))

    def by_chain(self) -> np.ndarray:
        """Draws reshaped to chains x draws-per-chain x dim"""
        order = np.argsort(self.chains, kind='stable')
        return self.draws[order].reshape(self.n_chains, -1, self.dim)

@dataclass(frozen=True)
class FitDiagnostics:
    rhat: np.ndarray
    ess: np.ndarray
    divergence_count: int
    converged: bool
    flags: Tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            'rhat': [float(x) for x in self.rhat],
            'ess': [float(x) for x in self.ess],
            'divergence_count': int(self.divergence_count),
            'converged': bool(self.converged),
            'flags': list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> 'FitDiagnostics':
        return cls(
            np.array(d['rhat'], dtype=float), np.array(d['ess'], dtype=float), int(d['divergence_count']),
            bool(d['converged']), tuple(d.get('flags', ()))
        )

    def with_flag(self, flag: str) -> 'FitDiagnostics':
        return FitDiagnostics(self.rhat, self.ess, self.divergence_count, self.converged, self.flags + (flag, ))

###############################################################################
# Helpers
###############################################################################
def split_chains(x: np.ndarray) -> np.ndarray:
    """Split each chain in half (dropping the middle draw of odd-length chains), doubling the number of chains"""
    n = x.shape[1]
    half = n // 2
    return np.concatenate([x[:, :half], x[:, n - half:]], axis=0)

def rank_normalize(x: np.ndarray) -> np.ndarray:
    """Normal scores of the pooled ranks, keeping the chains x draws shape"""
    ranks = rankdata(x, method='average').reshape(x.shape)
    return norm.ppf((ranks - 0.375) / (x.size + 0.25))

def autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance along the last axis, computed by FFT"""
    n = x.shape[-1]
    m = next_fast_len(2 * n)
    centered = x - x.mean(axis=-1, keepdims=True)
    f = rfft(centered, n=m, axis=-1)
    return irfft(f * np.conjugate(f), n=m, axis=-1)[..., :n] / n

###############################################################################
# R-hat
###############################################################################
def potential_scale_reduction(x: np.ndarray, split: bool = True) -> float:
    """Classic potential scale reduction factor of a chains x draws array

    A constant array gives 1.
    """
    x = np.asarray(x, dtype=float)
    if split:
        x = split_chains(x)
    m, n = x.shape
    chain_means = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean()
    if W == 0:
        return 1.0 if np.ptp(chain_means) == 0 else np.inf
    B = n * chain_means.var(ddof=1)
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))

def rank_normalized_rhat(x: np.ndarray, split: bool = True) -> float:
    """Maximum of the bulk R-hat and the folded (tail) R-hat"""
    x = np.asarray(x, dtype=float)
    if np.ptp(x) == 0:
        return 1.0
    bulk = potential_scale_reduction(rank_normalize(x), split=split)
    folded = np.abs(x - np.median(x))
    tail = potential_scale_reduction(rank_normalize(folded), split=split) if np.ptp(folded) else 1.0
    return max(bulk, tail)

###############################################################################
# ESS
###############################################################################
def effective_sample_size(x: np.ndarray) -> float:
    """ESS of a chains x draws array with Geyer's initial monotone sequence estimator"""
    x = np.asarray(x, dtype=float)
    m, n = x.shape
    total = m * n
    if np.ptp(x) == 0:
        return float(total)

    acov = autocovariance(x)
    chain_mean = x.mean(axis=1)
    mean_var = np.mean(acov[:, 0]) * n / (n - 1)
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus += np.var(chain_mean, ddof=1)

    rho = np.zeros(n)
    rho[0] = 1.0
    rho_even = 1.0
    rho_odd = 1.0 - (mean_var - np.mean(acov[:, 1])) / var_plus
    rho[1] = rho_odd

    # positive sequence: sum pairs of autocorrelations until a pair turns negative
    t = 1
    while t < n - 3 and rho_even + rho_odd > 0:
        rho_even = 1.0 - (mean_var - np.mean(acov[:, t + 1])) / var_plus
        rho_odd = 1.0 - (mean_var - np.mean(acov[:, t + 2])) / var_plus
        if rho_even + rho_odd >= 0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2
    max_t = t - 2
    if rho_even > 0:
        rho[max_t + 1] = rho_even

    # monotone sequence: pair sums must not increase
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2
            rho[t + 2] = rho[t + 1]
        t += 2

    tau = -1.0 + 2.0 * np.sum(rho[:max_t + 1]) + rho[max_t + 1]
    tau = max(tau, 1.0 / np.log10(total))
    return float(min(total / tau, total))

def bulk_ess(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    if np.ptp(x) == 0:
        return float(x.size)
    return effective_sample_size(split_chains(rank_normalize(x)))

###############################################################################
# Diagnose
###############################################################################
def diagnose(
    draws: DrawMatrix,
    rhat_max: float = sampler_defaults['rhat_max'],
    ess_min: float = sampler_defaults['ess_min'],
    max_divergent_frac: float = sampler_defaults['max_divergent_frac'],
    params: Optional[Sequence[int]] = None
) -> FitDiagnostics:
    """Per-parameter rank-normalized split R-hat and bulk ESS

    Args:
        params: Only diagnose these columns (e.g. leaving out auxiliary coordinates)
    """
    chains = draws.by_chain()
    if chains.shape[0] < 2 or chains.shape[1] < 4:
        raise ValueError(f'Diagnostics need at least 2 chains of 4 draws, got {chains.shape[0]} x {chains.shape[1]}')
    if params is None:
        params = range(draws.dim)
    rhat = np.array([rank_normalized_rhat(chains[:, :, i]) for i in params])
    ess = np.array([bulk_ess(chains[:, :, i]) for i in params])
    n_div = draws.divergence_count
    converged = bool(
        np.max(rhat) <= rhat_max and np.min(ess) >= ess_min and n_div <= max_divergent_frac * draws.S
    )
    if not converged:
        logger.debug(f'Fit not converged: max rhat {np.max(rhat):.4f}, min ess {np.min(ess):.1f}, {n_div} divergences')
    return FitDiagnostics(rhat, ess, n_div, converged)

def exact_diagnostics(S: int, dim: int) -> FitDiagnostics:
    """Diagnostics of i.i.d. draws from a closed-form posterior"""
    return FitDiagnostics(np.ones(dim), np.full(dim, float(S)), 0, True)
