"""
Module to run simulation-based calibration with the original prior, with implicit priors, and with implicit priors
for selected parameters
"""
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import logger
from .constants import default_censor_threshold, sbc_defaults
from .inference import FitFunction, SamplerConfig, fit_posterior
from .inference.nuts import InitializationError, SamplerTimeoutError
from .model import (
    Dataset,
    DesignSource,
    EvaluationError,
    ImproperPriorError,
    ModelSpec,
    ObservationWeights,
    simulate_dataset
)
from .precondition import ImplicitPrior, ParameterSplit, SplitModel, split_prior_draws
from .util import child_rng, child_seed, parallelize, report_flagged, seed_to_int

class RejectionExhaustedError(RuntimeError):
    def __init__(self, msg: str, rejection_rate: float):
        super().__init__(msg)
        self.rejection_rate = rejection_rate

# fit errors that are recorded as a failed replication instead of stopping the run
FIT_FAILURES = (InitializationError, SamplerTimeoutError, EvaluationError, FloatingPointError)

###############################################################################
# Config
###############################################################################
policy_modes = ('none', 'censor', 'reject-redraw')

@dataclass(frozen=True)
class DataPolicy:
    """What to do with simulated outcomes below a threshold (e.g. gamma draws that underflow to zero)"""
    mode: str = 'none'
    threshold: float = default_censor_threshold
    max_redraws: int = 100

    def __post_init__(self):
        if self.mode not in policy_modes:
            raise ValueError(f'Data policy {self.mode} not supported. Choose from {policy_modes}')
        if self.mode != 'none' and not np.isfinite(self.threshold):
            raise ValueError(f'{self.mode} needs a finite threshold')
        if self.max_redraws < 1:
            raise ValueError('max_redraws must be at least 1')

@dataclass(frozen=True)
class SbcConfig:
    J: int = sbc_defaults['J']
    n_obs: int = sbc_defaults['n_obs']
    S: int = sbc_defaults['S']
    quantities: Tuple[str, ...] = ()
    data_policy: DataPolicy = field(default_factory=DataPolicy)
    split: Optional[ParameterSplit] = None
    root_seed: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    jobs: Optional[int] = 1
    design: Optional[DesignSource] = None

    def __post_init__(self):
        object.__setattr__(self, 'quantities', tuple(self.quantities))
        if self.J < 1 or self.n_obs < 1 or self.S < 1:
            raise ValueError(f'J, n_obs and S must be positive, got J={self.J}, n_obs={self.n_obs}, S={self.S}')
        if not self.quantities:
            raise ValueError('At least one quantity must be ranked')

###############################################################################
# Ranks
###############################################################################
@dataclass
class RankMatrix:
    """T x J x P rank statistics with per-replication bookkeeping"""
    ranks: np.ndarray
    S: int
    quantities: Tuple[str, ...]
    converged: np.ndarray
    seeds: np.ndarray
    failed: Optional[np.ndarray] = None
    n_redraws: Optional[np.ndarray] = None
    n_censored: Optional[np.ndarray] = None

    def __post_init__(self):
        self.ranks = np.asarray(self.ranks, dtype=int)
        T, J, P = self.ranks.shape
        assert P == len(self.quantities)
        if self.ranks.min(initial=0) < 0 or self.ranks.max(initial=0) > self.S:
            raise ValueError(f'Ranks must lie in [0, {self.S}]')
        for name in ('failed', 'n_redraws', 'n_censored'):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros((T, J), dtype=bool if name == 'failed' else int))
        assert self.converged.shape == self.seeds.shape == (T, J)

    @property
    def T(self) -> int:
        return self.ranks.shape[0]

    @property
    def J(self) -> int:
        return self.ranks.shape[1]

    def pooled(self, quantity: str) -> np.ndarray:
        """All T x J ranks of one quantity"""
        return self.ranks[:, :, self.quantities.index(quantity)].ravel()

    def to_frame(self) -> pd.DataFrame:
        T, J, P = self.ranks.shape
        t, j, p = np.meshgrid(np.arange(T), np.arange(J), np.arange(P), indexing='ij')
        t, j, p = t.ravel(), j.ravel(), p.ravel()
        return pd.DataFrame({
            't': t,
            'j': j,
            'quantity': np.array(self.quantities, dtype=object)[p],
            'rank': self.ranks.ravel(),
            'S': self.S,
            'converged': self.converged[t, j],
            'seed': self.seeds[t, j],
            'failed': self.failed[t, j],
            'redraws': self.n_redraws[t, j],
            'censored': self.n_censored[t, j],
        })

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> 'RankMatrix':
        quantities = tuple(pd.unique(df['quantity']))
        T, J, P = df['t'].max() + 1, df['j'].max() + 1, len(quantities)
        df = df.assign(p=df['quantity'].map({q: i for i, q in enumerate(quantities)}))
        df = df.sort_values(['t', 'j', 'p'])
        per_task = df.drop_duplicates(['t', 'j'])
        shape = (T, J)
        return cls(
            df['rank'].to_numpy().reshape(T, J, P), int(df['S'].iloc[0]), quantities,
            per_task['converged'].to_numpy(dtype=bool).reshape(shape),
            per_task['seed'].to_numpy(dtype=np.uint64).reshape(shape),
            failed=per_task['failed'].to_numpy(dtype=bool).reshape(shape) if 'failed' in df else None,
            n_redraws=per_task['redraws'].to_numpy(dtype=int).reshape(shape) if 'redraws' in df else None,
            n_censored=per_task['censored'].to_numpy(dtype=int).reshape(shape) if 'censored' in df else None,
        )

def compute_rank(true_value: float, posterior_values: np.ndarray, rng: Optional[np.random.Generator] = None) -> int:
    """Number of posterior values strictly below the true value

    With rng, each tie counts as below with probability 1/2.
    """
    posterior_values = np.asarray(posterior_values, dtype=float)
    rank = int(np.sum(posterior_values < true_value))
    if rng is not None:
        n_ties = int(np.sum(posterior_values == true_value))
        if n_ties:
            rank += int(rng.binomial(n_ties, 0.5))
    return rank

###############################################################################
# Data policies
###############################################################################
def apply_data_policy(
    data: Dataset,
    policy: DataPolicy,
    redraw_fn: Optional[Callable[[], Dataset]] = None
) -> Dataset:
    """Censor outcomes at the threshold, or redraw the whole (theta, dataset) pair until none falls below it"""
    if policy.mode == 'none':
        return data
    if policy.mode == 'censor':
        return Dataset(np.maximum(data.y, policy.threshold), data.X, data.id)

    if redraw_fn is None:
        raise ValueError('reject-redraw needs a redraw function')
    attempts = 1
    while np.any(data.y < policy.threshold):
        if attempts > policy.max_redraws:
            raise RejectionExhaustedError(
                f'All {attempts} simulated datasets had outcomes below {policy.threshold:g}', rejection_rate=1.0
            )
        data = redraw_fn()
        attempts += 1
    return data

class _TruthRedrawer:
    """Draws a fresh ground truth and its dataset, remembering the last truth"""
    def __init__(self, draw_theta: Callable[[], np.ndarray], model: ModelSpec, design: DesignSource, n: int, rng):
        self.draw_theta = draw_theta
        self.model = model
        self.design = design
        self.n = n
        self.rng = rng
        self.theta = None
        self.count = 0

    def __call__(self) -> Dataset:
        self.count += 1
        self.theta = self.draw_theta()
        return simulate_dataset(self.model, self.theta, self.design, self.n, self.rng)

###############################################################################
# Replications
###############################################################################
@dataclass
class _Task:
    t: int
    j: int
    theta: np.ndarray
    # rows to redraw the truth from; None draws from the model's prior
    pool: Optional[np.ndarray] = None
    # preconditioning data (and weights) prepended to every fit
    prefix: Optional[Dataset] = None
    prefix_weights: Optional[ObservationWeights] = None
    fit_model: Optional[ModelSpec] = None

@dataclass
class _TaskResult:
    ranks: np.ndarray
    converged: bool
    failed: bool
    seed: int
    n_redraws: int
    n_censored: int

def _run_task(task: _Task, model: ModelSpec, cfg: SbcConfig, design: DesignSource, fit_fn: FitFunction) -> _TaskResult:
    seed = child_seed(cfg.root_seed, 'sbc', task.t, task.j)
    rng = np.random.default_rng(seed)
    if task.pool is None:
        draw_theta = lambda: model.sample_prior(rng, 1)[0]
    else:
        draw_theta = lambda: task.pool[rng.integers(task.pool.shape[0])]

    redrawer = _TruthRedrawer(draw_theta, model, design, cfg.n_obs, rng)
    data = simulate_dataset(model, task.theta, design, cfg.n_obs, rng)
    policy = cfg.data_policy
    n_censored = int(np.sum(data.y < policy.threshold)) if policy.mode == 'censor' else 0
    data = apply_data_policy(data, policy, redraw_fn=redrawer)
    theta = task.theta if redrawer.theta is None else redrawer.theta

    weights = ObservationWeights.uniform(data.N)
    fit_model = task.fit_model or model
    if task.prefix is not None:
        data = task.prefix.concat(data, id=f'{task.prefix.id}+sbc:{task.j}')
        weights = task.prefix_weights.concat(weights)

    truth = model.quantity_values(theta[None, :], cfg.quantities)[0]
    try:
        draws, diagnostics = fit_fn(fit_model, data, weights, cfg.S, cfg.sampler, rng)
    except FIT_FAILURES as e:
        logger.debug(f'Fit ({task.t}, {task.j}) failed: {e}')
        return _TaskResult(np.zeros(len(truth), dtype=int), False, True, seed_to_int(seed), redrawer.count, n_censored)

    # extra coordinates of the fit model (e.g. the preconditioning copy of split parameters) are dropped here
    values = model.quantity_values(draws[:, :model.dim], cfg.quantities)
    ranks = np.array([compute_rank(truth[p], values[:, p], rng) for p in range(len(truth))])
    return _TaskResult(ranks, diagnostics.converged, False, seed_to_int(seed), redrawer.count, n_censored)

def _run_tasks(tasks: List[_Task], T: int, model: ModelSpec, cfg: SbcConfig, fit_fn: Optional[FitFunction]) -> RankMatrix:
    design = cfg.design or model.design()
    worker = partial(_run_task, model=model, cfg=cfg, design=design, fit_fn=fit_fn or fit_posterior)
    results = parallelize(tasks, worker, processes=cfg.jobs, desc='SBC')

    P = len(cfg.quantities)
    ranks = np.zeros((T, cfg.J, P), dtype=int)
    converged = np.zeros((T, cfg.J), dtype=bool)
    failed = np.zeros((T, cfg.J), dtype=bool)
    seeds = np.zeros((T, cfg.J), dtype=np.uint64)
    n_redraws = np.zeros((T, cfg.J), dtype=int)
    n_censored = np.zeros((T, cfg.J), dtype=int)
    for task, result in zip(tasks, results):
        t, j = task.t, task.j
        ranks[t, j] = result.ranks
        converged[t, j] = result.converged
        failed[t, j] = result.failed
        seeds[t, j] = result.seed
        n_redraws[t, j] = result.n_redraws
        n_censored[t, j] = result.n_censored
    report_flagged(failed, 'SBC fits', context=' as failed (rank 0).')
    report_flagged(~converged & ~failed, 'SBC fits', context=' as not converged.')
    if n_redraws.sum():
        logger.info(f'Redrew {n_redraws.sum()} rejected SBC datasets')
    if n_censored.sum():
        logger.info(f'Censored {n_censored.sum()} simulated outcomes at {cfg.data_policy.threshold:g}')
    return RankMatrix(ranks, cfg.S, cfg.quantities, converged, seeds, failed, n_redraws, n_censored)

def run_sbc_traditional(model: ModelSpec, cfg: SbcConfig, fit_fn: Optional[FitFunction] = None) -> RankMatrix:
    """Ground truths from the original prior (T = 1)"""
    if not model.prior.proper:
        raise ImproperPriorError(
            f'Traditional SBC is not computable for {model.name}: its prior is improper and cannot be sampled'
        )
    rng = child_rng(cfg.root_seed, 'truth', 0)
    truths = model.sample_prior(rng, cfg.J)
    tasks = [_Task(0, j, truths[j]) for j in range(cfg.J)]
    return _run_tasks(tasks, 1, model, cfg, fit_fn)

def _truth_indices(ip: ImplicitPrior, J: int, root_seed: int, t: int) -> np.ndarray:
    if ip.S < J:
        raise ValueError(f'Implicit prior {t} has {ip.S} draws, at least J={J} are needed')
    return child_rng(root_seed, 'truth', t).choice(ip.S, size=J, replace=False)

def _check_priors(priors: Sequence[ImplicitPrior], require_converged: bool):
    if not priors:
        raise ValueError('At least one implicit prior is needed')
    bad = [t for t, ip in enumerate(priors) if not ip.converged]
    if bad and require_converged:
        raise ValueError(f'Implicit priors {bad} did not converge')
    if bad:
        logger.warning(f'Using {len(bad)} non-converged implicit priors')

def run_sbc_implicit(
    model: ModelSpec,
    priors: Sequence[ImplicitPrior],
    cfg: SbcConfig,
    fit_fn: Optional[FitFunction] = None,
    condition_on_preconditioning: bool = True,
    require_converged: bool = True
) -> RankMatrix:
    """Ground truths from the implicit priors; every fit sees the preconditioning data with its weights

    condition_on_preconditioning=False fits the simulated data with the original prior only, which breaks
    self-consistency and is kept to demonstrate exactly that.
    """
    _check_priors(priors, require_converged)
    tasks = []
    for t, ip in enumerate(priors):
        idx = _truth_indices(ip, cfg.J, cfg.root_seed, t)
        pool = ip.draws.draws
        for j in range(cfg.J):
            task = _Task(t, j, pool[idx[j]], pool=pool)
            if condition_on_preconditioning:
                task.prefix, task.prefix_weights = ip.preconditioning_data, ip.weights
            tasks.append(task)
    return _run_tasks(tasks, len(priors), model, cfg, fit_fn)

def run_sbc_split(
    model: ModelSpec,
    priors: Sequence[ImplicitPrior],
    cfg: SbcConfig,
    fit_fn: Optional[FitFunction] = None,
    require_converged: bool = True
) -> RankMatrix:
    """Selected-parameter SBC

    Informed truths come from the implicit prior, uninformed truths from the original prior. The fit model explains
    the preconditioning rows with its own copy of the uninformed parameters (estimated, or held at theta_u_c),
    whose draws are discarded before ranking.
    """
    split = cfg.split
    if split is None:
        raise ValueError('Selected-parameter SBC needs a parameter split')
    split.validate(model.dim)
    if not split.uninformed:
        return run_sbc_implicit(model, priors, cfg, fit_fn=fit_fn, require_converged=require_converged)
    _check_priors(priors, require_converged)

    tasks = []
    for t, ip in enumerate(priors):
        idx = _truth_indices(ip, cfg.J, cfg.root_seed, t)
        pool = split_prior_draws(
            ip, model, split, child_rng(cfg.root_seed, 'truth-uninformed', t), mode='sample-original-prior'
        ).draws
        fit_model = SplitModel(model, split, ip.preconditioning_data.N)
        for j in range(cfg.J):
            tasks.append(_Task(
                t, j, pool[idx[j]], pool=pool, prefix=ip.preconditioning_data, prefix_weights=ip.weights,
                fit_model=fit_model
            ))
    return _run_tasks(tasks, len(priors), model, cfg, fit_fn)
