"""
Module to draw preconditioning datasets and turn them into draw-based implicit priors
"""
from dataclasses import dataclass, field
from functools import partial
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import logger
from .constants import improper_divergence_bound
from .inference import DrawMatrix, FitDiagnostics, SamplerConfig, exact_posterior_sampler, sample_posterior
from .inference.diagnostics import exact_diagnostics
from .inference.nuts import InitializationError, SamplerTimeoutError
from .model import (
    Dataset,
    DesignSource,
    ImproperPriorError,
    ModelSpec,
    ObservationWeights,
    PriorBlock,
    PriorSpec,
    empty_dataset,
    load_dataset,
    save_dataset,
    simulate_dataset
)
from .util import child_rng, load_json, make_dir, parallelize, report_flagged, save_frame, save_json

class ImproperPosteriorError(RuntimeError):
    pass

###############################################################################
# Preconditioning data
###############################################################################
source_kinds = ('real-subset', 'real-bootstrap', 'simulate-likelihood', 'external-simulator')

@dataclass(frozen=True)
class PreconSource:
    """Where the T preconditioning datasets of size N come from

    Attributes:
        theta_c: unconstrained parameter vector for simulate-likelihood
        psi_c: parameters of the external simulator
        simulator: external simulator, called as simulator(psi_c, X, N, rng)
        design: covariate source of simulated datasets
    """
    kind: str
    N: int
    T: int = 1
    source_data: Optional[Dataset] = None
    theta_c: Optional[np.ndarray] = None
    psi_c: Optional[Dict[str, float]] = None
    simulator: Optional[Callable] = None
    design: Optional[DesignSource] = None

    def __post_init__(self):
        if self.kind not in source_kinds:
            raise ValueError(f'Preconditioning source {self.kind} not supported. Choose from {source_kinds}')
        if self.N < 0 or self.T < 1:
            raise ValueError('N must be nonnegative and T at least 1')
        if self.kind == 'real-subset':
            if self.source_data is None or self.source_data.N < self.N:
                n_rows = 0 if self.source_data is None else self.source_data.N
                raise ValueError(f'real-subset needs at least N={self.N} source rows, got {n_rows}')
        if self.kind == 'real-bootstrap' and (self.source_data is None or (self.N and self.source_data.N < 1)):
            raise ValueError('real-bootstrap needs a nonempty source dataset')
        if self.kind == 'simulate-likelihood' and self.theta_c is None:
            raise ValueError('simulate-likelihood needs theta_c')
        if self.kind == 'external-simulator' and (self.psi_c is None or self.simulator is None):
            raise ValueError('external-simulator needs psi_c and a simulator')

    def describe(self) -> Dict[str, Any]:
        desc = {'kind': self.kind, 'N': self.N, 'T': self.T}
        if self.source_data is not None:
            desc['source_data'] = self.source_data.id
        if self.theta_c is not None:
            desc['theta_c'] = [float(x) for x in self.theta_c]
        if self.psi_c is not None:
            desc['psi_c'] = dict(self.psi_c)
        if self.simulator is not None:
            desc['simulator'] = getattr(self.simulator, '__name__', str(self.simulator))
        if self.design is not None:
            desc['design'] = self.design.kind
        return desc

def draw_preconditioning_datasets(
    src: PreconSource,
    rng: np.random.Generator,
    model: Optional[ModelSpec] = None
) -> List[Dataset]:
    """T datasets of exactly N rows each

    Subsets are drawn without replacement within a dataset and independently across datasets.
    """
    datasets = []
    for t in range(src.T):
        data_id = f'precon:{src.kind}:{t}'
        if src.N == 0:
            K = 0 if model is None else model.n_covariates
            datasets.append(empty_dataset(K, id=data_id))
            continue

        if src.kind in ('real-subset', 'real-bootstrap'):
            replace = src.kind == 'real-bootstrap'
            idx = rng.choice(src.source_data.N, size=src.N, replace=replace)
            datasets.append(src.source_data.subset(idx, id=data_id))
        elif src.kind == 'simulate-likelihood':
            if model is None:
                raise ValueError('simulate-likelihood preconditioning data needs the model')
            design = src.design or model.design(None if src.source_data is None else src.source_data.X)
            sim = simulate_dataset(model, src.theta_c, design, src.N, rng)
            datasets.append(Dataset(sim.y, sim.X, id=data_id))
        else:
            design = src.design
            if design is None:
                if src.source_data is not None and src.source_data.X is not None:
                    design = DesignSource('subsample', X=src.source_data.X)
                else:
                    design = model.design() if model is not None else DesignSource('none')
            X = design.draw(src.N, rng)
            with np.errstate(over='ignore', under='ignore'):
                y = np.asarray(src.simulator(src.psi_c, X, src.N, rng), dtype=float)
            y = np.clip(y, -np.finfo(float).max, np.finfo(float).max)
            datasets.append(Dataset(y, X, id=data_id))
    return datasets

def power_scale_factor(N: int, M: float) -> ObservationWeights:
    """Uniform weights tau = M/N, so N observations carry the information of M"""
    if N < 1 or M <= 0:
        raise ValueError(f'Power scaling needs N >= 1 and M > 0, got N={N}, M={M}')
    return ObservationWeights.uniform(N, M / N)

def prior_weight(n_prior: float, n_data: float) -> float:
    """Share of the total information carried by a prior worth n_prior observations"""
    return n_prior / (n_prior + n_data)

###############################################################################
# Parameter splits
###############################################################################
uninformed_modes = ('sample-original-prior', 'fix-constant')

@dataclass(frozen=True)
class ParameterSplit:
    """Informed coordinates take their prior from preconditioning, uninformed ones keep the original prior

    With uninformed_mode fix-constant, the copy of the uninformed parameters that explains the preconditioning
    data is held at theta_u_c instead of being estimated.
    """
    informed: Tuple[int, ...]
    uninformed: Tuple[int, ...]
    uninformed_mode: str = 'sample-original-prior'
    theta_u_c: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, 'informed', tuple(int(i) for i in self.informed))
        object.__setattr__(self, 'uninformed', tuple(int(i) for i in self.uninformed))
        if self.uninformed_mode not in uninformed_modes:
            raise ValueError(f'Uninformed mode {self.uninformed_mode} not supported')
        if set(self.informed) & set(self.uninformed):
            raise ValueError('Informed and uninformed parameters must be disjoint')
        if self.uninformed_mode == 'fix-constant':
            if self.theta_u_c is None or len(self.theta_u_c) != len(self.uninformed):
                raise ValueError('fix-constant needs one theta_u_c value per uninformed parameter')
            object.__setattr__(self, 'theta_u_c', tuple(float(x) for x in self.theta_u_c))

    def validate(self, dim: int):
        if sorted(self.informed + self.uninformed) != list(range(dim)):
            raise ValueError(f'Informed and uninformed parameters must together cover all {dim} parameters')

    @property
    def fixed(self) -> bool:
        return self.uninformed_mode == 'fix-constant'

    @classmethod
    def from_names(
        cls,
        model: ModelSpec,
        informed: Sequence[str],
        uninformed_mode: str = 'sample-original-prior',
        theta_u_c: Optional[Sequence[float]] = None
    ) -> 'ParameterSplit':
        """Split by parameter name; names ending in '*' match as prefixes (e.g. 'z*')"""
        informed_idx = set()
        for pattern in informed:
            if pattern.endswith('*'):
                informed_idx |= {i for i, name in enumerate(model.param_names) if name.startswith(pattern[:-1])}
            elif pattern in model.param_names:
                informed_idx.add(model.param_names.index(pattern))
            else:
                raise ValueError(f'{model.name} has no parameter named {pattern}')
        uninformed_idx = [i for i in range(model.dim) if i not in informed_idx]
        split = cls(tuple(sorted(informed_idx)), tuple(uninformed_idx), uninformed_mode, theta_u_c)
        split.validate(model.dim)
        return split

    def to_dict(self) -> Dict[str, Any]:
        return {
            'informed': list(self.informed), 'uninformed': list(self.uninformed),
            'uninformed_mode': self.uninformed_mode,
            'theta_u_c': None if self.theta_u_c is None else list(self.theta_u_c),
        }

def _remap_prior(prior: PriorSpec, mapping: Dict[int, List[int]], dim: int) -> PriorSpec:
    """Rebuild a factorized prior over new coordinates; mapping sends an old index to its new indices"""
    blocks = []
    for block in prior.blocks:
        new_idx = [j for i in block.indices for j in mapping.get(i, [])]
        if new_idx:
            blocks.append(PriorBlock(block.name, block.family, block.params, tuple(new_idx), block.transform))
    return PriorSpec(tuple(blocks), dim=dim, hyperparameters=prior.hyperparameters)

class ConditionedModel(ModelSpec):
    """The base model with some coordinates held at constants; its parameters are the remaining coordinates"""
    def __init__(self, base: ModelSpec, fixed_indices: Sequence[int], fixed_values: Sequence[float]):
        self.base = base
        self.fixed_indices = tuple(fixed_indices)
        self.fixed_values = np.asarray(fixed_values, dtype=float)
        self.free = tuple(i for i in range(base.dim) if i not in self.fixed_indices)
        self.name = f'{base.name}|fixed'
        self.param_names = tuple(base.param_names[i] for i in self.free)
        self.n_covariates = base.n_covariates
        self.prior = _remap_prior(base.prior, {i: [k] for k, i in enumerate(self.free)}, len(self.free))

    def expand(self, theta: np.ndarray) -> np.ndarray:
        full = np.empty(self.base.dim)
        full[list(self.free)] = theta
        full[list(self.fixed_indices)] = self.fixed_values
        return full

    def expand_draws(self, draws: np.ndarray) -> np.ndarray:
        full = np.empty((draws.shape[0], self.base.dim))
        full[:, list(self.free)] = draws
        full[:, list(self.fixed_indices)] = self.fixed_values
        return full

    def log_likelihood_terms(self, theta, data):
        return self.base.log_likelihood_terms(self.expand(theta), data)

    def log_likelihood_gradient(self, theta, data, weights):
        return self.base.log_likelihood_gradient(self.expand(theta), data, weights)[list(self.free)]

    def simulate_outcomes(self, theta, X, n, rng):
        return self.base.simulate_outcomes(self.expand(theta), X, n, rng)

    def design(self, X=None):
        return self.base.design(X)

class SplitModel(ModelSpec):
    """Fit model of selected-parameter SBC

    The first n_c rows of the data are preconditioning observations explained by (theta_I, theta_U^(c)); the
    rest are explained by (theta_I, theta_U). theta_U^(c) is either an extra block of parameters (named with a
    '__c' suffix, appended after the base parameters) or held at the constant theta_u_c.
    """
    def __init__(self, base: ModelSpec, split: ParameterSplit, n_c: int):
        split.validate(base.dim)
        self.base = base
        self.split = split
        self.n_c = n_c
        self.uninformed = list(split.uninformed)
        self.name = f'{base.name}|split'
        self.n_covariates = base.n_covariates
        if split.fixed:
            self.param_names = base.param_names
            self.prior = base.prior
        else:
            self.param_names = base.param_names + tuple(f'{base.param_names[i]}__c' for i in self.uninformed)
            mapping = {i: [i] for i in range(base.dim)}
            for k, i in enumerate(self.uninformed):
                mapping[i].append(base.dim + k)
            self.prior = _remap_prior(base.prior, mapping, len(self.param_names))

    def theta_c(self, theta: np.ndarray) -> np.ndarray:
        """Base parameter vector explaining the preconditioning rows"""
        out = np.array(theta[:self.base.dim], dtype=float)
        out[self.uninformed] = self.split.theta_u_c if self.split.fixed else theta[self.base.dim:]
        return out

    def _parts(self, data: Dataset) -> Tuple[Dataset, Dataset]:
        n_c = min(self.n_c, data.N)
        return data.subset(np.arange(n_c)), data.subset(np.arange(n_c, data.N))

    def log_likelihood_terms(self, theta, data):
        data_c, data_new = self._parts(data)
        parts = []
        if data_c.N:
            parts.append(self.base.log_likelihood_terms(self.theta_c(theta), data_c))
        if data_new.N:
            parts.append(self.base.log_likelihood_terms(theta[:self.base.dim], data_new))
        return np.concatenate(parts) if parts else np.empty(0)

    def log_likelihood_gradient(self, theta, data, weights):
        n_c = min(self.n_c, data.N)
        data_c, data_new = self._parts(data)
        grad = np.zeros(self.dim)
        if data_new.N:
            grad[:self.base.dim] += self.base.log_likelihood_gradient(theta[:self.base.dim], data_new, weights[n_c:])
        if data_c.N:
            grad_c = self.base.log_likelihood_gradient(self.theta_c(theta), data_c, weights[:n_c])
            grad[list(self.split.informed)] += grad_c[list(self.split.informed)]
            if not self.split.fixed:
                grad[self.base.dim:] += grad_c[self.uninformed]
        return grad

    def simulate_outcomes(self, theta, X, n, rng):
        return self.base.simulate_outcomes(theta[:self.base.dim], X, n, rng)

    def design(self, X=None):
        return self.base.design(X)

###############################################################################
# Implicit priors
###############################################################################
@dataclass
class ImplicitPrior:
    draws: DrawMatrix
    preconditioning_data: Dataset
    weights: ObservationWeights
    diagnostics: FitDiagnostics
    source: Dict[str, Any] = field(default_factory=dict)
    split: Optional[ParameterSplit] = None

    @property
    def S(self) -> int:
        return self.draws.S

    @property
    def converged(self) -> bool:
        return self.diagnostics.converged

def check_proper_posterior(model: ModelSpec, draws: np.ndarray, data_id: str = '') -> None:
    """Improper-prior coordinates that drift without bound signal a posterior that is not proper"""
    idx = model.prior.improper_indices()
    if not idx:
        return
    sub = draws[:, idx]
    if not np.all(np.isfinite(sub)) or np.max(np.abs(sub)) > improper_divergence_bound:
        names = [model.param_names[i] for i in idx]
        raise ImproperPosteriorError(
            f'{data_id}: draws of {names} diverge (max |draw| {np.max(np.abs(sub)):.3g}); the preconditioning '
            'data does not make the posterior proper'
        )

def build_implicit_prior(
    model: ModelSpec,
    y_c: Dataset,
    w: ObservationWeights,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    split: Optional[ParameterSplit] = None,
    source: Optional[Dict[str, Any]] = None
) -> ImplicitPrior:
    """Update the base prior with the (weighted) preconditioning data

    With a fix-constant split the fit holds the uninformed coordinates at theta_u_c, and the returned draws carry
    that constant in those columns.
    """
    if y_c.N != w.N:
        raise ValueError(f'Preconditioning data has {y_c.N} rows but {w.N} weights were given')
    fit_model = model
    if split is not None and split.fixed:
        split.validate(model.dim)
        fit_model = ConditionedModel(model, split.uninformed, split.theta_u_c)
    if y_c.N == 0 and not fit_model.prior.proper:
        raise ImproperPosteriorError(f'{y_c.id}: an improper prior cannot be preconditioned on an empty dataset')

    if cfg.backend == 'exact':
        dm = exact_posterior_sampler(fit_model, y_c, cfg.total_draws, rng, weights=w)
        diagnostics = exact_diagnostics(dm.S, fit_model.dim)
    else:
        dm, diagnostics = sample_posterior(fit_model, y_c, w, cfg, rng)
    check_proper_posterior(fit_model, dm.draws, y_c.id)

    if fit_model is not model:
        dm = DrawMatrix(
            fit_model.expand_draws(dm.draws), dm.chains, dm.warmup_discarded, dm.seed, dm.divergent,
            model.param_names
        )
    if not diagnostics.converged:
        logger.warning(
            f'Implicit prior from {y_c.id} did not converge (max rhat {np.max(diagnostics.rhat):.3f}, '
            f'min ess {np.min(diagnostics.ess):.0f}, {diagnostics.divergence_count} divergences)'
        )
    return ImplicitPrior(dm, y_c, w, diagnostics, source=dict(source or {}), split=split)

def _build_worker(t_data, model, w, cfg, root_seed, split, source):
    t, y_c = t_data
    rng = child_rng(root_seed, 'precon', t)
    try:
        return build_implicit_prior(model, y_c, w, cfg, rng, split=split, source={**source, 't': t})
    except (ImproperPosteriorError, InitializationError, SamplerTimeoutError, ImproperPriorError) as e:
        raise type(e)(f'preconditioning dataset {y_c.id}: {e}') from e

def build_prior_family(
    model: ModelSpec,
    src: PreconSource,
    w: Optional[ObservationWeights],
    cfg: SamplerConfig,
    root_seed: int,
    split: Optional[ParameterSplit] = None,
    processes: Optional[int] = 1
) -> List[ImplicitPrior]:
    """One implicit prior per preconditioning dataset; pooled, their draws represent the marginal preconditioned prior

    Datasets come from the stream child(root_seed, 'precon-data'), fit t from child(root_seed, 'precon', t).
    """
    if w is None:
        w = ObservationWeights.uniform(src.N)
    if w.N != src.N:
        raise ValueError(f'Got {w.N} weights for preconditioning datasets of size {src.N}')
    datasets = draw_preconditioning_datasets(src, child_rng(root_seed, 'precon-data'), model=model)
    worker = partial(
        _build_worker, model=model, w=w, cfg=cfg, root_seed=root_seed, split=split, source=src.describe()
    )
    priors = parallelize(list(enumerate(datasets)), worker, processes=processes, desc='Preconditioning')
    report_flagged([not ip.converged for ip in priors], 'implicit priors', context=' as not converged.')
    return priors

def pool_prior_draws(priors: Sequence[ImplicitPrior]) -> np.ndarray:
    """Stack the draw sets of several implicit priors"""
    return np.vstack([ip.draws.draws for ip in priors])

def split_prior_draws(
    ip: ImplicitPrior,
    model: ModelSpec,
    split: ParameterSplit,
    rng: np.random.Generator,
    mode: Optional[str] = None
) -> DrawMatrix:
    """Informed columns from the implicit prior, uninformed columns from the original prior or a constant

    Args:
        mode: overrides split.uninformed_mode
    """
    split.validate(model.dim)
    mode = mode or split.uninformed_mode
    draws = ip.draws.draws.copy()
    U = list(split.uninformed)
    if U:
        if mode == 'fix-constant':
            if split.theta_u_c is None:
                raise ValueError('fix-constant needs theta_u_c')
            draws[:, U] = split.theta_u_c
        else:
            if not model.prior.is_proper(U):
                raise ImproperPriorError('The original prior of the uninformed parameters is improper')
            draws[:, U] = model.sample_prior(rng, ip.S, indices=U)[:, U]
    return DrawMatrix(draws, ip.draws.chains, ip.draws.warmup_discarded, ip.draws.seed, names=model.param_names)

###############################################################################
# Persistence
###############################################################################
def save_implicit_prior(ip: ImplicitPrior, directory: str) -> None:
    """Draws CSV, preconditioning data CSV and a JSON sidecar"""
    make_dir(directory)
    names = ip.draws.names or tuple(f'theta{i}' for i in range(ip.draws.dim))
    df = pd.DataFrame(ip.draws.draws, columns=list(names))
    df.insert(0, 'chain', ip.draws.chains)
    if ip.draws.divergent is not None:
        df['divergent'] = ip.draws.divergent.astype(int)
    save_frame(df, f'{directory}/draws.csv')
    save_dataset(ip.preconditioning_data, f'{directory}/data.csv')
    sidecar = {
        'names': list(names),
        'weights': ip.weights.weights,
        'tau': ip.weights.tau,
        'source': ip.source,
        'diagnostics': ip.diagnostics.to_dict(),
        'seed': ip.draws.seed,
        'warmup_discarded': ip.draws.warmup_discarded,
        'data_id': ip.preconditioning_data.id,
        'split': None if ip.split is None else ip.split.to_dict(),
    }
    save_json(sidecar, f'{directory}/prior.json')

def load_implicit_prior(directory: str) -> ImplicitPrior:
    sidecar = load_json(f'{directory}/prior.json')
    df = pd.read_csv(f'{directory}/draws.csv')
    names = tuple(sidecar['names'])
    divergent = df['divergent'].to_numpy(dtype=bool) if 'divergent' in df else None
    dm = DrawMatrix(
        df[list(names)].to_numpy(dtype=float), df['chain'].to_numpy(dtype=int), sidecar['warmup_discarded'],
        sidecar['seed'], divergent, names
    )
    data = load_dataset(f'{directory}/data.csv')
    data = Dataset(data.y, data.X, id=sidecar['data_id'])
    weights = ObservationWeights(np.array(sidecar['weights'], dtype=float), sidecar['tau'])
    split = None if sidecar['split'] is None else ParameterSplit(**sidecar['split'])
    return ImplicitPrior(
        dm, data, weights, FitDiagnostics.from_dict(sidecar['diagnostics']), source=sidecar['source'], split=split
    )
