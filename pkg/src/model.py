"""
Module defining the model abstraction: priors, datasets, observation weights, densities and simulators
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import betaln, expit, gammaln, log_expit

from . import logger

ArrayLike = Union[np.ndarray, Sequence[float]]

class EvaluationError(ValueError):
    """A model function returned NaN"""
    def __init__(self, msg: str, theta: np.ndarray):
        super().__init__(f'{msg} at theta={np.array2string(np.asarray(theta), precision=6)}')
        self.theta = np.asarray(theta)

class ImproperPriorError(ValueError):
    pass

###############################################################################
# Parameters
###############################################################################
@dataclass(frozen=True)
class ParameterVector:
    """Parameter values on the unconstrained scale"""
    values: np.ndarray
    names: Tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        object.__setattr__(self, 'values', values)
        object.__setattr__(self, 'names', tuple(self.names))
        if len(values) != len(self.names):
            raise ValueError(f'Got {len(values)} values for {len(self.names)} parameter names')
        if not np.all(np.isfinite(values)):
            raise ValueError('Parameter values must be finite')

    @property
    def dim(self) -> int:
        return len(self.values)

def as_array(theta: Union[ParameterVector, ArrayLike]) -> np.ndarray:
    if isinstance(theta, ParameterVector):
        return theta.values
    return np.asarray(theta, dtype=float)

###############################################################################
# Priors
###############################################################################
prior_families = ('normal', 'gamma', 'halfnormal', 'beta', 'flat')
transforms = ('identity', 'log', 'logit')

@dataclass(frozen=True)
class PriorBlock:
    """Independent prior over a block of coordinates

    The density is defined on the constrained scale; coordinates are sampled on the unconstrained scale given by
    transform, and the log Jacobian is part of every log density below.
    """
    name: str
    family: str
    params: Tuple[float, ...]
    indices: Tuple[int, ...]
    transform: str = 'identity'

    def __post_init__(self):
        if self.family not in prior_families:
            raise ValueError(f'Prior family {self.family} not supported')
        if self.transform not in transforms:
            raise ValueError(f'Transform {self.transform} not supported')
        n_params = {'normal': 2, 'gamma': 2, 'halfnormal': 1, 'beta': 2, 'flat': 0}[self.family]
        if len(self.params) != n_params:
            raise ValueError(f'{self.family} prior for {self.name} needs {n_params} hyperparameters')
        scales = {'normal': self.params[1:], 'gamma': self.params, 'halfnormal': self.params, 'beta': self.params}
        if any(p <= 0 for p in scales.get(self.family, ())):
            raise ValueError(f'Scale hyperparameters of {self.name} must be strictly positive')

    @property
    def proper(self) -> bool:
        return self.family != 'flat'

    def log_density(self, u: np.ndarray) -> np.ndarray:
        """Elementwise log density of unconstrained values u, Jacobian included"""
        u = np.asarray(u, dtype=float)
        fam, p = self.family, self.params
        with np.errstate(over='ignore', invalid='ignore'):
            if fam == 'normal':
                return -0.5 * ((u - p[0]) / p[1])**2 - np.log(p[1]) - 0.5 * np.log(2 * np.pi)
            if fam == 'gamma':
                a, b = p
                return a * np.log(b) - gammaln(a) + a * u - b * np.exp(u)
            if fam == 'halfnormal':
                return 0.5 * np.log(2 / np.pi) - np.log(p[0]) - 0.5 * np.exp(2 * u) / p[0]**2 + u
            if fam == 'beta':
                a, b = p
                return a * log_expit(u) + b * log_expit(-u) - betaln(a, b)
        # flat on the constrained scale, only the Jacobian remains
        if self.transform == 'log':
            return u.copy()
        if self.transform == 'logit':
            return log_expit(u) + log_expit(-u)
        return np.zeros_like(u)

    def gradient(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        fam, p = self.family, self.params
        with np.errstate(over='ignore', invalid='ignore'):
            if fam == 'normal':
                return -(u - p[0]) / p[1]**2
            if fam == 'gamma':
                return p[0] - p[1] * np.exp(u)
            if fam == 'halfnormal':
                return 1 - np.exp(2 * u) / p[0]**2
            if fam == 'beta':
                return p[0] * expit(-u) - p[1] * expit(u)
        if self.transform == 'log':
            return np.ones_like(u)
        if self.transform == 'logit':
            return 1 - 2 * expit(u)
        return np.zeros_like(u)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draws on the unconstrained scale, shape (size, len(indices))"""
        if not self.proper:
            raise ImproperPriorError(f'Cannot sample from the flat (improper) prior of {self.name}')
        shape = (size, len(self.indices))
        fam, p = self.family, self.params
        if fam == 'normal':
            return p[0] + p[1] * rng.standard_normal(shape)
        if fam == 'gamma':
            # log G(a) = log G(a+1) + log(U)/a, so tiny shapes do not underflow to log(0)
            a, b = p
            return np.log(rng.gamma(a + 1, size=shape)) + np.log(rng.uniform(size=shape)) / a - np.log(b)
        if fam == 'halfnormal':
            return np.log(p[0] * np.abs(rng.standard_normal(shape)))
        log_x = np.log(rng.gamma(p[0], size=shape))
        log_y = np.log(rng.gamma(p[1], size=shape))
        return log_x - log_y # logit of a beta draw

@dataclass(frozen=True)
class PriorSpec:
    blocks: Tuple[PriorBlock, ...]
    dim: int
    hyperparameters: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, 'blocks', tuple(self.blocks))
        covered = sorted(i for block in self.blocks for i in block.indices)
        if covered != list(range(self.dim)):
            raise ValueError('Prior blocks must cover every parameter index exactly once')

    @property
    def proper(self) -> bool:
        return all(block.proper for block in self.blocks)

    def is_proper(self, indices: Optional[Sequence[int]] = None) -> bool:
        if indices is None:
            return self.proper
        indices = set(indices)
        return all(block.proper for block in self.blocks if indices & set(block.indices))

    def improper_indices(self) -> List[int]:
        return sorted(i for block in self.blocks if not block.proper for i in block.indices)

    def log_density_terms(self, theta: np.ndarray) -> np.ndarray:
        """Per-coordinate log density"""
        theta = np.asarray(theta, dtype=float)
        terms = np.empty(self.dim)
        for block in self.blocks:
            idx = list(block.indices)
            terms[idx] = block.log_density(theta[idx])
        return terms

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        grad = np.empty(self.dim)
        for block in self.blocks:
            idx = list(block.indices)
            grad[idx] = block.gradient(theta[idx])
        return grad

    def sample(self, rng: np.random.Generator, size: int, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        """Prior draws on the unconstrained scale, shape (size, dim)

        Args:
            indices: If given, only these coordinates are drawn (others are left at NaN)
        """
        wanted = set(range(self.dim)) if indices is None else set(indices)
        draws = np.full((size, self.dim), np.nan)
        for block in self.blocks:
            if not wanted & set(block.indices):
                continue
            idx = list(block.indices)
            draws[:, idx] = block.sample(rng, size)
        return draws

###############################################################################
# Datasets and weights
###############################################################################
@dataclass(frozen=True)
class Dataset:
    """Outcomes y (length N) plus an optional N x K covariate matrix"""
    y: np.ndarray
    X: Optional[np.ndarray] = None
    id: str = ''

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        object.__setattr__(self, 'y', y)
        if self.X is not None:
            X = np.asarray(self.X, dtype=float)
            if X.ndim == 1:
                X = X.reshape(-1, 1)
            if X.shape[0] != len(y):
                raise ValueError(f'Covariate matrix has {X.shape[0]} rows but there are {len(y)} outcomes')
            if not np.all(np.isfinite(X)):
                raise ValueError('Covariates must be finite')
            object.__setattr__(self, 'X', X)
        if not np.all(np.isfinite(y)):
            raise ValueError('Outcomes must be finite')

    @property
    def N(self) -> int:
        return len(self.y)

    @property
    def K(self) -> int:
        return 0 if self.X is None else self.X.shape[1]

    def subset(self, idx: np.ndarray, id: Optional[str] = None) -> 'Dataset':
        idx = np.asarray(idx, dtype=int)
        X = None if self.X is None else self.X[idx]
        return Dataset(self.y[idx], X, self.id if id is None else id)

    def concat(self, other: 'Dataset', id: Optional[str] = None) -> 'Dataset':
        """Row-stack two datasets"""
        if (self.X is None) != (other.X is None) or self.K != other.K:
            raise ValueError('Only datasets with matching covariate columns can be concatenated')
        X = None if self.X is None else np.vstack([self.X, other.X])
        return Dataset(np.concatenate([self.y, other.y]), X, id or f'{self.id}+{other.id}')

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({'y': self.y})
        for k in range(self.K):
            df[f'x{k+1}'] = self.X[:, k]
        return df

def empty_dataset(K: int = 0, id: str = 'empty') -> Dataset:
    return Dataset(np.empty(0), np.empty((0, K)) if K else None, id)

def load_dataset(path: str, outcome_col: Optional[str] = None) -> Dataset:
    """Read a CSV with a header row, the outcome in the first column (or outcome_col) and covariates in the rest"""
    df = pd.read_csv(path)
    if df.isnull().any().any():
        n_missing = int(df.isnull().sum().sum())
        raise ValueError(f'{path} contains {n_missing} missing values')
    if outcome_col is None:
        outcome_col = df.columns[0]
    y = df.pop(outcome_col).to_numpy(dtype=float)
    X = df.to_numpy(dtype=float) if len(df.columns) else None
    return Dataset(y, X, id=path)

def save_dataset(data: Dataset, path: str) -> None:
    from .util import save_frame
    save_frame(data.to_frame(), path)

@dataclass(frozen=True)
class ObservationWeights:
    """Per-observation log-likelihood weights; tau is the common weight in the uniform case"""
    weights: np.ndarray
    tau: float = 1.0

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float).ravel()
        object.__setattr__(self, 'weights', weights)
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise ValueError('Observation weights must be finite and nonnegative')
        if self.tau <= 0:
            raise ValueError('tau must be strictly positive')

    @classmethod
    def uniform(cls, n: int, tau: float = 1.0) -> 'ObservationWeights':
        return cls(np.full(n, float(tau)), float(tau))

    @property
    def N(self) -> int:
        return len(self.weights)

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.tau))

    def concat(self, other: 'ObservationWeights') -> 'ObservationWeights':
        weights = np.concatenate([self.weights, other.weights])
        tau = self.tau if self.tau == other.tau else 1.0
        return ObservationWeights(weights, tau)

###############################################################################
# Models
###############################################################################
class ModelSpec:
    """A Bayesian model on an unconstrained parameter space

    Subclasses set name, param_names, prior and n_covariates, and implement the per-observation log likelihood,
    its weighted gradient and the outcome simulator. Instances are immutable and picklable, so they can be shipped
    to worker processes.
    """
    name: str = 'model'
    param_names: Tuple[str, ...] = ()
    prior: PriorSpec
    n_covariates: int = 0

    @property
    def dim(self) -> int:
        return len(self.param_names)

    @property
    def derived_quantities(self) -> Dict[str, Callable[[np.ndarray], np.ndarray]]:
        """Named functions of a draw matrix (S x dim) returning one value per draw"""
        return {}

    def log_prior_density(self, theta: np.ndarray) -> float:
        return float(np.sum(self.prior.log_density_terms(theta)))

    def log_prior_gradient(self, theta: np.ndarray) -> np.ndarray:
        return self.prior.gradient(theta)

    def log_likelihood_terms(self, theta: np.ndarray, data: Dataset) -> np.ndarray:
        raise NotImplementedError

    def log_likelihood_gradient(self, theta: np.ndarray, data: Dataset, weights: np.ndarray) -> np.ndarray:
        """Gradient of sum_i w_i * l_i(theta)"""
        raise NotImplementedError

    def simulate_outcomes(self, theta: np.ndarray, X: Optional[np.ndarray], n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def sample_prior(self, rng: np.random.Generator, size: int, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        if not self.prior.is_proper(indices):
            raise ImproperPriorError(f'The prior of {self.name} is improper and cannot be sampled')
        return self.prior.sample(rng, size, indices=indices)

    @property
    def has_exact_posterior(self) -> bool:
        return False

    def exact_posterior_draws(self, data: Dataset, weights: ObservationWeights, S: int, rng: np.random.Generator):
        raise NotImplementedError(f'{self.name} has no closed-form posterior')

    def design(self, X: Optional[np.ndarray] = None) -> 'DesignSource':
        """Covariate source of simulated datasets

        Subsample the real covariates when given, fall back to simulated standard-normal covariates.
        """
        if not self.n_covariates:
            return DesignSource('none')
        if X is not None:
            return DesignSource('subsample', X=X)
        return DesignSource('simulate', K=self.n_covariates)

    def in_support(self, theta: np.ndarray) -> bool:
        return bool(np.all(np.isfinite(theta)))

    def quantity_values(self, draws: np.ndarray, names: Sequence[str]) -> np.ndarray:
        """Evaluate named quantities (parameters or derived quantities) on a draw matrix, shape (S, len(names))"""
        draws = np.atleast_2d(draws)
        derived = self.derived_quantities
        cols = []
        for name in names:
            if name in self.param_names:
                cols.append(draws[:, self.param_names.index(name)])
            elif name in derived:
                cols.append(derived[name](draws))
            else:
                raise ValueError(f'{self.name} has no quantity named {name}')
        return np.column_stack(cols)

    def __repr__(self):
        return f'{type(self).__name__}({self.name}, dim={self.dim})'

def _check_lengths(model: ModelSpec, theta: np.ndarray, data: Dataset, w: ObservationWeights):
    if len(theta) != model.dim:
        raise ValueError(f'{model.name} has {model.dim} parameters, got {len(theta)}')
    if data.N != w.N:
        raise ValueError(f'Dataset has {data.N} rows but {w.N} weights were given')

def weighted_log_likelihood(terms: np.ndarray, weights: np.ndarray) -> float:
    # zero weights drop an observation even where its term is -inf
    return float(np.sum(np.where(weights > 0, weights * terms, 0.0)))

def joint_log_density(
    model: ModelSpec,
    theta: Union[ParameterVector, ArrayLike],
    data: Dataset,
    w: ObservationWeights
) -> float:
    """log p(theta | alpha) + sum_i w_i * l_i(theta); -inf outside the support"""
    theta = as_array(theta)
    _check_lengths(model, theta, data, w)
    with np.errstate(all='ignore'):
        lp = model.log_prior_density(theta)
        if data.N:
            terms = model.log_likelihood_terms(theta, data)
            assert len(terms) == data.N
            lp += weighted_log_likelihood(terms, w.weights)
    if np.isnan(lp):
        raise EvaluationError(f'{model.name} log density is NaN', theta)
    return lp

def joint_log_density_and_gradient(
    model: ModelSpec,
    theta: np.ndarray,
    data: Dataset,
    w: ObservationWeights
) -> Tuple[float, np.ndarray]:
    lp = joint_log_density(model, theta, data, w)
    with np.errstate(all='ignore'):
        grad = model.log_prior_gradient(theta)
        if data.N:
            grad = grad + model.log_likelihood_gradient(theta, data, w.weights)
    return lp, grad

###############################################################################
# Simulation
###############################################################################
design_kinds = ('none', 'fixed', 'subsample', 'simulate', 'grouped')

@dataclass(frozen=True)
class DesignSource:
    """Where the covariate rows of a simulated dataset come from

    fixed: use the given matrix as is (it must have exactly n rows)
    subsample: draw n rows of the given matrix without replacement
    simulate: draw n x K standard-normal covariates
    grouped: a single column of balanced group labels 0..groups-1
    none: the model has no covariates
    """
    kind: str = 'none'
    X: Optional[np.ndarray] = None
    K: int = 0
    groups: int = 0

    def __post_init__(self):
        if self.kind not in design_kinds:
            raise ValueError(f'Design source {self.kind} not supported')
        if self.kind in ('fixed', 'subsample') and self.X is None:
            raise ValueError(f'{self.kind} design needs a covariate matrix')
        if self.kind == 'grouped' and self.groups < 1:
            raise ValueError('grouped design needs at least one group')
        if self.X is not None:
            object.__setattr__(self, 'X', np.asarray(self.X, dtype=float))
            object.__setattr__(self, 'K', self.X.shape[1])

    def draw(self, n: int, rng: np.random.Generator) -> Optional[np.ndarray]:
        if self.kind == 'none':
            return None
        if self.kind == 'simulate':
            return rng.standard_normal((n, self.K))
        if self.kind == 'grouped':
            return (np.arange(n) % self.groups).astype(float).reshape(-1, 1)
        rows = self.X.shape[0]
        if self.kind == 'fixed':
            if rows != n:
                raise ValueError(f'Fixed design has {rows} rows, {n} were requested')
            return self.X.copy()
        if rows < n:
            raise ValueError(f'Cannot subsample {n} rows without replacement from {rows} covariate rows')
        idx = rng.choice(rows, size=n, replace=False)
        return self.X[idx]

def default_design(model: ModelSpec, X: Optional[np.ndarray] = None) -> DesignSource:
    return model.design(X)

def simulate_dataset(
    model: ModelSpec,
    theta: Union[ParameterVector, ArrayLike],
    design: DesignSource,
    n: int,
    rng: np.random.Generator
) -> Dataset:
    """Draw n outcomes i.i.d. from p(y | theta) at covariates supplied by the design"""
    theta = as_array(theta)
    if len(theta) != model.dim or not model.in_support(theta):
        raise ValueError(f'theta={theta} is outside the support of {model.name}')
    if n == 0:
        return empty_dataset(model.n_covariates, id=f'sim:{design.kind}')
    X = design.draw(n, rng)
    with np.errstate(over='ignore', under='ignore', invalid='ignore'):
        y = model.simulate_outcomes(theta, X, n, rng)
    if np.isnan(y).any():
        raise EvaluationError(f'{model.name} simulator returned NaN', theta)
    # overflow saturates at the largest double, the mirror image of underflow to zero
    n_overflow = np.isinf(y).sum()
    if n_overflow:
        logger.debug(f'{n_overflow} simulated outcomes overflowed and were set to the largest finite double')
        y = np.clip(y, -np.finfo(float).max, np.finfo(float).max)
    return Dataset(y, X, id=f'sim:{design.kind}')
