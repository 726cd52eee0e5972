"""
Module implementing the No-U-Turn sampler with multinomial trajectory sampling, a generalized U-turn criterion,
dual averaging step size adaptation and windowed diagonal metric adaptation
"""
from dataclasses import asdict, dataclass, fields
from typing import Any, Callable, Dict, Optional, Tuple
import time

import numpy as np

from .. import logger
from ..constants import (
    adapt_base_window,
    adapt_init_buffer,
    adapt_term_buffer,
    dual_averaging,
    max_energy_error,
    sampler_defaults,
)
from ..model import (
    Dataset,
    EvaluationError,
    ModelSpec,
    ObservationWeights,
    joint_log_density_and_gradient
)
from .diagnostics import DrawMatrix, FitDiagnostics, diagnose

class InitializationError(RuntimeError):
    pass

class SamplerTimeoutError(RuntimeError):
    pass

@dataclass(frozen=True)
class SamplerConfig:
    backend: str = sampler_defaults['backend']
    chains: int = sampler_defaults['chains']
    warmup: int = sampler_defaults['warmup']
    draws: int = sampler_defaults['draws']
    max_tree_depth: int = sampler_defaults['max_tree_depth']
    target_accept: float = sampler_defaults['target_accept']
    init_radius: float = sampler_defaults['init_radius']
    max_init_retries: int = sampler_defaults['max_init_retries']
    rhat_max: float = sampler_defaults['rhat_max']
    ess_min: float = sampler_defaults['ess_min']
    max_divergent_frac: float = sampler_defaults['max_divergent_frac']
    timeout: Optional[float] = sampler_defaults['timeout']

    def __post_init__(self):
        if self.backend not in ('nuts', 'exact'):
            raise ValueError(f'Backend {self.backend} not supported')
        if self.chains < 2 and self.backend == 'nuts':
            raise ValueError('At least 2 chains are needed to diagnose a fit')
        if self.warmup < 0 or self.draws < 4:
            raise ValueError('warmup must be nonnegative and draws at least 4 per chain')
        if not 0 < self.target_accept < 1:
            raise ValueError('target_accept must lie in (0, 1)')
        if self.max_tree_depth < 1:
            raise ValueError('max_tree_depth must be at least 1')

    @classmethod
    def from_dict(cls, d: Optional[Dict[str, Any]]) -> 'SamplerConfig':
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f'Unknown sampler settings: {sorted(unknown)}')
        return cls(**d)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @property
    def total_draws(self) -> int:
        return self.chains * self.draws

###############################################################################
# Hamiltonian system
###############################################################################
class _Point:
    """Position, momentum, log density and gradient of one phase-space point"""
    __slots__ = ('theta', 'p', 'lp', 'grad')

    def __init__(self, theta, p, lp, grad):
        self.theta = theta
        self.p = p
        self.lp = lp
        self.grad = grad

class _Subtree:
    __slots__ = ('bck', 'fwd', 'proposal', 'log_weight', 'rho', 'valid', 'n_leapfrog', 'sum_accept', 'divergent')

    def __init__(self, bck, fwd, proposal, log_weight, rho, valid, n_leapfrog, sum_accept, divergent):
        self.bck = bck
        self.fwd = fwd
        self.proposal = proposal
        self.log_weight = log_weight
        self.rho = rho
        self.valid = valid
        self.n_leapfrog = n_leapfrog
        self.sum_accept = sum_accept
        self.divergent = divergent

class _Hamiltonian:
    def __init__(self, log_density: Callable, inv_metric: np.ndarray):
        self.log_density = log_density
        self.inv_metric = inv_metric
        self.n_bad = 0

    def evaluate(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        try:
            lp, grad = self.log_density(theta)
        except EvaluationError as e:
            self.n_bad += 1
            if self.n_bad == 1:
                logger.debug(f'Treating failed evaluation as zero density: {e}')
            return -np.inf, np.zeros_like(theta)
        if not np.isfinite(lp) or not np.all(np.isfinite(grad)):
            return -np.inf, np.zeros_like(theta)
        return lp, grad

    def kinetic(self, p: np.ndarray) -> float:
        return 0.5 * np.dot(p, self.inv_metric * p)

    def energy(self, point: _Point) -> float:
        if not np.isfinite(point.lp):
            return np.inf
        return -point.lp + self.kinetic(point.p)

    def sample_momentum(self, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal(len(self.inv_metric)) / np.sqrt(self.inv_metric)

    def leapfrog(self, point: _Point, eps: float) -> _Point:
        p_half = point.p + 0.5 * eps * point.grad
        theta = point.theta + eps * self.inv_metric * p_half
        lp, grad = self.evaluate(theta)
        p = p_half + 0.5 * eps * grad
        return _Point(theta, p, lp, grad)

    def p_sharp(self, p: np.ndarray) -> np.ndarray:
        return self.inv_metric * p

def _no_u_turn(h: _Hamiltonian, p_bck: np.ndarray, p_fwd: np.ndarray, rho: np.ndarray) -> bool:
    return np.dot(h.p_sharp(p_bck), rho) > 0 and np.dot(h.p_sharp(p_fwd), rho) > 0

def _merge_persists(h: _Hamiltonian, left: _Subtree, right: _Subtree, rho: np.ndarray) -> bool:
    """U-turn checks across two adjacent subtrees ordered backward (left) to forward (right)"""
    return (
        _no_u_turn(h, left.bck.p, right.fwd.p, rho) and
        _no_u_turn(h, left.bck.p, right.bck.p, left.rho + right.bck.p) and
        _no_u_turn(h, left.fwd.p, right.fwd.p, right.rho + left.fwd.p)
    )

###############################################################################
# Trajectory
###############################################################################
def _build_tree(
    h: _Hamiltonian,
    start: _Point,
    direction: int,
    depth: int,
    eps: float,
    H0: float,
    rng: np.random.Generator
) -> _Subtree:
    """Integrate 2**depth leapfrog steps from start, sampling a proposal uniformly by weight within the subtree"""
    if depth == 0:
        point = h.leapfrog(start, direction * eps)
        H = h.energy(point)
        if np.isnan(H):
            H = np.inf
        divergent = H - H0 > max_energy_error
        log_weight = H0 - H
        accept = 0.0 if np.isinf(H) else float(np.exp(min(0.0, H0 - H)))
        return _Subtree(point, point, point, log_weight, point.p.copy(), not divergent, 1, accept, divergent)

    inner = _build_tree(h, start, direction, depth - 1, eps, H0, rng)
    if not inner.valid:
        return inner
    edge = inner.fwd if direction > 0 else inner.bck
    outer = _build_tree(h, edge, direction, depth - 1, eps, H0, rng)
    n_leapfrog = inner.n_leapfrog + outer.n_leapfrog
    sum_accept = inner.sum_accept + outer.sum_accept
    if not outer.valid:
        outer.n_leapfrog, outer.sum_accept = n_leapfrog, sum_accept
        return outer

    log_weight = np.logaddexp(inner.log_weight, outer.log_weight)
    proposal = inner.proposal
    if np.log(rng.uniform()) < outer.log_weight - log_weight:
        proposal = outer.proposal

    left, right = (inner, outer) if direction > 0 else (outer, inner)
    rho = left.rho + right.rho
    valid = _merge_persists(h, left, right, rho)
    return _Subtree(left.bck, right.fwd, proposal, log_weight, rho, valid, n_leapfrog, sum_accept, False)

def _transition(
    h: _Hamiltonian,
    current: _Point,
    eps: float,
    max_depth: int,
    rng: np.random.Generator
) -> Tuple[_Point, float, bool, int]:
    """One NUTS transition; returns the new point, the mean acceptance statistic, divergence, and tree depth"""
    p0 = h.sample_momentum(rng)
    start = _Point(current.theta, p0, current.lp, current.grad)
    H0 = h.energy(start)
    tree = _Subtree(start, start, start, 0.0, p0.copy(), True, 0, 0.0, False)
    sample = start
    depth, n_leapfrog, sum_accept, divergent = 0, 0, 0.0, False
    while depth < max_depth:
        direction = 1 if rng.uniform() > 0.5 else -1
        edge = tree.fwd if direction > 0 else tree.bck
        new = _build_tree(h, edge, direction, depth, eps, H0, rng)
        n_leapfrog += new.n_leapfrog
        sum_accept += new.sum_accept
        depth += 1
        if not new.valid:
            divergent = new.divergent
            break

        # biased progressive sampling favours the newer half of the trajectory
        if np.log(rng.uniform()) < new.log_weight - tree.log_weight:
            sample = new.proposal
        left, right = (tree, new) if direction > 0 else (new, tree)
        rho = left.rho + right.rho
        persists = _merge_persists(h, left, right, rho)
        tree = _Subtree(
            left.bck, right.fwd, sample, np.logaddexp(tree.log_weight, new.log_weight), rho, persists, 0, 0.0, False
        )
        if not persists:
            break
    accept_stat = sum_accept / max(n_leapfrog, 1)
    return _Point(sample.theta, None, sample.lp, sample.grad), accept_stat, divergent, depth

###############################################################################
# Adaptation
###############################################################################
class _StepSizeAdapter:
    def __init__(self, target_accept: float):
        self.delta = target_accept
        self.gamma = dual_averaging['gamma']
        self.t0 = dual_averaging['t0']
        self.kappa = dual_averaging['kappa']

    def restart(self, eps: float):
        self.mu = np.log(10 * eps)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def learn(self, accept_stat: float) -> float:
        self.counter += 1
        accept_stat = min(1.0, accept_stat)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1 - eta) * self.s_bar + eta * (self.delta - accept_stat)
        x = self.mu - self.s_bar * np.sqrt(self.counter) / self.gamma
        x_eta = self.counter**(-self.kappa)
        self.x_bar = (1 - x_eta) * self.x_bar + x_eta * x
        return np.exp(x)

    def final(self) -> float:
        return np.exp(self.x_bar)

class _MetricAdapter:
    """Windowed variance estimation: an initial fast buffer, doubling slow windows, a terminal fast buffer"""
    def __init__(self, warmup: int, dim: int):
        init_buffer, term_buffer, base_window = adapt_init_buffer, adapt_term_buffer, adapt_base_window
        if init_buffer + term_buffer + base_window > warmup:
            init_buffer = int(0.15 * warmup)
            term_buffer = int(0.1 * warmup)
            base_window = warmup - (init_buffer + term_buffer)
        self.warmup = warmup
        self.init_buffer = init_buffer
        self.term_buffer = term_buffer
        self.window_size = base_window
        self.counter = 0
        self.next_window = init_buffer + base_window - 1
        self.dim = dim
        self._restart_estimator()

    def _restart_estimator(self):
        self.n = 0
        self.mean = np.zeros(self.dim)
        self.m2 = np.zeros(self.dim)

    def _in_window(self) -> bool:
        return self.init_buffer <= self.counter < self.warmup - self.term_buffer

    def _end_of_window(self) -> bool:
        return self.counter == self.next_window and self.counter != self.warmup

    def _compute_next_window(self):
        last = self.warmup - self.term_buffer - 1
        if self.next_window == last:
            return
        self.window_size *= 2
        self.next_window = self.counter + self.window_size
        if self.next_window != last and self.next_window + 2 * self.window_size >= self.warmup - self.term_buffer:
            self.next_window = last

    def learn(self, theta: np.ndarray) -> Optional[np.ndarray]:
        """Add a warmup draw; returns a new inverse metric at the end of a slow window"""
        if self._in_window():
            self.n += 1
            delta = theta - self.mean
            self.mean += delta / self.n
            self.m2 += delta * (theta - self.mean)
        result = None
        if self._end_of_window():
            self._compute_next_window()
            n = self.n
            var = self.m2 / (n - 1) if n > 1 else np.ones(self.dim)
            # shrink toward a small constant
            result = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            self._restart_estimator()
        self.counter += 1
        return result

def _find_reasonable_step_size(h: _Hamiltonian, point: _Point, eps: float, rng: np.random.Generator) -> float:
    """Double or halve eps until the acceptance probability of one leapfrog step crosses 0.8"""
    log_target = np.log(0.8)
    direction = 0
    for _ in range(100):
        p = h.sample_momentum(rng)
        start = _Point(point.theta, p, point.lp, point.grad)
        H0 = h.energy(start)
        H = h.energy(h.leapfrog(start, eps))
        delta_H = H0 - H if np.isfinite(H) else -np.inf
        if direction == 0:
            direction = 1 if delta_H > log_target else -1
        if direction == 1 and not delta_H > log_target:
            break
        if direction == -1 and not delta_H < log_target:
            break
        eps = eps * 2 if direction == 1 else eps / 2
        if eps > 1e7 or eps < 1e-12:
            break
    return float(np.clip(eps, 1e-12, 1e7))

###############################################################################
# Sampling
###############################################################################
def _initialize(
    h: _Hamiltonian,
    dim: int,
    cfg: SamplerConfig,
    rng: np.random.Generator
) -> _Point:
    for attempt in range(cfg.max_init_retries):
        theta = rng.uniform(-cfg.init_radius, cfg.init_radius, size=dim)
        lp, grad = h.evaluate(theta)
        if np.isfinite(lp):
            if attempt:
                logger.debug(f'Initialized after {attempt+1} attempts')
            return _Point(theta, None, lp, grad)
    raise InitializationError(
        f'Could not find a finite log density in {cfg.max_init_retries} uniform(-{cfg.init_radius}, '
        f'{cfg.init_radius}) initializations'
    )

def run_chain(
    log_density: Callable[[np.ndarray], Tuple[float, np.ndarray]],
    dim: int,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    deadline: Optional[float] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Run one adaptive chain; returns post-warmup draws (draws x dim) and their divergence flags"""
    h = _Hamiltonian(log_density, np.ones(dim))
    point = _initialize(h, dim, cfg, rng)
    eps = _find_reasonable_step_size(h, point, 1.0, rng)
    step_adapter = _StepSizeAdapter(cfg.target_accept)
    step_adapter.restart(eps)
    metric_adapter = _MetricAdapter(cfg.warmup, dim)

    draws = np.empty((cfg.draws, dim))
    divergent = np.zeros(cfg.draws, dtype=bool)
    n_warmup_divergent = 0
    for it in range(cfg.warmup + cfg.draws):
        if deadline is not None and time.monotonic() > deadline:
            raise SamplerTimeoutError(f'Sampler exceeded its {cfg.timeout}s time limit at iteration {it}')
        point, accept_stat, is_divergent, _ = _transition(h, point, eps, cfg.max_tree_depth, rng)
        if it < cfg.warmup:
            n_warmup_divergent += is_divergent
            eps = step_adapter.learn(accept_stat)
            inv_metric = metric_adapter.learn(point.theta)
            if inv_metric is not None:
                h.inv_metric = inv_metric
                eps = _find_reasonable_step_size(h, point, eps, rng)
                step_adapter.restart(eps)
            if it == cfg.warmup - 1 and step_adapter.counter:
                eps = step_adapter.final()
        else:
            draws[it - cfg.warmup] = point.theta
            divergent[it - cfg.warmup] = is_divergent
    if n_warmup_divergent > cfg.warmup // 2 and cfg.warmup:
        logger.debug(f'{n_warmup_divergent} of {cfg.warmup} warmup transitions diverged')
    if h.n_bad:
        logger.debug(f'{h.n_bad} log density evaluations failed and were treated as zero density')
    return draws, divergent

def sample_posterior(
    model: ModelSpec,
    data: Dataset,
    w: ObservationWeights,
    cfg: SamplerConfig,
    rng: np.random.Generator
) -> Tuple[DrawMatrix, FitDiagnostics]:
    """Draw cfg.chains x cfg.draws post-warmup draws from p(theta | alpha, data, w)"""
    if data.N != w.N:
        raise ValueError(f'Dataset has {data.N} rows but {w.N} weights were given')
    seed = int(rng.integers(2**63))
    chain_rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(cfg.chains)]
    deadline = None if cfg.timeout is None else time.monotonic() + cfg.timeout

    def log_density(theta):
        return joint_log_density_and_gradient(model, theta, data, w)

    all_draws, all_divergent = [], []
    for chain_rng in chain_rngs:
        draws, divergent = run_chain(log_density, model.dim, cfg, chain_rng, deadline=deadline)
        all_draws.append(draws)
        all_divergent.append(divergent)

    draw_matrix = DrawMatrix(
        np.vstack(all_draws),
        np.repeat(np.arange(cfg.chains), cfg.draws),
        warmup_discarded=cfg.warmup * cfg.chains,
        seed=seed,
        divergent=np.concatenate(all_divergent),
        names=model.param_names
    )
    diagnostics = diagnose(draw_matrix, cfg.rhat_max, cfg.ess_min, cfg.max_divergent_frac)
    return draw_matrix, diagnostics
