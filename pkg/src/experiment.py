"""
Module to run configured SBC experiments over a grid of prior presets, preconditioning sources, sizes and scaling
modes, and to summarize their log-gamma scores
"""
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Dict, List, Optional
import os
import time
import traceback

import numpy as np
import pandas as pd

from . import OUTPUT_ROOT, logger
from .calibstats import calibrate, fractional_ranks, gamma_threshold, log_gamma_score
from .constants import (
    calibration_filename,
    ecdf_filename,
    error_filename,
    gamma_glm_prior_presets,
    log_gamma_filename,
    manifest_filename,
    ranks_filename,
    sbc_defaults,
    stats_defaults,
    summary_filename,
    summary_quantiles,
)
from .inference import SamplerConfig
from .model import Dataset, ModelSpec, load_dataset, simulate_dataset
from .models import (
    GammaGlmModel,
    bodyfat_like_source,
    external_simulators,
    make_beta_binomial,
    make_conjugate_normal,
    make_gamma_glm,
    make_random_intercept
)
from .precondition import (
    ParameterSplit,
    PreconSource,
    build_prior_family,
    power_scale_factor,
    save_implicit_prior
)
from .sbc import DataPolicy, RankMatrix, SbcConfig, run_sbc_implicit, run_sbc_split, run_sbc_traditional
from .util import (
    child_rng,
    child_seed,
    config_hash,
    load_json,
    load_yaml,
    make_dir,
    save_frame,
    save_json,
    seed_to_int
)

class ConfigError(ValueError):
    pass

model_kinds = ('gamma_glm', 'conjugate_normal', 'beta_binomial', 'random_intercept')
sbc_modes = ('traditional', 'implicit', 'split')
scaling_modes = ('MS', 'PS')

###############################################################################
# Config
###############################################################################
def _as_list(value) -> list:
    if value is None:
        return []
    return list(value) if isinstance(value, (list, tuple)) else [value]

@dataclass
class ExperimentConfig:
    model: Dict[str, Any]
    precondition: Dict[str, Any]
    sbc: Dict[str, Any]
    sampler: SamplerConfig
    stats: Dict[str, Any]
    output_dir: str
    root_seed: int
    raw: Dict[str, Any] = field(default_factory=dict)
    base_dir: str = '.'

    @classmethod
    def from_dict(cls, cfg: Dict[str, Any], base_dir: str = '.') -> 'ExperimentConfig':
        if not isinstance(cfg, dict):
            raise ConfigError('The config must be a mapping')
        unknown = set(cfg) - {'model', 'precondition', 'sbc', 'sampler', 'stats', 'output_dir', 'root_seed'}
        if unknown:
            raise ConfigError(f'Unknown config sections: {sorted(unknown)}')
        model = dict(cfg.get('model') or {})
        precondition = dict(cfg.get('precondition') or {})
        sbc = {**sbc_defaults, **(cfg.get('sbc') or {})}
        stats = {**stats_defaults, **(cfg.get('stats') or {})}
        try:
            sampler = SamplerConfig.from_dict(cfg.get('sampler'))
        except (TypeError, ValueError) as e:
            raise ConfigError(f'Invalid sampler block: {e}') from e

        if model.get('kind') not in model_kinds:
            raise ConfigError(f'model.kind must be one of {model_kinds}, got {model.get("kind")}')
        modes = _as_list(sbc.get('modes', 'implicit'))
        if not modes or set(modes) - set(sbc_modes):
            raise ConfigError(f'sbc.modes must be a nonempty subset of {sbc_modes}, got {modes}')
        sbc['modes'] = modes
        if set(modes) - {'traditional'}:
            if not _as_list(precondition.get('N')):
                raise ConfigError('precondition.N must be a nonempty list of sizes')
            scaling = _as_list(precondition.get('scaling', 'MS'))
            if set(scaling) - set(scaling_modes):
                raise ConfigError(f'precondition.scaling must be a subset of {scaling_modes}, got {scaling}')
            if 'PS' in scaling and not precondition.get('actual_size'):
                raise ConfigError('Power scaling (PS) needs precondition.actual_size')
        if not 0 < stats['level'] < 1:
            raise ConfigError(f'stats.level must lie in (0, 1), got {stats["level"]}')
        path = (model.get('data') or {}).get('path')
        if path is not None:
            path = path if os.path.isabs(path) else os.path.join(base_dir, path)
            if not os.path.exists(path):
                raise ConfigError(f'Data file {path} does not exist')
            model['data'] = {**model['data'], 'path': path}

        output_dir = cfg.get('output_dir', 'experiment')
        if not os.path.isabs(output_dir):
            output_dir = os.path.join(OUTPUT_ROOT, output_dir)
        return cls(
            model, precondition, sbc, sampler, stats, output_dir, int(cfg.get('root_seed', 0)), raw=cfg,
            base_dir=base_dir
        )

    @classmethod
    def load(cls, path: str) -> 'ExperimentConfig':
        if not os.path.exists(path):
            raise ConfigError(f'Config file {path} does not exist')
        try:
            cfg = load_yaml(path)
        except Exception as e:
            raise ConfigError(f'Could not parse {path}: {e}') from e
        return cls.from_dict(cfg, base_dir=os.path.dirname(os.path.abspath(path)))

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

###############################################################################
# Models and data
###############################################################################
def model_presets(model_cfg: Dict[str, Any]) -> List[str]:
    if model_cfg['kind'] != 'gamma_glm':
        return ['default']
    presets = _as_list(model_cfg.get('presets', 'weakly-informative'))
    bad = set(presets) - set(gamma_glm_prior_presets)
    if bad:
        raise ConfigError(f'Unknown prior presets {sorted(bad)}')
    return presets

def build_model(model_cfg: Dict[str, Any], preset: str = 'default') -> ModelSpec:
    kind = model_cfg['kind']
    try:
        if kind == 'gamma_glm':
            return make_gamma_glm(int(model_cfg.get('K', 4)), preset)
        if kind == 'conjugate_normal':
            sd0 = model_cfg.get('sd0', 1.0)
            return make_conjugate_normal(model_cfg.get('mu0', 0.0), np.inf if sd0 is None else float(sd0),
                                         model_cfg.get('sigma', 1.0))
        if kind == 'beta_binomial':
            return make_beta_binomial(model_cfg.get('a1', 1.0), model_cfg.get('a2', 1.0), model_cfg.get('trials', 1))
        priors = {k: tuple(v) for k, v in (model_cfg.get('priors') or {}).items()}
        return make_random_intercept(int(model_cfg.get('G', 5)), priors=priors, fixed=model_cfg.get('fixed'))
    except ValueError as e:
        raise ConfigError(f'Invalid model block: {e}') from e

def theta_from_config(model: ModelSpec, value) -> np.ndarray:
    """Unconstrained parameter vector from a list, a gamma regression value dict, or a dict of parameter names

    Names ending in '*' set every parameter with that prefix.
    """
    if isinstance(value, (list, tuple)):
        theta = np.asarray(value, dtype=float)
    elif isinstance(model, GammaGlmModel) and set(value) <= {'intercept', 'coef', 'shape'}:
        theta = model.theta_c(value)
    else:
        theta = np.full(model.dim, np.nan)
        for name, v in value.items():
            if name.endswith('*'):
                idx = [i for i, p in enumerate(model.param_names) if p.startswith(name[:-1])]
            elif name in model.param_names:
                idx = [model.param_names.index(name)]
            else:
                raise ConfigError(f'{model.name} has no parameter named {name}')
            theta[idx] = v
    if len(theta) != model.dim or not np.all(np.isfinite(theta)):
        raise ConfigError(f'theta must give all {model.dim} parameters of {model.name}: {list(model.param_names)}')
    return theta

def load_source_data(cfg: ExperimentConfig, model: ModelSpec) -> Optional[Dataset]:
    """Real data from a CSV, or a synthetic stand-in"""
    data_cfg = cfg.model.get('data') or {}
    rng = child_rng(cfg.root_seed, 'source-data')
    if cfg.model['kind'] == 'gamma_glm':
        return bodyfat_like_source(data_cfg.get('path'), rows=int(data_cfg.get('rows', 250)), K=model.n_covariates,
                                   rng=rng)
    if data_cfg.get('path'):
        return load_dataset(data_cfg['path'])
    if 'theta' not in data_cfg:
        return None
    theta = theta_from_config(model, data_cfg['theta'])
    data = simulate_dataset(model, theta, model.design(), int(data_cfg.get('rows', 250)), rng)
    return Dataset(data.y, data.X, id='synthetic')

###############################################################################
# Grid
###############################################################################
@dataclass(frozen=True)
class Cell:
    preset: str
    mode: str
    source: Optional[str] = None
    N: Optional[int] = None
    scaling: Optional[str] = None

    @property
    def name(self) -> str:
        if self.mode == 'traditional':
            return f'{self.preset}/traditional'
        return f'{self.preset}/{self.mode}/{self.source}/N{self.N}/{self.scaling}'

    def to_dict(self) -> Dict[str, Any]:
        return {'preset': self.preset, 'mode': self.mode, 'source': self.source, 'N': self.N, 'scaling': self.scaling}

def expand_grid(cfg: ExperimentConfig) -> List[Cell]:
    """Cells over preset x mode x source x N x scaling; traditional cells have no preconditioning axes"""
    cells = []
    for preset in model_presets(cfg.model):
        for mode in cfg.sbc['modes']:
            if mode == 'traditional':
                if not build_model(cfg.model, preset).prior.proper:
                    raise ConfigError(
                        f'Traditional SBC needs a proper prior; preset {preset} has an improper prior'
                    )
                cells.append(Cell(preset, mode))
                continue
            for source in _as_list(cfg.precondition.get('source', 'real-subset')):
                for N in _as_list(cfg.precondition['N']):
                    for scaling in _as_list(cfg.precondition.get('scaling', 'MS')):
                        cells.append(Cell(preset, mode, source, int(N), scaling))
    return cells

###############################################################################
# Cells
###############################################################################
def _precon_source(cfg: ExperimentConfig, cell: Cell, model: ModelSpec, data: Optional[Dataset]):
    """Preconditioning source and weights of a cell; PS keeps the actual size fixed and uses N as information size"""
    pc = cfg.precondition
    n_actual = int(pc['actual_size']) if cell.scaling == 'PS' else cell.N
    weights = power_scale_factor(n_actual, cell.N) if cell.scaling == 'PS' else None
    kwargs = {'kind': cell.source, 'N': n_actual, 'T': int(pc.get('T', 1)), 'source_data': data}
    if cell.source == 'simulate-likelihood':
        kwargs['theta_c'] = theta_from_config(model, pc.get('theta_c', {}))
    if cell.source == 'external-simulator':
        name = pc.get('simulator', 'lognormal-regression')
        if name not in external_simulators:
            raise ConfigError(f'Unknown external simulator {name}. Choose from {list(external_simulators)}')
        kwargs['simulator'] = external_simulators[name]
        kwargs['psi_c'] = dict(pc.get('psi_c') or {})
    if cell.source in ('real-subset', 'real-bootstrap') and data is None:
        raise ConfigError(f'{cell.source} preconditioning needs model.data (a path or a simulation theta)')
    try:
        return PreconSource(**kwargs), weights
    except ValueError as e:
        raise ConfigError(str(e)) from e

def _split(cfg: ExperimentConfig, model: ModelSpec) -> Optional[ParameterSplit]:
    split_cfg = cfg.sbc.get('split')
    if not split_cfg:
        return None
    mode = split_cfg.get('uninformed_mode', 'sample-original-prior')
    split = ParameterSplit.from_names(model, split_cfg['informed'], 'sample-original-prior')
    if mode != 'fix-constant':
        return split
    theta_u_c = split_cfg.get('theta_u_c')
    if theta_u_c is None:
        if 'theta_c' not in cfg.precondition:
            raise ConfigError('fix-constant needs sbc.split.theta_u_c or precondition.theta_c')
        theta_u_c = theta_from_config(model, cfg.precondition['theta_c'])[list(split.uninformed)]
    return ParameterSplit(split.informed, split.uninformed, 'fix-constant', tuple(theta_u_c))

def _sbc_config(cfg: ExperimentConfig, model: ModelSpec, seed: int, data: Optional[Dataset], jobs) -> SbcConfig:
    s = cfg.sbc
    quantities = tuple(_as_list(s.get('quantities'))) or model.param_names
    policy = DataPolicy(**(s.get('data_policy') or {}))
    design = model.design(None if data is None else data.X)
    return SbcConfig(
        J=int(s['J']), n_obs=int(s['n_obs']), S=int(s['S']), quantities=quantities, data_policy=policy,
        split=_split(cfg, model), root_seed=seed, sampler=cfg.sampler, jobs=jobs, design=design
    )

def log_gamma_table(rm: RankMatrix, seed: int, threshold_fn) -> pd.DataFrame:
    """log gamma per preconditioning dataset and quantity, plus the pooled value (t = 'all')"""
    rows = []
    rng = child_rng(seed, 'per-t')
    for t in range(rm.T):
        for p, quantity in enumerate(rm.quantities):
            u = fractional_ranks(rm.ranks[t, :, p], rm.S, rng)
            rows.append({'t': str(t), 'quantity': quantity, 'log_gamma': log_gamma_score(u),
                         'threshold': threshold_fn(rm.J)})
    return pd.DataFrame(rows)

def run_cell(
    cfg: ExperimentConfig,
    cell: Cell,
    cell_dir: str,
    jobs: Optional[int],
    threshold_fn
) -> Dict[str, Any]:
    """Precondition (unless traditional), run SBC, compute calibration statistics and write the cell's files"""
    model = build_model(cfg.model, cell.preset)
    data = load_source_data(cfg, model)
    seed = seed_to_int(child_seed(cfg.root_seed, cell.name))
    sbc_cfg = _sbc_config(cfg, model, seed, data, jobs)
    timings = {}

    start = time.perf_counter()
    if cell.mode == 'traditional':
        rm = run_sbc_traditional(model, sbc_cfg)
        timings['sbc'] = time.perf_counter() - start
    else:
        src, weights = _precon_source(cfg, cell, model, data)
        split = sbc_cfg.split if cell.mode == 'split' else None
        if cell.mode == 'split' and split is None:
            raise ConfigError('split mode needs sbc.split')
        priors = build_prior_family(model, src, weights, cfg.sampler, seed, split=split, processes=jobs)
        for t, ip in enumerate(priors):
            save_implicit_prior(ip, f'{cell_dir}/priors/t{t}')
        timings['precondition'] = time.perf_counter() - start

        start = time.perf_counter()
        require = cfg.sbc.get('require_converged_priors', True)
        if cell.mode == 'split':
            rm = run_sbc_split(model, priors, sbc_cfg, require_converged=require)
        else:
            rm = run_sbc_implicit(
                model, priors, sbc_cfg, require_converged=require,
                condition_on_preconditioning=cfg.sbc.get('condition_on_preconditioning', True)
            )
        timings['sbc'] = time.perf_counter() - start

    start = time.perf_counter()
    save_frame(rm.to_frame(), f'{cell_dir}/{ranks_filename}')
    J_total = rm.T * rm.J
    threshold = threshold_fn(J_total)
    results = calibrate(
        {q: rm.pooled(q) for q in rm.quantities}, rm.S, cfg.stats['level'], cfg.stats['n_sims'],
        rng=child_rng(seed, 'stats'), threshold=threshold
    )
    per_t = log_gamma_table(rm, seed, threshold_fn)
    pooled = pd.DataFrame([
        {'t': 'all', 'quantity': q, 'log_gamma': res.log_gamma, 'threshold': threshold} for q, res in results.items()
    ])
    save_frame(pd.concat([per_t, pooled], ignore_index=True), f'{cell_dir}/{log_gamma_filename}')
    save_frame(pd.concat([res.to_frame() for res in results.values()]), f'{cell_dir}/{ecdf_filename}')
    timings['stats'] = time.perf_counter() - start

    calibration = {
        'cell': cell.to_dict(),
        'model': model.name,
        'J_total': J_total,
        'S': rm.S,
        'level': cfg.stats['level'],
        'threshold_log_gamma': threshold,
        'quantities': {q: res.to_dict() for q, res in results.items()},
        'verdict': 'miscalibrated' if any(res.reject for res in results.values()) else 'calibrated',
        'n_not_converged': int((~rm.converged).sum()),
        'n_failed': int(rm.failed.sum()),
        'n_redraws': int(rm.n_redraws.sum()),
        'n_censored': int(rm.n_censored.sum()),
        'timings': timings,
    }
    save_json(calibration, f'{cell_dir}/{calibration_filename}')
    logger.info(f'{cell.name}: {calibration["verdict"]}, min log gamma '
                f'{min(res.log_gamma for res in results.values()):.2f} (threshold {threshold:.2f})')
    return {'timings': timings, 'verdict': calibration['verdict']}

###############################################################################
# Experiment
###############################################################################
class _Thresholds:
    """Memoized Monte-Carlo thresholds, one per number of ranks"""
    def __init__(self, root_seed: int, level: float, n_sims: int):
        self.root_seed, self.level, self.n_sims = root_seed, level, n_sims
        self.cache = {}

    def __call__(self, J: int) -> float:
        if J not in self.cache:
            rng = child_rng(self.root_seed, 'threshold', J)
            self.cache[J] = gamma_threshold(J, self.level, self.n_sims, rng)
        return self.cache[J]

def _now() -> str:
    return datetime.now().isoformat(timespec='seconds')

def run_experiment(config_path: str, jobs: Optional[int] = None, resume: bool = False) -> int:
    """Run every cell of the configured grid; returns the exit status (0 ok, 1 config error, 2 runtime failure)"""
    output_dir = None
    current = None
    try:
        cfg = ExperimentConfig.load(config_path)
        output_dir = cfg.output_dir
        cells = expand_grid(cfg)
    except ConfigError as e:
        logger.error(f'Config error: {e}')
        _write_error(output_dir, 'ConfigError', str(e), None)
        return 1

    make_dir(output_dir)
    manifest_path = f'{output_dir}/{manifest_filename}'
    manifest = {
        'config_path': os.path.abspath(config_path),
        'config_hash': cfg.hash,
        'root_seed': cfg.root_seed,
        'started': _now(),
        'cells': {},
    }
    if resume and os.path.exists(manifest_path):
        previous = load_json(manifest_path)
        if previous.get('config_hash') == cfg.hash:
            manifest['cells'] = {k: v for k, v in previous['cells'].items() if v.get('status') == 'done'}
            logger.info(f'Resuming: {len(manifest["cells"])} of {len(cells)} cells already done')
        else:
            logger.warning('Config changed since the previous run, starting over')

    threshold_fn = _Thresholds(cfg.root_seed, cfg.stats['level'], cfg.stats['n_sims'])
    try:
        for cell in cells:
            current = cell.name
            if cell.name in manifest['cells']:
                continue
            logger.info(f'Running cell {cell.name}')
            cell_dir = f'{output_dir}/{cell.name}'
            started = _now()
            result = run_cell(cfg, cell, cell_dir, jobs, threshold_fn)
            manifest['cells'][cell.name] = {
                'status': 'done',
                'started': started,
                'finished': _now(),
                'stage_seconds': result['timings'],
                'verdict': result['verdict'],
                'artifacts': [f'{cell.name}/{fname}' for fname in
                              (ranks_filename, calibration_filename, log_gamma_filename, ecdf_filename)],
            }
            save_json(manifest, manifest_path)
        summarize(output_dir)
    except ConfigError as e:
        logger.error(f'Config error in cell {current}: {e}')
        _write_error(output_dir, 'ConfigError', str(e), current)
        return 1
    except Exception as e:
        logger.error(f'Cell {current} failed: {type(e).__name__}: {e}')
        extra = {'rejection_rate': e.rejection_rate} if hasattr(e, 'rejection_rate') else {}
        _write_error(output_dir, type(e).__name__, str(e), current, trace=traceback.format_exc(), **extra)
        return 2
    manifest['finished'] = _now()
    save_json(manifest, manifest_path)
    return 0

def _write_error(
    output_dir: Optional[str],
    error_type: str,
    message: str,
    cell: Optional[str],
    trace: str = '',
    **extra
):
    """Machine-readable error report next to the results"""
    if output_dir is None:
        return
    report = {'error_type': error_type, 'message': message, 'cell': cell, 'time': _now(), **extra}
    if trace:
        report['traceback'] = trace
    save_json(report, f'{output_dir}/{error_filename}')

###############################################################################
# Summary
###############################################################################
def summarize_log_gamma(values: np.ndarray) -> Dict[str, float]:
    """Median with two-tailed 66% and 90% intervals"""
    values = np.asarray(values, dtype=float)
    summary = {name: float(np.quantile(values, q)) for name, q in summary_quantiles.items()}
    summary['n'] = int(len(values))
    return summary

def summarize(results_dir: str) -> pd.DataFrame:
    """Aggregate per-dataset log gamma across parameters and repetitions for every cell under results_dir"""
    rows = []
    for dirpath, _, filenames in sorted(os.walk(results_dir)):
        if log_gamma_filename not in filenames:
            continue
        df = pd.read_csv(f'{dirpath}/{log_gamma_filename}', dtype={'t': str})
        per_t = df[df['t'] != 'all']
        if per_t.empty:
            per_t = df
        cell = {}
        if os.path.exists(f'{dirpath}/{calibration_filename}'):
            calibration = load_json(f'{dirpath}/{calibration_filename}')
            cell = {**calibration['cell'], 'verdict': calibration['verdict'],
                    'pooled_threshold': calibration['threshold_log_gamma']}
        rows.append({
            'cell': os.path.relpath(dirpath, results_dir),
            **cell,
            **summarize_log_gamma(per_t['log_gamma']),
            'threshold': float(per_t['threshold'].iloc[0]),
        })
    summary = pd.DataFrame(rows)
    if not summary.empty:
        save_frame(summary, f'{results_dir}/{summary_filename}.csv')
        save_json({'cells': rows}, f'{results_dir}/{summary_filename}.json')
    logger.info(f'Summarized {len(rows)} cells in {results_dir}')
    return summary
