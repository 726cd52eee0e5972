import os

import numpy as np
import pandas as pd
import pytest
import yaml

from src.constants import calibration_filename, error_filename, log_gamma_filename, manifest_filename, ranks_filename
from src.experiment import (
    Cell,
    ConfigError,
    ExperimentConfig,
    _precon_source,
    build_model,
    expand_grid,
    load_source_data,
    run_experiment,
    summarize,
    summarize_log_gamma,
    theta_from_config
)
from src.util import config_hash, load_json

def oracle_config(output_dir: str) -> dict:
    return {
        'root_seed': 5,
        'output_dir': output_dir,
        'model': {'kind': 'conjugate_normal', 'mu0': 0.0, 'sd0': None, 'sigma': 1.0,
                  'data': {'theta': {'mu': 0.5}, 'rows': 100}},
        'precondition': {'source': 'real-subset', 'N': [2], 'T': 2, 'scaling': 'MS'},
        'sbc': {'modes': ['implicit'], 'J': 20, 'n_obs': 5, 'S': 49},
        'sampler': {'backend': 'exact', 'chains': 1, 'draws': 100},
        'stats': {'level': 0.01, 'n_sims': 1000},
    }

def write_config(path, cfg: dict) -> str:
    with open(path, 'w') as file:
        yaml.safe_dump(cfg, file)
    return str(path)

def test_config_hash_ignores_key_order():
    cfg = oracle_config('/tmp/out')
    permuted = {key: cfg[key] for key in reversed(list(cfg))}
    permuted['model'] = {key: cfg['model'][key] for key in reversed(list(cfg['model']))}
    assert config_hash(cfg) == config_hash(permuted)
    assert ExperimentConfig.from_dict(cfg).hash == ExperimentConfig.from_dict(permuted).hash
    assert config_hash(cfg) != config_hash({**cfg, 'root_seed': 6})

def test_config_validation():
    cfg = oracle_config('/tmp/out')
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**cfg, 'plots': {}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**cfg, 'model': {'kind': 'poisson'}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**cfg, 'sampler': {'chainz': 2}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**cfg, 'precondition': {'N': [2], 'scaling': 'PS'}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**cfg, 'stats': {'level': 2.0}})

def test_expand_grid():
    cfg = ExperimentConfig.from_dict({
        'model': {'kind': 'gamma_glm', 'K': 2, 'presets': ['vague']},
        'precondition': {'source': 'real-subset', 'N': [4, 8], 'scaling': ['MS', 'PS'], 'actual_size': 20},
        'sbc': {'modes': ['traditional', 'implicit']},
    })
    cells = expand_grid(cfg)
    assert len(cells) == 5
    assert cells[0].name == 'vague/traditional'
    assert 'vague/implicit/real-subset/N8/PS' in [cell.name for cell in cells]

def test_traditional_cell_on_flat_prior_is_a_config_error():
    cfg = ExperimentConfig.from_dict({'model': {'kind': 'gamma_glm', 'presets': ['flat']},
                                      'sbc': {'modes': ['traditional']}})
    with pytest.raises(ConfigError, match='improper'):
        expand_grid(cfg)

def test_power_scaled_source():
    cfg = ExperimentConfig.from_dict({**oracle_config('/tmp/out'),
                                      'precondition': {'N': [5], 'scaling': 'PS', 'actual_size': 20}})
    model = build_model(cfg.model)
    data = load_source_data(cfg, model)
    src, weights = _precon_source(cfg, Cell('default', 'implicit', 'real-subset', 5, 'PS'), model, data)
    assert src.N == 20 and weights.N == 20
    assert weights.tau == pytest.approx(0.25)

def test_theta_from_config():
    model = build_model({'kind': 'random_intercept', 'G': 3})
    theta = theta_from_config(model, {'mu': 1.0, 'log_between_sd': 0.0, 'log_residual_sd': -1.0, 'z*': 0.5})
    np.testing.assert_allclose(theta, [1.0, 0.0, -1.0, 0.5, 0.5, 0.5])
    with pytest.raises(ConfigError):
        theta_from_config(model, {'mu': 1.0})
    gamma_glm = build_model({'kind': 'gamma_glm', 'K': 2}, 'vague')
    np.testing.assert_allclose(theta_from_config(gamma_glm, {'intercept': 1.0, 'coef': 0.1, 'shape': 1.0}),
                               [1.0, 0.1, 0.1, 0.0])

def test_summarize_log_gamma():
    summary = summarize_log_gamma(np.array([-1.0, -3.0]))
    assert summary['median'] == pytest.approx(-2.0)
    assert summary['q05'] < summary['q17'] < summary['median'] < summary['q83'] < summary['q95']
    assert summary['n'] == 2

###############################################################################
# Runs
###############################################################################
def test_conjugate_oracle_run(tmp_path):
    out = str(tmp_path / 'out')
    assert run_experiment(write_config(tmp_path / 'cfg.yaml', oracle_config(out)), jobs=1) == 0

    cell_dir = f'{out}/default/implicit/real-subset/N2/MS'
    ranks = pd.read_csv(f'{cell_dir}/{ranks_filename}')
    assert len(ranks) == 2 * 20 and ranks['rank'].between(0, 49).all()
    calibration = load_json(f'{cell_dir}/{calibration_filename}')
    assert calibration['verdict'] == 'calibrated'
    assert calibration['n_failed'] == 0 and calibration['n_not_converged'] == 0
    assert calibration['J_total'] == 40
    log_gamma = pd.read_csv(f'{cell_dir}/{log_gamma_filename}', dtype={'t': str})
    assert set(log_gamma['t']) == {'0', '1', 'all'}
    assert os.path.exists(f'{cell_dir}/priors/t1/draws.csv')

    manifest = load_json(f'{out}/{manifest_filename}')
    assert manifest['cells']['default/implicit/real-subset/N2/MS']['status'] == 'done'
    assert manifest['root_seed'] == 5 and 'finished' in manifest
    assert os.path.exists(f'{out}/summary.csv')

    summary = summarize(out)
    assert len(summary) == 1 and summary['n'].iloc[0] == 2

def test_runs_are_reproducible(tmp_path):
    outputs = []
    for name in ('first', 'second'):
        out = str(tmp_path / name)
        assert run_experiment(write_config(tmp_path / f'{name}.yaml', oracle_config(out)), jobs=1) == 0
        with open(f'{out}/default/implicit/real-subset/N2/MS/{ranks_filename}', 'rb') as file:
            outputs.append(file.read())
    assert outputs[0] == outputs[1]

def test_resume_skips_finished_cells(tmp_path):
    out = str(tmp_path / 'out')
    path = write_config(tmp_path / 'cfg.yaml', oracle_config(out))
    assert run_experiment(path, jobs=1) == 0
    ranks_path = f'{out}/default/implicit/real-subset/N2/MS/{ranks_filename}'
    mtime = os.stat(ranks_path).st_mtime_ns
    assert run_experiment(path, jobs=1, resume=True) == 0
    assert os.stat(ranks_path).st_mtime_ns == mtime

def test_flat_prior_traditional_run_exits_with_config_error(tmp_path):
    out = str(tmp_path / 'out')
    cfg = {'output_dir': out, 'model': {'kind': 'gamma_glm', 'presets': ['flat']}, 'sbc': {'modes': ['traditional']}}
    assert run_experiment(write_config(tmp_path / 'cfg.yaml', cfg)) == 1
    error = load_json(f'{out}/{error_filename}')
    assert error['error_type'] == 'ConfigError' and 'improper' in error['message']

def test_missing_config_file(tmp_path):
    assert run_experiment(str(tmp_path / 'missing.yaml')) == 1
