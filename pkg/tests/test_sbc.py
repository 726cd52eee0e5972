import numpy as np
import pytest

from src.calibstats import calibrate, rank_chisq_test
from src.inference import DrawMatrix, FitDiagnostics, InitializationError, SamplerConfig
from src.inference.diagnostics import exact_diagnostics
from src.model import Dataset, ImproperPriorError, ObservationWeights, simulate_dataset
from src.models import ConjugateNormalModel, RandomInterceptModel
from src.precondition import ImplicitPrior, ParameterSplit, PreconSource, SplitModel, build_prior_family
from src.sbc import (
    DataPolicy,
    RankMatrix,
    RejectionExhaustedError,
    SbcConfig,
    apply_data_policy,
    compute_rank,
    run_sbc_implicit,
    run_sbc_split,
    run_sbc_traditional
)

EXACT = SamplerConfig(backend='exact', chains=1)

@pytest.fixture
def implicit_priors(normal_model, shifted_data, exact_cfg):
    src = PreconSource('real-subset', N=20, T=4, source_data=shifted_data)
    return build_prior_family(normal_model, src, None, exact_cfg, root_seed=3)

###############################################################################
# Ranks and data policies
###############################################################################
def test_compute_rank(rng):
    values = np.array([0.1, 0.5, 0.9, 1.3])
    assert compute_rank(1.0, values) == 3
    assert compute_rank(-5.0, values) == 0
    assert compute_rank(5.0, values) == 4
    ties = np.full(20, 2.0)
    assert compute_rank(2.0, ties) == 0
    assert 0 <= compute_rank(2.0, ties, rng) <= 20

def test_censor_policy():
    data = Dataset([0.0, 1e-20, 0.5])
    censored = apply_data_policy(data, DataPolicy('censor', threshold=1e-16))
    np.testing.assert_array_equal(censored.y, [1e-16, 1e-16, 0.5])
    assert np.all(censored.y >= 1e-16)
    assert apply_data_policy(data, DataPolicy()) is data

def test_reject_redraw_policy():
    bad, good = Dataset([0.0, 1.0]), Dataset([2.0, 1.0])
    calls = []

    def redraw():
        calls.append(1)
        return good if len(calls) == 3 else bad

    out = apply_data_policy(bad, DataPolicy('reject-redraw', threshold=1e-16), redraw_fn=redraw)
    assert out is good and len(calls) == 3
    assert apply_data_policy(good, DataPolicy('reject-redraw'), redraw_fn=redraw) is good

def test_reject_redraw_exhaustion():
    bad = Dataset([0.0])
    with pytest.raises(RejectionExhaustedError) as e:
        apply_data_policy(bad, DataPolicy('reject-redraw', max_redraws=5), redraw_fn=lambda: bad)
    assert e.value.rejection_rate == 1.0

def test_data_policy_validation():
    with pytest.raises(ValueError):
        DataPolicy('drop')
    with pytest.raises(ValueError):
        DataPolicy('censor', threshold=np.nan)

def test_sbc_config_validation():
    with pytest.raises(ValueError):
        SbcConfig(J=0, quantities=('mu', ))
    with pytest.raises(ValueError):
        SbcConfig(quantities=())

###############################################################################
# Traditional SBC
###############################################################################
def test_traditional_sbc_is_uniform(normal_model):
    cfg = SbcConfig(J=200, n_obs=5, S=99, quantities=('mu', ), root_seed=1, sampler=EXACT)
    rm = run_sbc_traditional(normal_model, cfg)
    assert rm.ranks.shape == (1, 200, 1)
    assert rm.ranks.min() >= 0 and rm.ranks.max() <= 99
    assert rm.converged.all() and not rm.failed.any()
    assert rank_chisq_test(rm.pooled('mu'), 99) > 1e-3

def test_traditional_sbc_is_reproducible(normal_model):
    cfg = SbcConfig(J=30, n_obs=5, S=49, quantities=('mu', ), root_seed=8, sampler=EXACT)
    first, second = run_sbc_traditional(normal_model, cfg), run_sbc_traditional(normal_model, cfg)
    np.testing.assert_array_equal(first.ranks, second.ranks)
    np.testing.assert_array_equal(first.seeds, second.seeds)
    assert len(np.unique(first.seeds)) == 30

def test_traditional_sbc_refuses_improper_prior():
    cfg = SbcConfig(J=10, quantities=('mu', ), sampler=EXACT)
    with pytest.raises(ImproperPriorError):
        run_sbc_traditional(ConjugateNormalModel(0.0, np.inf), cfg)

def test_censored_outcomes_are_counted(normal_model):
    policy = DataPolicy('censor', threshold=0.0)
    cfg = SbcConfig(J=20, n_obs=10, S=49, quantities=('mu', ), data_policy=policy, root_seed=2, sampler=EXACT)
    rm = run_sbc_traditional(normal_model, cfg)
    assert rm.n_censored.sum() > 0
    assert set(rm.to_frame()['censored']) == set(rm.n_censored.ravel())

def test_censoring_below_the_data_range_keeps_calibration(normal_model, rng):
    def log_gamma_and_reject(threshold):
        policy = DataPolicy('censor', threshold=threshold)
        cfg = SbcConfig(J=200, n_obs=10, S=99, quantities=('mu', ), data_policy=policy, root_seed=5, sampler=EXACT)
        rm = run_sbc_traditional(normal_model, cfg)
        result = calibrate({'mu': rm.pooled('mu')}, 99, level=0.01, n_sims=2000, rng=rng)['mu']
        return result.log_gamma, result.reject, rm.n_censored.sum()

    _, reject, n_censored = log_gamma_and_reject(-20.0)
    assert n_censored == 0 and not reject
    # a threshold inside the data range moves part of every dataset onto one value
    log_gamma, reject, n_censored = log_gamma_and_reject(0.0)
    assert n_censored > 0 and reject
    assert log_gamma < -20

def test_failed_fits_are_recorded(normal_model):
    def failing_fit(model, data, weights, S, cfg, rng):
        raise InitializationError('no finite start')

    cfg = SbcConfig(J=5, n_obs=3, S=9, quantities=('mu', ), sampler=EXACT)
    rm = run_sbc_traditional(normal_model, cfg, fit_fn=failing_fit)
    assert rm.failed.all() and not rm.converged.any()
    assert np.all(rm.ranks == 0)

def test_rank_matrix_frame(normal_model):
    cfg = SbcConfig(J=6, n_obs=3, S=19, quantities=('mu', ), root_seed=4, sampler=EXACT)
    rm = run_sbc_traditional(normal_model, cfg)
    df = rm.to_frame()
    assert list(df.columns) == ['t', 'j', 'quantity', 'rank', 'S', 'converged', 'seed', 'failed', 'redraws',
                                'censored']
    back = RankMatrix.from_frame(df)
    np.testing.assert_array_equal(back.ranks, rm.ranks)
    with pytest.raises(ValueError):
        RankMatrix(np.full((1, 2, 1), 20), 19, ('mu', ), np.ones((1, 2), dtype=bool), np.zeros((1, 2)))

###############################################################################
# SBC with implicit priors
###############################################################################
def test_implicit_sbc_is_uniform(normal_model, implicit_priors):
    cfg = SbcConfig(J=50, n_obs=5, S=99, quantities=('mu', ), root_seed=6, sampler=EXACT)
    rm = run_sbc_implicit(normal_model, implicit_priors, cfg)
    assert rm.ranks.shape == (4, 50, 1)
    assert rank_chisq_test(rm.pooled('mu'), 99) > 1e-3

def test_implicit_sbc_without_preconditioning_data_is_miscalibrated(normal_model, implicit_priors, rng):
    cfg = SbcConfig(J=50, n_obs=5, S=99, quantities=('mu', ), root_seed=6, sampler=EXACT)
    rm = run_sbc_implicit(normal_model, implicit_priors, cfg, condition_on_preconditioning=False)
    result = calibrate({'mu': rm.pooled('mu')}, 99, n_sims=2000, rng=rng)['mu']
    assert result.reject

def test_implicit_sbc_checks_priors(normal_model, implicit_priors):
    cfg = SbcConfig(J=50, n_obs=5, S=99, quantities=('mu', ), sampler=EXACT)
    bad = implicit_priors[0]
    stalled = ImplicitPrior(bad.draws, bad.preconditioning_data, bad.weights,
                            FitDiagnostics(np.array([1.5]), np.array([10.0]), 0, False))
    with pytest.raises(ValueError):
        run_sbc_implicit(normal_model, [stalled], cfg)
    rm = run_sbc_implicit(normal_model, [stalled], cfg, require_converged=False)
    assert rm.T == 1
    with pytest.raises(ValueError):
        run_sbc_implicit(normal_model, implicit_priors, SbcConfig(J=401, quantities=('mu', ), sampler=EXACT))

###############################################################################
# SBC for selected parameters
###############################################################################
def test_split_without_uninformed_parameters_matches_implicit(normal_model, implicit_priors):
    split = ParameterSplit((0, ), ())
    cfg = SbcConfig(J=20, n_obs=5, S=49, quantities=('mu', ), split=split, root_seed=9, sampler=EXACT)
    np.testing.assert_array_equal(
        run_sbc_split(normal_model, implicit_priors, cfg).ranks, run_sbc_implicit(normal_model, implicit_priors, cfg).ranks
    )

def test_split_sbc_fits_the_split_model(rng):
    model = RandomInterceptModel(2)
    split = ParameterSplit.from_names(model, ['mu', 'log_residual_sd'])
    precon = Dataset(rng.standard_normal(4), [[0.0], [1.0], [0.0], [1.0]], id='precon')
    priors = [
        ImplicitPrior(DrawMatrix(model.sample_prior(rng, 100), np.zeros(100)), precon, ObservationWeights.uniform(4),
                      exact_diagnostics(100, model.dim))
        for _ in range(2)
    ]
    seen = []

    def stub_fit(fit_model, data, weights, S, cfg, fit_rng):
        seen.append((fit_model, data.N, weights.N))
        return fit_rng.standard_normal((S, fit_model.dim)), exact_diagnostics(S, fit_model.dim)

    cfg = SbcConfig(J=10, n_obs=6, S=19, quantities=('mu', 'log_residual_sd'), split=split, sampler=EXACT)
    rm = run_sbc_split(model, priors, cfg, fit_fn=stub_fit)
    assert rm.ranks.shape == (2, 10, 2)
    fit_model, n_data, n_weights = seen[0]
    assert isinstance(fit_model, SplitModel)
    assert fit_model.dim == model.dim + 3
    assert n_data == n_weights == 10

def test_split_sbc_needs_a_split(normal_model, implicit_priors):
    with pytest.raises(ValueError):
        run_sbc_split(normal_model, implicit_priors, SbcConfig(J=5, quantities=('mu', ), sampler=EXACT))

@pytest.mark.slow
@pytest.mark.parametrize('uninformed_mode', ['sample-original-prior', 'fix-constant'])
def test_split_sbc_is_calibrated(uninformed_mode):
    model = RandomInterceptModel(2)
    theta_c = np.array([1.0, -0.5, 0.0, 0.0, 0.0])
    source = simulate_dataset(model, theta_c, model.design(), 60, np.random.default_rng(11))
    theta_u_c = None
    if uninformed_mode == 'fix-constant':
        theta_u_c = theta_c[[model.param_names.index(name) for name in ('log_between_sd', 'z1', 'z2')]]
    split = ParameterSplit.from_names(model, ['mu', 'log_residual_sd'], uninformed_mode, theta_u_c)
    sampler = SamplerConfig(chains=2, warmup=100, draws=60, rhat_max=1.1, ess_min=20)

    src = PreconSource('real-subset', N=6, T=2, source_data=source)
    priors = build_prior_family(model, src, None, sampler, root_seed=12, split=split)
    quantities = ('mu', 'log_between_sd', 'log_residual_sd')
    cfg = SbcConfig(J=30, n_obs=8, S=29, quantities=quantities, split=split, root_seed=13, sampler=sampler)
    rm = run_sbc_split(model, priors, cfg, require_converged=False)
    assert rm.ranks.shape == (2, 30, 3)
    assert not rm.failed.any()

    results = calibrate({q: rm.pooled(q) for q in quantities}, 29, level=0.01, n_sims=2000,
                        rng=np.random.default_rng(14))
    assert not any(res.reject for res in results.values())
