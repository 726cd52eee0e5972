# prior presets of the gamma regression case study
# each block is (family, *params); normal params are (mean, sd), gamma params are (shape, rate)
gamma_glm_prior_presets = {
    'flat': {
        'intercept': ('flat',),
        'coef': ('flat',),
        'shape': ('flat',),
    },
    'vague': {
        'intercept': ('normal', 2.0, 100.0),
        'coef': ('normal', 0.0, 100.0),
        'shape': ('gamma', 0.01, 0.01),
    },
    'very-weakly-informative': {
        'intercept': ('normal', 2.0, 5.0),
        'coef': ('normal', 0.0, 1.0),
        'shape': ('gamma', 0.1, 0.1),
    },
    'weakly-informative': {
        'intercept': ('normal', 2.0, 1.0),
        'coef': ('normal', 0.0, 1.0),
        'shape': ('gamma', 1.0, 1.0),
    },
}

# parameter configuration used to simulate preconditioning data from the gamma likelihood
gamma_glm_theta_c = {'intercept': 1.0, 'coef': 0.1, 'shape': 1.0}

# random intercept model priors: grand mean ~ normal, both sds ~ half-normal
random_intercept_priors = {
    'grand_mean': ('normal', 0.0, 1.0),
    'between_sd': ('halfnormal', 1.0),
    'residual_sd': ('halfnormal', 1.0),
}

###############################################################################
# Sampler
###############################################################################
sampler_defaults = {
    'backend': 'nuts',
    'chains': 4,
    'warmup': 500,
    'draws': 250,
    'max_tree_depth': 10,
    'target_accept': 0.8,
    'init_radius': 2.0,
    'max_init_retries': 100,
    'rhat_max': 1.01,
    'ess_min': 400,
    'max_divergent_frac': 0.01,
    'timeout': None,
}

# energy error beyond which a leapfrog step counts as divergent
max_energy_error = 1000.0

# warmup window sizes for step size / metric adaptation
adapt_init_buffer = 75
adapt_term_buffer = 50
adapt_base_window = 25

# dual averaging constants
dual_averaging = {'gamma': 0.05, 't0': 10.0, 'kappa': 0.75}

# draws of an improper-prior coordinate beyond this bound are treated as a diverging posterior
improper_divergence_bound = 1e6

###############################################################################
# SBC
###############################################################################
sbc_defaults = {
    'J': 100,
    'n_obs': 50,
    'S': 1000,
}

# lower censoring threshold used throughout the case study (double precision)
default_censor_threshold = 1e-16

###############################################################################
# Calibration statistics
###############################################################################
stats_defaults = {
    'level': 0.05,
    'n_sims': 10000,
}

# quantiles of the log-gamma summary: median plus two-tailed 66% and 90% intervals
summary_quantiles = {'q05': 0.05, 'q17': 0.17, 'median': 0.5, 'q83': 0.83, 'q95': 0.95}

###############################################################################
# Output files
###############################################################################
ranks_filename = 'ranks.csv'
calibration_filename = 'calibration.json'
log_gamma_filename = 'log_gamma.csv'
ecdf_filename = 'ecdf_diff.csv'
manifest_filename = 'manifest.json'
summary_filename = 'summary'
error_filename = 'error.json'
