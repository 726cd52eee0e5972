from .diagnostics import DrawMatrix, FitDiagnostics, diagnose
from .exact import conjugate_normal_posterior, exact_posterior_sampler
from .fit import FitFunction, fit_posterior, thin_draws
from .nuts import InitializationError, SamplerConfig, SamplerTimeoutError, sample_posterior
