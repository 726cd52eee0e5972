from .bodyfat import bodyfat_like_source
from .conjugate import BetaBinomialModel, ConjugateNormalModel, make_beta_binomial, make_conjugate_normal
from .gamma_glm import GammaGlmModel, external_simulators, make_gamma_glm
from .random_intercept import RandomInterceptModel, make_random_intercept
