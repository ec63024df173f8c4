"""Deep kernel machines: Gram-matrix objectives, sparse inducing-point
training, closed-form linear-kernel solutions and finite-width validation."""

from .kernels import (ArcCosRelu, KernelSpec, LeakyRelu, Linear, Skip, SqExp,
                      kernel_apply, kernel_apply_blocks, leaky_relu_pointwise,
                      scaled_relu, spec_from_dict, spec_to_dict)
from .linear_oracle import LinearSolution, linear_equal_width, linear_general_width
from .matrices import (DegenerateInputError, InvalidInputError, NumericalError,
                       chol, gram_from_features, validate_gram)
from .objective import (DkmState, WidthProfile, dkm_objective, kl_gaussian,
                        log_lik_regression, map_objective, objective_gradient,
                        wishart_logpdf)
from .optimizer import (FactorParams, OptimizerConfig, Problem, init_prior,
                        init_random_scaled, optimize)
from .sparse import (SparseConfig, SparseState, init_sparse_state,
                     load_checkpoint, nngp_baseline, predict, propagate,
                     save_checkpoint, sparse_objective, train_sparse)
from .dgp import (DgpConfig, dgp_sample_prior, gram_rmse, langevin_posterior,
                  map_features_train, mc_gram_estimate, posterior_gram_estimate,
                  vdkm_objective_gaussian)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "1.0.0"
