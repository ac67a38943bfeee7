"""Bayesian spatial regression with an MGRF prior that adjusts for spatial confounding."""
from .errors import *  # noqa: F401,F403
from .mesh import Rectangle, TriMesh, build_mesh, assemble_fem, locate, project
from .mgrf_prior import (RHO_MAX, Aggregation, MgrfState, Reformulation, aggregate_covariates,
                         conditional_moments_I, apply_shift_II, sample_joint_pair)
from .pc_prior import PcRhoPrior, calibrate_lambda, fisher_z, fisher_z_inv, log_jacobian
from .ram import RamBlock, ram_step, run_ram
from .sampler import (Block, ChainState, ModelConfig, ModelKind, PosteriorSummary, Priors,
                      SpatialData, ess_initial_monotone, n_retained, run_chain)
from .baselines import constrain_orthogonal, fit_base, fit_nonspatial, fit_rsr
from .harness import (ScenarioConfig, RunResult, Study, coverage_rate, crps_gaussian,
                      generate_replicate, preset, run_study)
from .sparse_la import (CholFactor, Ordering, SparseSym, factorize, logdet, quad_form, matvec,
                        sample_gmrf, solve_full, solve_lower, solve_upper)
from .spde import (GmrfSpec, interpretable_to_params, marginal_variance, params_to_interpretable,
                   practical_range, precision)

__version__ = "0.1.0"
