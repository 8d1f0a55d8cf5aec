"""Third-order tensor mixed effects models."""

from .benchmarks import BenchFit, fit_td, fit_tfe, mse, predict
from .normal import SpdMatrix, TensorNormal3, log_density, sample, spd_project
from .simlab import SimConfig, SimTruth, StudyReport, gen_truth, metric_D, metric_D_triple, run_study
from .tensor import frob_norm, kron, matricize, mode_product, tensorize, tucker_apply, unvec, vec
from .tme import (
    ConvergenceTrace,
    ExistenceError,
    TmeConfig,
    TmeDesign,
    TmeFit,
    estimate_fixed,
    estimate_random_effects,
    existence_check,
    fit_tme,
    loglik,
    normalize_identifiability,
    recover_random_cov,
    update_residual_cov,
    update_total_cov,
)
from .tucker import hooi, hosvd, rank_select

__version__ = "0.1.0"
