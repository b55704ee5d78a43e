import importlib.metadata

from .degrade import Burst, BurstConfig, NoiseModel, SubsampleOperator, observe_integer_burst, simulate_burst
from .exceptions import SsnllError
from .experiments import ExperimentConfig, parse_config_text, run_experiment
from .grid import ALL_SUBGRIDS, DenseMatrix, ImageGrid, SubgridId, subgrid_embed, subgrid_extract
from .loss import EstimatorState, NoiseCovEstimate, selfsup_nll_diag, selfsup_nll_full, supervised_nll
from .metrics import CoverageCurve, calibration_error, coverage, psnr, sharpness, v_rmse
from .optim import AffineEstimator, OptimConfig, TrainConfig, minimize, train_affine, variance_stationarity_residual
from .posterior import GaussianPrior, GmmPrior, PosteriorSummary, gaussian_posterior, gmm_posterior, mc_posterior
from .risk import RHatMode, RiskProblem, risk_closed_form, risk_monte_carlo, verify_proposition1

__version__ = importlib.metadata.version("ssnll")
__all__ = [
    "ALL_SUBGRIDS",
    "AffineEstimator",
    "Burst",
    "BurstConfig",
    "CoverageCurve",
    "DenseMatrix",
    "EstimatorState",
    "ExperimentConfig",
    "GaussianPrior",
    "GmmPrior",
    "ImageGrid",
    "NoiseCovEstimate",
    "NoiseModel",
    "OptimConfig",
    "PosteriorSummary",
    "RHatMode",
    "RiskProblem",
    "SsnllError",
    "SubgridId",
    "SubsampleOperator",
    "TrainConfig",
    "calibration_error",
    "coverage",
    "gaussian_posterior",
    "gmm_posterior",
    "mc_posterior",
    "minimize",
    "observe_integer_burst",
    "parse_config_text",
    "psnr",
    "risk_closed_form",
    "risk_monte_carlo",
    "run_experiment",
    "selfsup_nll_diag",
    "selfsup_nll_full",
    "sharpness",
    "simulate_burst",
    "subgrid_embed",
    "subgrid_extract",
    "supervised_nll",
    "train_affine",
    "v_rmse",
    "variance_stationarity_residual",
    "verify_proposition1",
]
