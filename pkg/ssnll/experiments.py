"""Experiment orchestration behind the command line: config parsing, trials, CSV and raster artifacts.

Config files are flat ``key = value`` lines. ``#`` starts a comment, blank lines are skipped, every key may be set
once and list values are comma separated. Every trial draws its seed from ``SeedSequence(seed).spawn(instances)``,
so results depend on the config alone, never on how many trials run at once.
"""
import csv
import logging
import math
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, get_origin

import numpy as np
from pydantic import BaseModel, Extra, ValidationError, root_validator, validator
from typing_extensions import assert_never

from ._utils import derive_seed, make_rng, short_hash, spawn_seeds, standard_normal
from .degrade import Burst, NoiseModel, observe_integer_burst
from .exceptions import ConfigError
from .grid import ALL_SUBGRIDS, DENSE_CAP, ImageGrid, SubgridId, write_raster
from .loss import (
    EstimatorState,
    NoiseCovEstimate,
    grad_full,
    grad_mean_diag,
    grad_variance_diag,
    selfsup_nll_diag,
    selfsup_nll_full,
    supervised_nll,
    supervised_nll_grad,
)
from .metrics import (
    calibration_error,
    coverage,
    coverage_calibration_error,
    mean_value,
    per_subgrid,
    psnr,
    rmse,
    sharpness,
    v_rmse,
)
from .optim import (
    AffineEstimator,
    OptimConfig,
    TrainConfig,
    build_training_set,
    fd_check,
    save_estimator,
    train_affine,
)
from .posterior import GaussianPrior, GmmPrior, Observation, gaussian_posterior, observations_from_burst
from .risk import (
    CheckResult,
    RHatMode,
    RiskProblem,
    exact_estimator,
    mean_operator_min_eigenvalue,
    risk_closed_form,
    risk_gradient,
    stationarity_cov_residual_full,
    stationarity_mean_residual,
    stationarity_var_residual_diag,
    verify_proposition1,
)

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ("config_hash", "experiment", "instance", "subgrid", "check", "value", "tolerance", "passed")
RESULTS_FILE = "results.csv"
MANIFEST_FILE = "manifest.txt"

GRADIENT_TOLERANCE = 1e-5
STATIONARITY_TOLERANCE = 1e-10
TRAIN_MEAN_TOLERANCE = 0.02
TRAIN_VARIANCE_TOLERANCE = 0.05
TRAIN_PARITY_TOLERANCE = 0.03
COVERAGE_TOLERANCE = 0.005
SUBGRID_FAILURE_TOLERANCE = 0.05

# Integer HR shifts whose frames land on subgrids (0,0), (0,1), (1,0) and (1,1) in turn.
_SUBGRID_SHIFTS = ((0, 0), (0, 1), (1, 0), (1, 1))


class ExperimentKind(str, Enum):
    gradcheck = "gradcheck"
    stationarity = "stationarity"
    prop1 = "prop1"
    train_affine = "train_affine"
    coverage_study = "coverage_study"
    subgrid_study = "subgrid_study"


class PriorKind(str, Enum):
    isotropic = "isotropic"
    stationary = "stationary"
    gmm = "gmm"


class ExperimentConfig(BaseModel):
    experiment: ExperimentKind
    hr_height: int = 4
    hr_width: int = 4
    n_frames: int = 4
    prior: PriorKind = PriorKind.stationary
    prior_mean: float = 0.5
    prior_variance: float = 0.01
    length_scale: float = 1.5
    gmm_means: list[float] = [0.3, 0.7]
    gmm_weights: list[float] = [0.5, 0.5]
    noise_a: float = 0.0
    noise_b: float = 1e-3
    r_hat_mode: RHatMode = RHatMode.exact_diag
    include_reference: bool = True
    instances: int = 20
    restarts: int = 20
    tolerance: float = 1e-4
    mc_samples: int = 1_000_000
    max_iters: int = 20000
    grad_tol: float = 1e-8
    n_bursts: int = 2000
    test_bursts: int = 200
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 1e-2
    coverage_pixels: int = 1_000_000
    levels: list[float] = [round(0.05 * j, 10) for j in range(1, 20)]
    write_rasters: bool = False
    seed: int = 0
    out: str = "results"

    class Config:
        extra = Extra.forbid
        allow_mutation = False

    @validator("hr_height", "hr_width")
    def _positive_even(cls, value: int) -> int:
        if value < 2 or value % 2:
            raise ValueError(f"must be even, got {value}")
        return value

    @validator("n_frames")
    def _at_least_two_frames(cls, value: int) -> int:
        if value < 2:
            raise ValueError(f"must be >= 2, got {value}")
        return value

    @validator(
        "instances",
        "restarts",
        "max_iters",
        "n_bursts",
        "test_bursts",
        "epochs",
        "batch_size",
        "coverage_pixels",
    )
    def _positive_count(cls, value: int) -> int:
        if value < 1:
            raise ValueError(f"must be >= 1, got {value}")
        return value

    @validator("mc_samples")
    def _enough_samples(cls, value: int) -> int:
        if value < 1000:
            raise ValueError(f"must be >= 1000, got {value}")
        return value

    @validator("prior_variance", "length_scale", "noise_b", "tolerance", "grad_tol", "learning_rate")
    def _positive(cls, value: float) -> float:
        if not value > 0 or not math.isfinite(value):
            raise ValueError(f"must be finite and > 0, got {value}")
        return value

    @validator("noise_a")
    def _non_negative(cls, value: float) -> float:
        if not value >= 0 or not math.isfinite(value):
            raise ValueError(f"must be finite and >= 0, got {value}")
        return value

    @validator("gmm_weights")
    def _weights_sum_to_one(cls, value: list[float]) -> list[float]:
        if any(w < 0 for w in value) or abs(sum(value) - 1.0) > 1e-12:
            raise ValueError(f"must be non-negative and sum to 1, got {value}")
        return value

    @validator("levels")
    def _levels_increasing(cls, value: list[float]) -> list[float]:
        increasing = all(a < b for a, b in zip(value, value[1:], strict=False))
        if not value or not increasing or any(not 0 < p < 1 for p in value):
            raise ValueError(f"must be strictly increasing inside (0, 1), got {value}")
        return value

    @validator("seed")
    def _seed_is_u64(cls, value: int) -> int:
        if not 0 <= value < 2**64:
            raise ValueError(f"must fit in 64 unsigned bits, got {value}")
        return value

    @root_validator(skip_on_failure=True)
    def _consistent(cls, values: dict) -> dict:
        if len(values["gmm_means"]) != len(values["gmm_weights"]):
            raise ValueError(
                f"gmm_means has {len(values['gmm_means'])} entries but gmm_weights has {len(values['gmm_weights'])}",
            )
        if values["prior"] is PriorKind.gmm and len(values["gmm_means"]) < 2:
            raise ValueError("a gmm prior needs at least two components")
        if values["prior"] is PriorKind.gmm and values["experiment"] is ExperimentKind.train_affine:
            raise ValueError("train_affine compares against a Gaussian oracle and needs a Gaussian prior")
        if values["hr_height"] * values["hr_width"] > DENSE_CAP:
            raise ValueError(
                f"HR grid {values['hr_height']}x{values['hr_width']} exceeds the dense limit of {DENSE_CAP} pixels",
            )
        return values

    @property
    def hr_shape(self) -> tuple[int, int]:
        return self.hr_height, self.hr_width

    @property
    def noise_model(self) -> NoiseModel:
        return NoiseModel(a=self.noise_a, b=self.noise_b)

    def canonical_lines(self) -> list[str]:
        """``key = value`` lines in field order; ``out`` is left out so it never changes the hash."""
        return [f"{key} = {_format_value(value)}" for key, value in self.dict().items() if key != "out"]

    def config_hash(self) -> str:
        return short_hash(self.canonical_lines())


def _format_value(value: Any) -> str:
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


def _is_list_field(key: str) -> bool:
    return get_origin(ExperimentConfig.__fields__[key].outer_type_) is list


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse the flat config grammar; every error carries the line that caused it (0 for defaulted fields)."""
    values: dict[str, Any] = {}
    lines: dict[str, int] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or not key:
            raise ConfigError(f"Expected 'key = value', got '{raw.strip()}'", line=number)
        if key not in ExperimentConfig.__fields__:
            raise ConfigError(f"Unknown key '{key}'", line=number, field=key)
        if key in lines:
            raise ConfigError(f"Duplicate key '{key}' (first set on line {lines[key]})", line=number, field=key)
        values[key] = [part.strip() for part in value.split(",")] if _is_list_field(key) else value
        lines[key] = number
    try:
        return ExperimentConfig.parse_obj(values)
    except ValidationError as e:
        error = e.errors()[0]
        key = str(error["loc"][0])
        if key == "__root__":
            raise ConfigError(error["msg"]) from None
        separator = " " if error["type"] == "value_error" else ": "
        raise ConfigError(f"Field '{key}'{separator}{error['msg']}", line=lines.get(key, 0), field=key) from None


def load_config(path: Path | str) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True, slots=True, eq=False)
class ExperimentOutput:
    rows: tuple[CheckResult, ...]
    seeds: tuple[int, ...]
    rasters: dict[str, ImageGrid] = field(default_factory=dict)
    estimators: dict[str, AffineEstimator] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(row.passed for row in self.rows)


@dataclass(frozen=True, slots=True, eq=False)
class Instance:
    """One random trial: ground truth, its burst, the conditioning set and the exact risk problem."""

    u: ImageGrid
    burst: Burst
    observations: list[Observation]
    problem: RiskProblem


def balanced_shifts(n_frames: int) -> list[tuple[int, int]]:
    """The aligned reference frame followed by inputs cycling through the four subgrids, ``(0,0)`` first."""
    return [(0, 0)] + [_SUBGRID_SHIFTS[t % len(_SUBGRID_SHIFTS)] for t in range(n_frames - 1)]


def build_prior(cfg: ExperimentConfig) -> GaussianPrior | GmmPrior:
    if cfg.prior is PriorKind.isotropic:
        return GaussianPrior.isotropic(cfg.hr_shape, cfg.prior_mean, cfg.prior_variance)
    if cfg.prior is PriorKind.stationary:
        return GaussianPrior.stationary(cfg.hr_shape, cfg.prior_mean, cfg.prior_variance, cfg.length_scale)
    if cfg.prior is PriorKind.gmm:
        components = tuple(
            GaussianPrior.stationary(cfg.hr_shape, m, cfg.prior_variance, cfg.length_scale) for m in cfg.gmm_means
        )
        return GmmPrior(np.array(cfg.gmm_weights), components)
    assert_never(cfg.prior)


def make_instance(cfg: ExperimentConfig, seed: int) -> Instance:
    rng = make_rng(seed)
    prior = build_prior(cfg)
    u = ImageGrid(prior.sample(rng, 1)[0])
    burst = observe_integer_burst(u, balanced_shifts(cfg.n_frames), cfg.noise_model, derive_seed(rng))
    observations = observations_from_burst(burst, include_reference=cfg.include_reference)
    if isinstance(prior, GmmPrior):
        problem = RiskProblem.from_gmm(prior, observations, cfg.noise_model, cfg.r_hat_mode)
    else:
        problem = RiskProblem.from_gaussian(prior, observations, cfg.noise_model, cfg.r_hat_mode)
    return Instance(u, burst, observations, problem)


def _row(instance: str, check: str, value: float, tolerance: float, subgrid: SubgridId | str = "all") -> CheckResult:
    value = float(value)
    return CheckResult(instance, check, value, float(tolerance), bool(value <= tolerance), str(subgrid))


def _info(instance: str, check: str, value: float, subgrid: SubgridId | str = "all") -> CheckResult:
    return CheckResult(instance, check, float(value), math.inf, True, str(subgrid))


def _run_trials(work: Callable[[int, int], list[CheckResult]], seeds: Sequence[int], jobs: int) -> list[CheckResult]:
    def run(k: int) -> list[CheckResult]:
        rows = work(k, seeds[k])
        logger.info("Instance %d of %d done", k + 1, len(seeds))
        return rows

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(run, range(len(seeds))))
    else:
        chunks = [run(k) for k in range(len(seeds))]
    return [row for chunk in chunks for row in chunk]


def _worst_per_check(rows: Sequence[CheckResult], checks: Sequence[str], tolerance: float) -> list[CheckResult]:
    return [_row("all", f"max_{check}", max(r.value for r in rows if r.check == check), tolerance) for check in checks]


def _gradient_rows(cfg: ExperimentConfig, seed: int, instance: str) -> list[CheckResult]:
    rng = make_rng(seed)
    shape = cfg.hr_shape
    lr_shape = (shape[0] // 2, shape[1] // 2)
    size = shape[0] * shape[1]
    tau = ALL_SUBGRIDS[int(rng.integers(len(ALL_SUBGRIDS)))]
    z = ImageGrid(standard_normal(rng, lr_shape))
    u = ImageGrid(standard_normal(rng, shape))
    r_hat = NoiseCovEstimate(ImageGrid(rng.uniform(0.1, 1.0, size=lr_shape)))
    mean = standard_normal(rng, size)
    variance = rng.uniform(0.5, 2.0, size=size)
    factor = np.tril(0.3 * standard_normal(rng, (size, size)), k=-1) + np.diag(rng.uniform(0.5, 1.5, size=size))
    rows_idx, cols_idx = np.tril_indices(size)

    def split(x: np.ndarray) -> tuple[ImageGrid, ImageGrid]:
        return ImageGrid(x[:size].reshape(shape)), ImageGrid(x[size:].reshape(shape))

    def selfsup_diag(x: np.ndarray) -> tuple[float, np.ndarray]:
        est = EstimatorState.diagonal(*split(x))
        grad = np.concatenate(
            [grad_mean_diag(z, est, tau, r_hat).flat(), grad_variance_diag(z, est, tau, r_hat).flat()],
        )
        return selfsup_nll_diag(z, est, tau, r_hat), grad

    def selfsup_full(x: np.ndarray) -> tuple[float, np.ndarray]:
        lower = np.zeros((size, size))
        lower[rows_idx, cols_idx] = x[size:]
        est = EstimatorState.full(ImageGrid(x[:size].reshape(shape)), lower)
        grad = grad_full(z, est, tau, r_hat)
        return selfsup_nll_full(z, est, tau, r_hat), np.concatenate(
            [grad.mean.flat(), grad.factor.entries[rows_idx, cols_idx]],
        )

    def supervised(x: np.ndarray) -> tuple[float, np.ndarray]:
        grad_mean, grad_variance = supervised_nll_grad(u, *split(x))
        return supervised_nll(u, *split(x)), np.concatenate([grad_mean.flat(), grad_variance.flat()])

    problem = make_instance(cfg, derive_seed(rng)).problem
    post_mean = problem.posterior.mean.flat()
    post_std = np.sqrt(np.maximum(problem.posterior.diag.flat(), 1e-12))
    risk_mean = post_mean + 0.5 * post_std * standard_normal(rng, size)
    risk_log_variance = np.log(problem.posterior.diag.flat() + cfg.noise_b) + rng.uniform(-1.0, 1.0, size=size)

    def risk(x: np.ndarray) -> tuple[float, np.ndarray]:
        variance = np.exp(x[size:])
        est = EstimatorState.diagonal(ImageGrid(x[:size].reshape(shape)), ImageGrid(variance.reshape(shape)))
        grad = risk_gradient(problem, est)
        return risk_closed_form(problem, est), np.concatenate([grad.mean.flat(), grad.variance.flat() * variance])

    return [
        _row(
            instance,
            "grad_selfsup_diag",
            fd_check(selfsup_diag, np.concatenate([mean, variance])),
            GRADIENT_TOLERANCE,
        ),
        _row(
            instance,
            "grad_selfsup_full",
            fd_check(selfsup_full, np.concatenate([mean, factor[rows_idx, cols_idx]])),
            GRADIENT_TOLERANCE,
        ),
        _row(instance, "grad_supervised", fd_check(supervised, np.concatenate([mean, variance])), GRADIENT_TOLERANCE),
        _row(instance, "grad_risk", fd_check(risk, np.concatenate([risk_mean, risk_log_variance])), GRADIENT_TOLERANCE),
    ]


def run_gradcheck(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentOutput:
    seeds = spawn_seeds(cfg.seed, cfg.instances)
    rows = _run_trials(lambda k, seed: _gradient_rows(cfg, seed, str(k)), seeds, jobs)
    checks = ("grad_selfsup_diag", "grad_selfsup_full", "grad_supervised", "grad_risk")
    return ExperimentOutput(tuple(rows + _worst_per_check(rows, checks, GRADIENT_TOLERANCE)), tuple(seeds))


def _stationarity_rows(cfg: ExperimentConfig, seed: int, instance: str) -> list[CheckResult]:
    problem = make_instance(cfg, seed).problem
    solution = exact_estimator(problem)
    full = EstimatorState.full(solution.mean, problem.posterior.cov.factor().lower)
    return [
        _row(instance, "invertibility_min_eigenvalue", -mean_operator_min_eigenvalue(problem, solution), 0.0),
        _row(instance, "mean_residual", stationarity_mean_residual(problem, solution), STATIONARITY_TOLERANCE),
        _row(instance, "variance_residual", stationarity_var_residual_diag(problem, solution), STATIONARITY_TOLERANCE),
        _row(instance, "covariance_residual", stationarity_cov_residual_full(problem, full), STATIONARITY_TOLERANCE),
    ]


def run_stationarity(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentOutput:
    seeds = spawn_seeds(cfg.seed, cfg.instances)
    rows = _run_trials(lambda k, seed: _stationarity_rows(cfg, seed, str(k)), seeds, jobs)
    return ExperimentOutput(tuple(rows), tuple(seeds))


def _prop1_rows(cfg: ExperimentConfig, seed: int, instance: str) -> list[CheckResult]:
    problem = make_instance(cfg, seed).problem
    rng = make_rng(spawn_seeds(seed, 1)[0])
    bias = ImageGrid(0.5 * np.sqrt(problem.posterior.diag.data) * np.where(rng.random(problem.shape) < 0.5, -1, 1))
    report = verify_proposition1(
        problem,
        cfg.tolerance,
        restarts=cfg.restarts,
        seed=derive_seed(rng),
        cfg=OptimConfig(max_iters=cfg.max_iters, grad_tol=cfg.grad_tol),
        bias=bias,
        mc_samples=cfg.mc_samples if cfg.prior is PriorKind.gmm else None,
        instance=instance,
    )
    return list(report.rows)


def run_prop1(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentOutput:
    seeds = spawn_seeds(cfg.seed, cfg.instances)
    rows = _run_trials(lambda k, seed: _prop1_rows(cfg, seed, str(k)), seeds, jobs)
    return ExperimentOutput(tuple(rows), tuple(seeds))


def _relative_norm(actual: np.ndarray, expected: np.ndarray) -> float:
    return float(np.linalg.norm(actual - expected) / np.linalg.norm(expected))


def run_train_affine(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentOutput:
    """Train the affine estimator under both NLLs and compare each with the oracle posterior on held-out bursts."""
    train_seed, test_seed, train_order = spawn_seeds(cfg.seed, 3)
    prior = build_prior(cfg)
    assert isinstance(prior, GaussianPrior)
    model = cfg.noise_model
    shifts = balanced_shifts(cfg.n_frames)
    dataset = build_training_set(prior, shifts, model, cfg.n_bursts, train_seed)
    test_set = build_training_set(prior, shifts, model, cfg.test_bursts, test_seed)

    def fit(loss: str) -> AffineEstimator:
        train_cfg = TrainConfig(
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
            learning_rate=cfg.learning_rate,
            loss=loss,
            seed=train_order,
        )
        return train_affine(dataset, model, train_cfg)

    losses = ("selfsup", "supervised")
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=2) as pool:
            estimators = dict(zip(losses, pool.map(fit, losses), strict=True))
    else:
        estimators = {loss: fit(loss) for loss in losses}

    posteriors = [
        gaussian_posterior(prior, observations_from_burst(s.burst, include_reference=False)) for s in test_set
    ]
    oracle_means = np.stack([p.mean.data for p in posteriors])
    # the posterior covariance of a linear-Gaussian model does not depend on the observed values
    oracle_variance = posteriors[0].diag.data
    truths = np.stack([s.truth.data for s in test_set])  # type: ignore[union-attr]
    means = {loss: np.stack([est.predict(s.burst).mean.data for s in test_set]) for loss, est in estimators.items()}
    variances = {loss: est.variance.data for loss, est in estimators.items()}

    rows = []
    for loss in losses:
        mean_error = _relative_norm(means[loss], oracle_means)
        rows.append(_row("0", f"mean_vs_oracle_{loss}", mean_error, TRAIN_MEAN_TOLERANCE))
        rows.append(
            _row(
                "0",
                f"variance_vs_oracle_{loss}",
                _relative_norm(variances[loss], oracle_variance),
                TRAIN_VARIANCE_TOLERANCE,
            ),
        )
    rows.append(
        _row(
            "0",
            "mean_selfsup_vs_supervised",
            _relative_norm(means["selfsup"], means["supervised"]),
            TRAIN_PARITY_TOLERANCE,
        ),
    )
    rows.append(
        _row(
            "0",
            "variance_selfsup_vs_supervised",
            _relative_norm(variances["selfsup"], variances["supervised"]),
            TRAIN_PARITY_TOLERANCE,
        ),
    )

    u = ImageGrid(truths.reshape(-1, cfg.hr_width))
    for loss in losses:
        mean = ImageGrid(means[loss].reshape(-1, cfg.hr_width))
        nu_hat = ImageGrid(np.broadcast_to(variances[loss], truths.shape).reshape(-1, cfg.hr_width))
        rows.append(_info("0", f"psnr_{loss}", psnr(u, mean)))
        rows.append(_info("0", f"v_rmse_{loss}", v_rmse(nu_hat, mean, u)))
        rows.append(_info("0", f"calibration_error_{loss}", calibration_error(coverage(u, mean, nu_hat, cfg.levels))))
        rows.append(_info("0", f"sharpness_{loss}", sharpness(nu_hat)))

    rasters = {
        "mean": ImageGrid(means["selfsup"][0]),
        "variance": estimators["selfsup"].variance,
        "squared_error": ImageGrid((means["selfsup"][0] - truths[0]) ** 2),
        "oracle_mean": posteriors[0].mean,
        "oracle_variance": posteriors[0].diag,
    }
    return ExperimentOutput(tuple(rows), (train_seed, test_seed, train_order), rasters=rasters, estimators=estimators)


def _coverage_pool(cfg: ExperimentConfig, seed: int, draws: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    posterior = make_instance(cfg, seed).problem.posterior
    truths = posterior.sample(make_rng(spawn_seeds(seed, 1)[0]), draws)
    return (
        truths.reshape(draws, -1),
        np.broadcast_to(posterior.mean.flat(), (draws, posterior.mean.size)),
        np.broadcast_to(np.maximum(posterior.diag.flat(), 1e-300), (draws, posterior.mean.size)),
    )


def run_coverage_study(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentOutput:
    """Coverage of the oracle intervals on ``coverage_pixels`` pixels drawn from exact posteriors."""
    seeds = spawn_seeds(cfg.seed, cfg.instances)
    pixels = cfg.hr_height * cfg.hr_width
    draws = math.ceil(cfg.coverage_pixels / (cfg.instances * pixels))

    def run(k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return _coverage_pool(cfg, seeds[k], draws)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            pools = list(pool.map(run, range(len(seeds))))
    else:
        pools = [run(k) for k in range(len(seeds))]
    u, mean, nu_hat = (ImageGrid(np.concatenate([p[i] for p in pools])) for i in range(3))

    curve = coverage(u, mean, nu_hat, cfg.levels)
    rows = [
        _row("all", f"coverage_at_{nominal:.2f}", abs(empirical - nominal), COVERAGE_TOLERANCE)
        for nominal, empirical in zip(curve.nominal_levels, curve.empirical_levels, strict=True)
    ]
    rows.append(_row("all", "calibration_error", calibration_error(curve), COVERAGE_TOLERANCE))
    rows.append(_info("all", "sharpness", sharpness(nu_hat)))
    rows.append(_info("all", "pixels", u.size))
    return ExperimentOutput(tuple(rows), tuple(seeds))


def _subgrid_rows(cfg: ExperimentConfig, seed: int, instance: str) -> list[CheckResult]:
    """Oracle rows of one trial.

    The expected RMSE of the posterior mean on a subgrid is the root of its mean posterior variance, so the ordering
    check does not hinge on a single draw of ``u``. The realized RMSE of that draw is reported alongside.
    """
    trial = make_instance(cfg, seed)
    posterior = trial.problem.posterior
    variances = per_subgrid(mean_value, posterior.diag)
    expected = {tau: math.sqrt(value) for tau, value in variances.items()}
    errors = per_subgrid(rmse, posterior.mean, trial.u)
    rows = [_info(instance, "mean_variance", variances[tau], tau) for tau in ALL_SUBGRIDS]
    rows += [_info(instance, "expected_rmse", expected[tau], tau) for tau in ALL_SUBGRIDS]
    rows += [_info(instance, "rmse", errors[tau], tau) for tau in ALL_SUBGRIDS]
    for check, values in (("variance_smallest", variances), ("expected_rmse_smallest", expected)):
        rows.append(_info(instance, check, float(_reference_is_smallest(values)), ALL_SUBGRIDS[0]))
    return rows


def _reference_is_smallest(values: dict[SubgridId, float]) -> bool:
    reference = ALL_SUBGRIDS[0]
    return all(values[reference] < values[tau] for tau in ALL_SUBGRIDS[1:])


def _trained_subgrid_rows(
    cfg: ExperimentConfig,
    seeds: Sequence[int],
    jobs: int,
) -> tuple[list[CheckResult], dict[str, AffineEstimator]]:
    """Per-subgrid metrics of affine estimators trained without the reference frame and with it as an input."""
    train_seed, test_seed, train_order = seeds
    prior = build_prior(cfg)
    model = cfg.noise_model
    shifts = balanced_shifts(cfg.n_frames)
    dataset = build_training_set(prior, shifts, model, cfg.n_bursts, train_seed, fresh_reference_target=True)
    test_set = build_training_set(prior, shifts, model, cfg.test_bursts, test_seed)
    variants = [(loss, include) for include in (False, True) for loss in ("selfsup", "supervised")]

    def fit(variant: tuple[str, bool]) -> AffineEstimator:
        loss, include_reference = variant
        train_cfg = TrainConfig(
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
            learning_rate=cfg.learning_rate,
            loss=loss,
            include_reference=include_reference,
            seed=train_order,
        )
        return train_affine(dataset, model, train_cfg)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=min(jobs, len(variants))) as pool:
            fitted = list(pool.map(fit, variants))
    else:
        fitted = [fit(variant) for variant in variants]

    # stacking even-height HR images keeps every pixel on its subgrid
    truths = ImageGrid(np.concatenate([s.truth.data for s in test_set]))  # type: ignore[union-attr]
    rows: list[CheckResult] = []
    estimators = {}
    for (loss, include_reference), estimator in zip(variants, fitted, strict=True):
        name = f"{loss}_with_reference" if include_reference else loss
        estimators[name] = estimator
        means = ImageGrid(np.concatenate([estimator.predict(s.burst).mean.data for s in test_set]))
        nu_hat = ImageGrid(np.tile(estimator.variance.data, (len(test_set), 1)))
        metrics = {
            "v_rmse": per_subgrid(v_rmse, nu_hat, means, truths),
            "calibration_error": per_subgrid(coverage_calibration_error, truths, means, nu_hat, levels=cfg.levels),
            "sharpness": per_subgrid(sharpness, nu_hat),
            "rmse": per_subgrid(rmse, truths, means),
            "mean_variance": per_subgrid(mean_value, nu_hat),
        }
        rows += [
            _info("trained", f"{metric}_{name}", values[tau], tau)
            for metric, values in metrics.items()
            for tau in ALL_SUBGRIDS
        ]
        if include_reference:
            smallest = _reference_is_smallest(metrics["mean_variance"])
            rows.append(_row("trained", f"variance_smallest_{name}_failure", float(not smallest), 0.0, ALL_SUBGRIDS[0]))
    return rows, estimators


def run_subgrid_study(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentOutput:
    """Whether subgrid ``(0,0)``, the one the reference frame samples, is the most certain.

    Oracle posteriors are scored per trial. Trained estimators are scored once on held-out bursts, with the
    reference frame left out of their inputs and with it included.
    """
    seeds = spawn_seeds(cfg.seed, cfg.instances + 3)
    trial_seeds, train_seeds = seeds[: cfg.instances], seeds[cfg.instances :]
    rows = _run_trials(lambda k, seed: _subgrid_rows(cfg, seed, str(k)), trial_seeds, jobs)
    for check in ("variance_smallest", "expected_rmse_smallest"):
        hits = [r.value for r in rows if r.check == check]
        rows.append(_row("all", f"{check}_failure_rate", 1.0 - sum(hits) / len(hits), SUBGRID_FAILURE_TOLERANCE))
    pooled = {tau: [r.value**2 for r in rows if r.check == "rmse" and r.subgrid == str(tau)] for tau in ALL_SUBGRIDS}
    rows += [_info("all", "pooled_rmse", math.sqrt(float(np.mean(pooled[tau]))), tau) for tau in ALL_SUBGRIDS]
    trained_rows, estimators = _trained_subgrid_rows(cfg, train_seeds, jobs)
    return ExperimentOutput(tuple(rows + trained_rows), tuple(seeds), estimators=estimators)


_RUNNERS: dict[ExperimentKind, Callable[[ExperimentConfig, int], ExperimentOutput]] = {
    ExperimentKind.gradcheck: run_gradcheck,
    ExperimentKind.stationarity: run_stationarity,
    ExperimentKind.prop1: run_prop1,
    ExperimentKind.train_affine: run_train_affine,
    ExperimentKind.coverage_study: run_coverage_study,
    ExperimentKind.subgrid_study: run_subgrid_study,
}


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentOutput:
    if jobs < 1:
        raise ValueError(f"jobs must be >= 1, got {jobs}")
    logger.info("Running experiment '%s' (config %s, seed %d)", cfg.experiment.value, cfg.config_hash(), cfg.seed)
    output = _RUNNERS[cfg.experiment](cfg, jobs)
    failed = sum(not row.passed for row in output.rows)
    if failed:
        logger.warning("%d of %d checks failed", failed, len(output.rows))
    else:
        logger.info("All %d checks passed", len(output.rows))
    return output


def write_results(path: Path | str, cfg: ExperimentConfig, rows: Sequence[CheckResult]) -> None:
    config_hash = cfg.config_hash()
    with Path(path).open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    config_hash,
                    cfg.experiment.value,
                    row.instance,
                    row.subgrid,
                    row.check,
                    repr(row.value),
                    repr(row.tolerance),
                    str(row.passed).lower(),
                ],
            )


def write_manifest(path: Path | str, cfg: ExperimentConfig, output: ExperimentOutput, version: str) -> None:
    lines = [
        f"version = {version}",
        f"config_hash = {cfg.config_hash()}",
        *cfg.canonical_lines(),
        f"trial_seeds = {', '.join(str(s) for s in output.seeds)}",
        f"results = {RESULTS_FILE}",
    ]
    lines.extend(f"raster = rasters/{name}.raw" for name in output.rasters if cfg.write_rasters)
    lines.extend(f"estimator = estimators/{name}" for name in output.estimators)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_artifacts(directory: Path | str, cfg: ExperimentConfig, output: ExperimentOutput, version: str) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_results(directory / RESULTS_FILE, cfg, output.rows)
    if cfg.write_rasters:
        (directory / "rasters").mkdir(exist_ok=True)
        for name, grid in output.rasters.items():
            write_raster(directory / "rasters" / f"{name}.raw", grid)
    for name, estimator in output.estimators.items():
        save_estimator(estimator, directory / "estimators" / name)
    write_manifest(directory / MANIFEST_FILE, cfg, output, version)
    logger.info("Wrote %d result rows to %s", len(output.rows), directory / RESULTS_FILE)
