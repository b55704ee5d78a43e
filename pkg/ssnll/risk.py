"""Per-input Bayes risk of the self-supervised NLL, its stationarity residuals and the optimal-estimator harness.

With ``tau`` uniform over the four subgrids every HR pixel ``k`` is sampled by exactly one ``tau``, so the
risk of a diagonal estimator is a sum of per-pixel terms
``1/4 * [(E[z_k^2] - 2 u_hat_k E[z_k] + u_hat_k^2) / (2 d_k) + 1/2 ln d_k]`` with ``d_k = nu_hat_k + r_hat_k``.
Only the first two target moments enter, whether they are exact or sample averages.
"""
import logging
import math
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
import scipy.linalg as la

from ._utils import make_rng, relative_error, spawn_seeds, standard_normal, substreams
from .degrade import VARIANCE_FLOOR, NoiseModel
from .exceptions import DimensionError, NonPositiveVarianceError, SampleSizeError
from .grid import ALL_SUBGRIDS, ImageGrid, spd_factorize, subgrid_indices
from .loss import EstimatorState, VarianceMode
from .optim import OptimConfig, minimize, variance_from_log
from .posterior import (
    GaussianPrior,
    GmmPrior,
    Observation,
    PosteriorSummary,
    gaussian_posterior,
    gmm_posterior_mixture,
)

logger = logging.getLogger(__name__)

USampler = Callable[[np.random.Generator, int], np.ndarray]

_MC_CHUNK = 1 << 14


class RHatMode(str, Enum):
    exact_diag = "exact_diag"
    from_mean_estimate = "from_mean_estimate"
    zero = "zero"


@dataclass(frozen=True, slots=True, eq=False)
class RiskProblem:
    """One input ``v``: its posterior moments, the noise model and how ``R_hat`` is formed.

    ``sampler`` draws ``u | v``; it defaults to a Gaussian with the posterior moments.
    """

    posterior: PosteriorSummary
    noise_model: NoiseModel
    r_hat_mode: RHatMode = RHatMode.exact_diag
    sampler: USampler | None = None

    def __post_init__(self):
        if self.posterior.mean.height % 2 or self.posterior.mean.width % 2:
            raise DimensionError("The posterior must live on an even-sized HR grid")
        object.__setattr__(self, "r_hat_mode", RHatMode(self.r_hat_mode))

    @classmethod
    def from_gaussian(
        cls,
        prior: GaussianPrior,
        observations: list[Observation],
        noise_model: NoiseModel,
        r_hat_mode: RHatMode = RHatMode.exact_diag,
    ) -> "RiskProblem":
        return cls(gaussian_posterior(prior, observations), noise_model, r_hat_mode)

    @classmethod
    def from_gmm(
        cls,
        prior: GmmPrior,
        observations: list[Observation],
        noise_model: NoiseModel,
        r_hat_mode: RHatMode = RHatMode.exact_diag,
    ) -> "RiskProblem":
        mixture = gmm_posterior_mixture(prior, observations)
        return cls(mixture.summary(), noise_model, r_hat_mode, sampler=mixture.sample)

    @property
    def shape(self) -> tuple[int, int]:
        return self.posterior.shape

    @property
    def tau_weights(self) -> np.ndarray:
        return np.full(len(ALL_SUBGRIDS), 1.0 / len(ALL_SUBGRIDS))

    def noise_variance(self) -> np.ndarray:
        """``R(v)`` per HR pixel: ``g`` at the posterior mean, exact for an affine ``g``."""
        return self.noise_model.variance(self.posterior.mean.data)

    def r_hat(self, mean: np.ndarray) -> np.ndarray:
        if self.r_hat_mode is RHatMode.exact_diag:
            return self.noise_variance()
        if self.r_hat_mode is RHatMode.from_mean_estimate:
            return self.noise_model.variance(mean)
        return np.full(mean.shape, VARIANCE_FLOOR)

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        sampler = self.sampler or self.posterior.sample
        return sampler(rng, n)


@dataclass(frozen=True, slots=True, eq=False)
class TargetMoments:
    """First and second moments of ``z_k``, the target value at HR pixel ``k`` under its own subgrid."""

    first: np.ndarray
    second: np.ndarray
    n_samples: int = 0

    @classmethod
    def exact(cls, problem: RiskProblem) -> "TargetMoments":
        mean = problem.posterior.mean.data
        return cls(mean, mean**2 + problem.posterior.diag.data + problem.noise_variance())


@dataclass(frozen=True, slots=True, eq=False)
class RiskGradient:
    mean: ImageGrid
    variance: ImageGrid


@dataclass(frozen=True, slots=True)
class CheckResult:
    instance: str
    check: str
    value: float
    tolerance: float
    passed: bool
    subgrid: str = "all"


@dataclass(frozen=True, slots=True)
class Prop1Report:
    rows: tuple[CheckResult, ...]

    @property
    def passed(self) -> bool:
        return all(row.passed for row in self.rows)

    def failed(self) -> list[CheckResult]:
        return [row for row in self.rows if not row.passed]


def _diagonal(est: EstimatorState) -> tuple[np.ndarray, np.ndarray]:
    if est.variance_mode is not VarianceMode.diagonal:
        raise DimensionError("Expected a diagonal estimator")
    assert est.diag_variance is not None
    return est.mean.data, est.diag_variance.data


def _combined(problem: RiskProblem, mean: np.ndarray, variance: np.ndarray) -> np.ndarray:
    combined = variance + np.maximum(problem.r_hat(mean), VARIANCE_FLOOR)
    if np.any(combined <= 0) or not np.all(np.isfinite(combined)):
        raise NonPositiveVarianceError("Combined variance must be finite and positive")
    return combined


def _check_shape(problem: RiskProblem, est: EstimatorState) -> None:
    if est.mean.shape != problem.shape:
        raise DimensionError(f"Estimator is {est.mean.height}x{est.mean.width}, problem is {problem.shape}")


def _risk_terms(
    problem: RiskProblem,
    mean: np.ndarray,
    variance: np.ndarray,
    moments: TargetMoments,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Risk value and its gradients with respect to ``u_hat`` and ``nu_hat`` on raw arrays (no clamping)."""
    combined = _combined(problem, mean, variance)
    squared = moments.second - 2.0 * mean * moments.first + mean**2
    value = 0.25 * float(np.sum(squared / (2.0 * combined) + 0.5 * np.log(combined)))
    d_combined = 0.25 * (0.5 / combined - squared / (2.0 * combined**2))
    d_mean = 0.25 * (mean - moments.first) / combined
    if problem.r_hat_mode is RHatMode.from_mean_estimate:
        model = problem.noise_model
        active = model.a * mean + model.b > VARIANCE_FLOOR
        d_mean = d_mean + np.where(active, model.a * d_combined, 0.0)
    return value, d_mean, d_combined


def moment_risk(problem: RiskProblem, est: EstimatorState, moments: TargetMoments) -> float:
    """Risk of a diagonal estimator given per-pixel target moments."""
    _check_shape(problem, est)
    mean, variance = _diagonal(est)
    return _risk_terms(problem, mean, variance, moments)[0]


def _full_risk(problem: RiskProblem, est: EstimatorState) -> float:
    assert est.cov_factor is not None
    sigma_hat = est.covariance()
    sigma = problem.posterior.cov.entries
    noise = problem.noise_variance().reshape(-1)
    bias = (problem.posterior.mean.data - est.mean.data).reshape(-1)
    total = 0.0
    for tau in ALL_SUBGRIDS:
        sel = subgrid_indices(problem.shape, tau)
        r_hat = np.maximum(problem.r_hat(est.mean.data).reshape(-1)[sel], VARIANCE_FLOOR)
        factor = spd_factorize(sigma_hat[np.ix_(sel, sel)] + np.diag(r_hat))
        target_cov = sigma[np.ix_(sel, sel)] + np.diag(noise[sel]) + np.outer(bias[sel], bias[sel])
        total += 0.5 * float(np.trace(factor.solve(target_cov))) + 0.5 * factor.logdet
    return 0.25 * total


def risk_closed_form(problem: RiskProblem, est: EstimatorState) -> float:
    """Expected self-supervised NLL over ``tau`` and ``z | v``, taken analytically."""
    _check_shape(problem, est)
    if est.variance_mode is VarianceMode.full:
        return _full_risk(problem, est)
    return moment_risk(problem, est, TargetMoments.exact(problem))


def risk_gradient(problem: RiskProblem, est: EstimatorState, moments: TargetMoments | None = None) -> RiskGradient:
    """Gradient of the diagonal-estimator risk with respect to ``u_hat`` and ``nu_hat``.

    With ``R_hat`` from the mean estimate, ``d`` moves with ``u_hat`` wherever ``g`` is above its floor.
    """
    _check_shape(problem, est)
    mean, variance = _diagonal(est)
    _, d_mean, d_variance = _risk_terms(problem, mean, variance, moments or TargetMoments.exact(problem))
    return RiskGradient(ImageGrid(d_mean), ImageGrid(d_variance))


def _sample_chunk(
    problem: RiskProblem,
    rng: np.random.Generator,
    n: int,
) -> np.ndarray:
    u = problem.draw(rng, n)
    if problem.noise_model.is_noiseless:
        return u
    return u + np.sqrt(problem.noise_model.variance(u)) * standard_normal(rng, u.shape)


def _chunk_sizes(n_samples: int) -> list[int]:
    sizes = [_MC_CHUNK] * (n_samples // _MC_CHUNK)
    if n_samples % _MC_CHUNK:
        sizes.append(n_samples % _MC_CHUNK)
    return sizes


def _run_chunks(work: Callable[[int], object], count: int, jobs: int) -> list:
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(work, range(count)))
    return [work(k) for k in range(count)]


def sample_moments(problem: RiskProblem, n_samples: int, seed: int, *, jobs: int = 1) -> TargetMoments:
    """Sample averages of ``z_k`` and ``z_k^2`` from ``n_samples`` draws of ``u | v`` and noise."""
    if n_samples < 1:
        raise SampleSizeError(f"n_samples must be >= 1, got {n_samples}")
    sizes = _chunk_sizes(n_samples)
    streams = substreams(seed, len(sizes))

    def run(k: int) -> tuple[np.ndarray, np.ndarray]:
        z = _sample_chunk(problem, streams[k], sizes[k])
        return z.sum(axis=0), (z**2).sum(axis=0)

    chunks = _run_chunks(run, len(sizes), jobs)
    first = sum(c[0] for c in chunks) / n_samples
    second = sum(c[1] for c in chunks) / n_samples
    return TargetMoments(first, second, n_samples)


def risk_monte_carlo(
    problem: RiskProblem,
    est: EstimatorState,
    n_samples: int,
    seed: int,
    *,
    jobs: int = 1,
) -> tuple[float, float]:
    """Sample-average risk and its standard error.

    Each draw of ``(u, n)`` is scored under all four subgrids and averaged, a stratified draw of ``tau``.
    """
    _check_shape(problem, est)
    if n_samples < 2:
        raise SampleSizeError(f"n_samples must be >= 2, got {n_samples}")
    mean, variance = _diagonal(est)
    combined = _combined(problem, mean, variance)
    log_term = 0.5 * float(np.sum(np.log(combined)))
    sizes = _chunk_sizes(n_samples)
    streams = substreams(seed, len(sizes))

    def run(k: int) -> np.ndarray:
        z = _sample_chunk(problem, streams[k], sizes[k])
        return 0.25 * (np.sum((z - mean) ** 2 / (2.0 * combined), axis=(-2, -1)) + log_term)

    losses = np.concatenate(_run_chunks(run, len(sizes), jobs))
    return float(losses.mean()), float(losses.std(ddof=1) / math.sqrt(n_samples))


def stationarity_mean_residual(problem: RiskProblem, est: EstimatorState) -> float:
    """Max-norm of ``sum_tau A_tau^T M_hat A_tau (u_hat - E[u|v])``; ``max |u_hat - E[u|v]| / d`` if diagonal."""
    _check_shape(problem, est)
    bias = est.mean.data - problem.posterior.mean.data
    if est.variance_mode is VarianceMode.diagonal:
        _, variance = _diagonal(est)
        return float(np.max(np.abs(bias) / _combined(problem, est.mean.data, variance)))
    return float(np.max(np.abs(_mean_operator(problem, est) @ bias.reshape(-1))))


def stationarity_var_residual_diag(problem: RiskProblem, est: EstimatorState) -> float:
    """``max_k |1/d_k - C_k / d_k^2|`` with ``C_k = Sigma_kk + R_k + (u_hat_k - E[u|v]_k)^2``.

    The bias term vanishes at ``u_hat = E[u|v]``. Pixels whose posterior variance sits at or below the variance
    floor have no interior stationary point and are left out.
    """
    _check_shape(problem, est)
    mean, variance = _diagonal(est)
    combined = _combined(problem, mean, variance)
    target = problem.posterior.diag.data + problem.noise_variance() + (mean - problem.posterior.mean.data) ** 2
    residual = np.abs(1.0 / combined - target / combined**2)
    interior = problem.posterior.diag.data > 10 * VARIANCE_FLOOR
    if not np.any(interior):
        return 0.0
    return float(np.max(residual[interior]))


def _covariance_residual_matrix(problem: RiskProblem, est: EstimatorState) -> np.ndarray:
    size = est.mean.size
    sigma_hat = est.covariance()
    sigma = problem.posterior.cov.entries
    noise = problem.noise_variance().reshape(-1)
    bias = (est.mean.data - problem.posterior.mean.data).reshape(-1)
    r_hat_all = np.maximum(problem.r_hat(est.mean.data).reshape(-1), VARIANCE_FLOOR)
    out = np.zeros((size, size))
    for tau in ALL_SUBGRIDS:
        sel = subgrid_indices(problem.shape, tau)
        precision = spd_factorize(sigma_hat[np.ix_(sel, sel)] + np.diag(r_hat_all[sel])).inverse()
        target_cov = sigma[np.ix_(sel, sel)] + np.diag(noise[sel]) + np.outer(bias[sel], bias[sel])
        out[np.ix_(sel, sel)] = precision - precision @ target_cov @ precision
    return out


def stationarity_cov_residual_full(problem: RiskProblem, est: EstimatorState) -> float:
    """Max-norm of ``sum_tau A_tau^T (M_hat - M_hat C_tau M_hat) A_tau`` for a full-covariance estimator."""
    _check_shape(problem, est)
    if est.variance_mode is not VarianceMode.full:
        raise DimensionError("Expected a full-covariance estimator")
    return float(np.max(np.abs(_covariance_residual_matrix(problem, est))))


def _mean_operator(problem: RiskProblem, est: EstimatorState) -> np.ndarray:
    """``sum_tau A_tau^T M_hat_tau A_tau`` as a dense HR matrix."""
    size = est.mean.size
    if est.variance_mode is VarianceMode.diagonal:
        _, variance = _diagonal(est)
        return np.diag(1.0 / _combined(problem, est.mean.data, variance).reshape(-1))
    sigma_hat = est.covariance()
    r_hat_all = np.maximum(problem.r_hat(est.mean.data).reshape(-1), VARIANCE_FLOOR)
    out = np.zeros((size, size))
    for tau in ALL_SUBGRIDS:
        sel = subgrid_indices(problem.shape, tau)
        out[np.ix_(sel, sel)] = spd_factorize(sigma_hat[np.ix_(sel, sel)] + np.diag(r_hat_all[sel])).inverse()
    return out


def mean_operator_min_eigenvalue(problem: RiskProblem, est: EstimatorState) -> float:
    """Smallest eigenvalue of the mean-stationarity operator; positive means ``u_hat`` is pinned down uniquely."""
    _check_shape(problem, est)
    return float(la.eigh(_mean_operator(problem, est), eigvals_only=True)[0])


def exact_estimator(problem: RiskProblem, *, variance: np.ndarray | None = None) -> EstimatorState:
    """Posterior mean with ``diag Sigma(v)`` (clamped to the floor) or a given variance map."""
    if variance is None:
        variance = problem.posterior.diag.data
    return EstimatorState.diagonal(problem.posterior.mean, ImageGrid(np.maximum(variance, VARIANCE_FLOOR)))


def _exp(values: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return np.exp(values)


def _joint_objective(problem: RiskProblem, moments: TargetMoments):
    """Risk over ``x = [u_hat, log nu_hat]`` and a diagonal preconditioner (inverse curvature at the optimum)."""
    shape = problem.shape
    size = problem.posterior.mean.size

    def objective(x: np.ndarray) -> tuple[float, np.ndarray]:
        mean, variance = x[:size].reshape(shape), _exp(x[size:]).reshape(shape)
        if not np.all(np.isfinite(variance)):
            return math.inf, np.zeros_like(x)
        value, d_mean, d_variance = _risk_terms(problem, mean, variance, moments)
        return value, np.concatenate([d_mean.reshape(-1), (d_variance * variance).reshape(-1)])

    def precondition(x: np.ndarray) -> np.ndarray:
        variance = np.exp(x[size:])
        combined = _combined(problem, x[:size].reshape(shape), variance.reshape(shape)).reshape(-1)
        return np.concatenate([4.0 * combined, 8.0 * (combined / variance) ** 2])

    return objective, precondition


def _variance_objective(problem: RiskProblem, moments: TargetMoments, frozen_mean: np.ndarray):
    shape = problem.shape

    def objective(s: np.ndarray) -> tuple[float, np.ndarray]:
        variance = _exp(s).reshape(shape)
        if not np.all(np.isfinite(variance)):
            return math.inf, np.zeros_like(s)
        value, _, d_variance = _risk_terms(problem, frozen_mean, variance, moments)
        return value, (d_variance * variance).reshape(-1)

    def precondition(s: np.ndarray) -> np.ndarray:
        variance = np.exp(s)
        combined = _combined(problem, frozen_mean, variance.reshape(shape)).reshape(-1)
        return 8.0 * (combined / variance) ** 2

    return objective, precondition


@dataclass(frozen=True, slots=True)
class _Run:
    mean: np.ndarray
    variance: np.ndarray
    converged: bool
    iterations: int

    def state(self) -> EstimatorState:
        return EstimatorState.diagonal(ImageGrid(self.mean), ImageGrid(self.variance))


def _minimize_risk(problem: RiskProblem, moments: TargetMoments, seed: int, cfg: OptimConfig) -> _Run:
    rng = make_rng(seed)
    size = problem.posterior.mean.size
    spread = np.sqrt(np.maximum(moments.second - moments.first**2, VARIANCE_FLOOR)).reshape(-1)
    init_mean = moments.first.reshape(-1) + 3.0 * spread * standard_normal(rng, size)
    init_log_variance = np.log(spread**2) + rng.uniform(-2.0, 2.0, size=size)
    objective, precondition = _joint_objective(problem, moments)
    lower = np.concatenate([np.full(size, -np.inf), np.full(size, cfg.log_variance_floor)])
    init = np.concatenate([init_mean, init_log_variance])
    result = minimize(objective, init, cfg, lower=lower, precondition=precondition)
    return _Run(
        mean=result.x[:size].reshape(problem.shape),
        variance=variance_from_log(result.x[size:], cfg.log_variance_floor).reshape(problem.shape),
        converged=result.converged,
        iterations=result.iterations,
    )


def _minimize_variance(
    problem: RiskProblem,
    moments: TargetMoments,
    frozen_mean: np.ndarray,
    cfg: OptimConfig,
) -> np.ndarray:
    objective, precondition = _variance_objective(problem, moments, frozen_mean)
    init = np.log(np.maximum(moments.second - moments.first**2, VARIANCE_FLOOR)).reshape(-1)
    lower = np.full(init.size, cfg.log_variance_floor)
    result = minimize(objective, init, cfg, lower=lower, precondition=precondition)
    if not result.converged:
        logger.warning("Variance-only minimization did not converge after %d iterations", result.iterations)
    return variance_from_log(result.x, cfg.log_variance_floor).reshape(problem.shape)


def _row(instance: str, check: str, value: float, tolerance: float) -> CheckResult:
    return CheckResult(instance, check, float(value), float(tolerance), bool(value <= tolerance))


def verify_proposition1(
    problem: RiskProblem,
    tolerance: float = 1e-4,
    *,
    restarts: int = 20,
    seed: int = 0,
    cfg: OptimConfig | None = None,
    bias: ImageGrid | None = None,
    check_zero_correction: bool = True,
    mc_samples: int | None = None,
    instance: str = "0",
    jobs: int = 1,
) -> Prop1Report:
    """Minimize the per-input risk from random starts and compare every minimizer with the posterior moments.

    With ``mc_samples`` the risk is the sample average over that many ``(u, n)`` draws instead of the closed form.
    Also checks that ``R_hat = 0`` inflates the optimal variance by the noise variance and, given ``bias``, that a
    frozen ``E[u|v] + bias`` inflates it by ``bias^2``. Non-converged restarts are flagged as failed rows.
    """
    cfg = cfg or OptimConfig(max_iters=20000)
    problem = replace(problem, r_hat_mode=RHatMode.exact_diag)
    if mc_samples is None:
        moments = TargetMoments.exact(problem)
    else:
        moments = sample_moments(problem, mc_samples, seed, jobs=jobs)
    post_mean = problem.posterior.mean.data
    post_var = problem.posterior.diag.data
    expected_var = np.maximum(post_var, VARIANCE_FLOOR)
    inflation_tolerance = max(tolerance, 1e-3)
    rows: list[CheckResult] = []

    solution = exact_estimator(problem)
    rows.append(_row(instance, "invertibility_min_eigenvalue", -mean_operator_min_eigenvalue(problem, solution), 0.0))
    rows.append(_row(instance, "solution_mean_residual", stationarity_mean_residual(problem, solution), 1e-10))
    rows.append(_row(instance, "solution_variance_residual", stationarity_var_residual_diag(problem, solution), 1e-10))

    restart_seeds = spawn_seeds(seed, restarts)
    runs = _run_chunks(lambda k: _minimize_risk(problem, moments, restart_seeds[k], cfg), restarts, jobs)
    for k, run in enumerate(runs):
        rows.append(
            CheckResult(instance, f"restart_{k}_converged", float(run.iterations), float(cfg.max_iters), run.converged),
        )
        rows.append(_row(instance, f"restart_{k}_mean", relative_error(run.mean, post_mean), tolerance))
        rows.append(_row(instance, f"restart_{k}_variance", relative_error(run.variance, expected_var), tolerance))
    spread = max(max(relative_error(r.mean, runs[0].mean), relative_error(r.variance, runs[0].variance)) for r in runs)
    rows.append(_row(instance, "restart_spread", spread, tolerance))

    if mc_samples is None:
        best = min(runs, key=lambda run: moment_risk(problem, run.state(), moments))
        minimizer = best.state()
        rows.append(_row(instance, "minimizer_mean_residual", stationarity_mean_residual(problem, minimizer), 1e-6))
        rows.append(
            _row(instance, "minimizer_variance_residual", stationarity_var_residual_diag(problem, minimizer), 1e-5),
        )

    if check_zero_correction:
        zero_problem = replace(problem, r_hat_mode=RHatMode.zero)
        inflated = _minimize_variance(zero_problem, moments, post_mean, cfg)
        expected = np.maximum(post_var + problem.noise_variance(), VARIANCE_FLOOR)
        rows.append(_row(instance, "zero_correction_variance", relative_error(inflated, expected), inflation_tolerance))

    if bias is not None:
        inflated = _minimize_variance(problem, moments, post_mean + bias.data, cfg)
        expected = np.maximum(post_var + bias.data**2, VARIANCE_FLOOR)
        rows.append(_row(instance, "bias_inflation_variance", relative_error(inflated, expected), inflation_tolerance))

    report = Prop1Report(tuple(rows))
    for row in report.failed():
        logger.warning("Instance %s: check '%s' failed with %.3g > %.3g", instance, row.check, row.value, row.tolerance)
    return report
