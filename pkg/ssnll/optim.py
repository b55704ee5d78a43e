"""Gradient descent with backtracking, finite-difference gradient checks and the amortized affine estimator."""
import logging
import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import scipy.linalg as la
from pydantic import BaseModel, Extra, validator

from ._utils import derive_seed, make_rng, spawn_seeds
from .degrade import VARIANCE_FLOOR, Burst, NoiseModel, apply_shift_subsample, observe_integer_burst, sample_noise
from .exceptions import DimensionError, DivergenceError, GradientCheckError, NonFiniteObjectiveError
from .grid import (
    ALL_SUBGRIDS,
    DenseMatrix,
    ImageGrid,
    embed_array,
    read_block,
    subgrid_of_pixels,
    write_raster,
)
from .loss import DiagBatchTerms, EstimatorState, selfsup_batch_terms, supervised_batch_terms
from .posterior import GaussianPrior, GmmPrior

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]

LOG_VARIANCE_FLOOR = math.log(VARIANCE_FLOOR)
FD_STEPS = (1e-4, 1e-6)
FD_ABSOLUTE_FLOOR = 1e-9
_SPOT_CHECK_COORDINATES = 8
# caps the natural-gradient scaling of log-variance steps where the noise dwarfs the variance
_FISHER_RATIO_CAP = 10.0


class OptimConfig(BaseModel):
    max_iters: int = 5000
    grad_tol: float = 1e-8
    initial_step: float = 1.0
    shrink: float = 0.5
    sufficient_decrease: float = 1e-4
    min_step: float = 1e-16
    log_variance_floor: float = LOG_VARIANCE_FLOOR
    check_gradient: bool = True
    check_tolerance: float = 1e-4

    class Config:
        extra = Extra.forbid
        allow_mutation = False

    @validator("max_iters")
    def _at_least_one_iteration(cls, value: int) -> int:
        if value < 1:
            raise ValueError(f"max_iters must be >= 1, got {value}")
        return value

    @validator("grad_tol", "initial_step", "min_step", "check_tolerance")
    def _positive(cls, value: float) -> float:
        if not value > 0:
            raise ValueError(f"must be > 0, got {value}")
        return value

    @validator("shrink", "sufficient_decrease")
    def _unit_interval(cls, value: float) -> float:
        if not 0 < value < 1:
            raise ValueError(f"must lie in (0, 1), got {value}")
        return value


@dataclass(frozen=True, slots=True)
class MinimizeResult:
    x: np.ndarray
    value: float
    iterations: int
    converged: bool


def variance_from_log(log_variance: np.ndarray, floor: float = LOG_VARIANCE_FLOOR) -> np.ndarray:
    return np.exp(np.maximum(log_variance, floor))


def fd_check(
    objective: Objective,
    point: np.ndarray,
    h_schedule: Sequence[float] = FD_STEPS,
    coordinates: Iterable[int] | None = None,
) -> float:
    """Worst per-coordinate relative gap between the analytic gradient and central differences.

    Each coordinate keeps its best step from ``h_schedule`` (scaled by ``max(1, |x_i|)``); gaps below an absolute
    ``1e-9`` count as zero.
    """
    point = np.array(point, dtype=np.float64)
    _, grad = objective(point)
    grad = np.asarray(grad, dtype=np.float64).reshape(-1)
    worst = 0.0
    for i in range(point.size) if coordinates is None else coordinates:
        best = math.inf
        for h_rel in h_schedule:
            h = h_rel * max(1.0, abs(point[i]))
            forward, backward = point.copy(), point.copy()
            forward[i] += h
            backward[i] -= h
            fd = (objective(forward)[0] - objective(backward)[0]) / (2.0 * h)
            gap = abs(fd - grad[i])
            error = 0.0 if gap <= FD_ABSOLUTE_FLOOR else gap / max(abs(grad[i]), abs(fd))
            best = min(best, error)
        worst = max(worst, best)
    logger.debug("Finite-difference check over %d coordinates: worst relative error %.3g", point.size, worst)
    return worst


def _spot_coordinates(size: int) -> np.ndarray:
    if size <= _SPOT_CHECK_COORDINATES:
        return np.arange(size)
    return np.unique(np.linspace(0, size - 1, _SPOT_CHECK_COORDINATES).astype(int))


def _projected_gradient_norm(x: np.ndarray, grad: np.ndarray, lower: np.ndarray | None) -> float:
    if lower is None:
        return float(np.max(np.abs(grad)))
    return float(np.max(np.abs(x - np.maximum(x - grad, lower))))


def minimize(
    objective: Objective,
    init: np.ndarray,
    cfg: OptimConfig | None = None,
    *,
    lower: np.ndarray | None = None,
    precondition: Callable[[np.ndarray], np.ndarray] | None = None,
) -> MinimizeResult:
    """Projected, diagonally scaled gradient descent with Armijo backtracking.

    ``lower`` bounds coordinates from below (used for log-variance floors); ``precondition`` returns a positive
    per-coordinate scaling of the descent direction. Every accepted step satisfies the sufficient-decrease test,
    so the objective never increases between iterates.
    """
    cfg = cfg or OptimConfig()
    x = np.array(init, dtype=np.float64).reshape(-1)
    if lower is not None:
        lower = np.broadcast_to(np.asarray(lower, dtype=np.float64), x.shape)
        x = np.maximum(x, lower)
    value, grad = objective(x)
    if not (math.isfinite(value) and np.all(np.isfinite(grad))):
        raise NonFiniteObjectiveError(f"Objective is not finite at the initial point (value {value})")
    if cfg.check_gradient:
        error = fd_check(objective, x, coordinates=_spot_coordinates(x.size))
        if error > cfg.check_tolerance:
            raise GradientCheckError(
                f"Analytic gradient disagrees with finite differences at the initial point: {error:.3g} > "
                f"{cfg.check_tolerance}",
            )

    iterations = 0
    step = cfg.initial_step
    converged = False
    while True:
        if _projected_gradient_norm(x, grad, lower) <= cfg.grad_tol:
            converged = True
            break
        if iterations >= cfg.max_iters:
            break
        direction = -grad if precondition is None else -precondition(x) * grad
        while step >= cfg.min_step:
            trial = x + step * direction
            if lower is not None:
                trial = np.maximum(trial, lower)
            trial_value, trial_grad = objective(trial)
            if math.isfinite(trial_value) and trial_value <= value + cfg.sufficient_decrease * (grad @ (trial - x)):
                break
            step *= cfg.shrink
        else:
            logger.info("Line search stalled after %d iterations at objective %.12g", iterations, value)
            break
        if not np.all(np.isfinite(trial_grad)):
            raise NonFiniteObjectiveError(f"Gradient is not finite after {iterations} iterations")
        x, value, grad = trial, trial_value, np.asarray(trial_grad, dtype=np.float64)
        iterations += 1
        step = min(cfg.initial_step, 2.0 * step)
        if iterations % 1000 == 0:
            logger.debug("iteration %d: objective %.12g", iterations, value)
    return MinimizeResult(x=x, value=float(value), iterations=iterations, converged=converged)


class TrainConfig(BaseModel):
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 1e-2
    loss: Literal["selfsup", "supervised"] = "selfsup"
    include_reference: bool = False
    divergence_threshold: float = 1e6
    seed: int = 0

    class Config:
        extra = Extra.forbid
        allow_mutation = False

    @validator("epochs", "batch_size")
    def _positive_count(cls, value: int) -> int:
        if value < 1:
            raise ValueError(f"must be >= 1, got {value}")
        return value

    @validator("learning_rate", "divergence_threshold")
    def _positive(cls, value: float) -> float:
        if not value > 0:
            raise ValueError(f"must be > 0, got {value}")
        return value


@dataclass(frozen=True, slots=True, eq=False)
class TrainingSample:
    """A burst, its four noisy per-subgrid targets (indexed by ``SubgridId.index``) and optionally the HR truth."""

    burst: Burst
    targets: tuple[ImageGrid, ...]
    truth: ImageGrid | None = None

    def __post_init__(self):
        if len(self.targets) != len(ALL_SUBGRIDS):
            raise DimensionError(f"Expected one target per subgrid, got {len(self.targets)}")
        if any(t.shape != self.burst.lr_shape for t in self.targets):
            raise DimensionError("Targets must match the burst's LR shape")
        lr_height, lr_width = self.burst.lr_shape
        if self.truth is not None and self.truth.shape != (2 * lr_height, 2 * lr_width):
            raise DimensionError("Ground truth must be the burst's HR shape")


def build_training_set(
    prior: GaussianPrior | GmmPrior,
    shifts: Sequence[tuple[int, int]],
    model: NoiseModel,
    n_bursts: int,
    seed: int,
    *,
    fresh_reference_target: bool = False,
) -> list[TrainingSample]:
    """Linear-Gaussian synthetic dataset: ``u`` from the prior, integer-shift bursts, unit exposures.

    The reference frame doubles as the ``(0,0)`` target; the other three targets are fresh noisy views of ``u``.
    Estimators that take the reference frame as an input need ``fresh_reference_target`` so that no target is
    also an input.
    """
    dataset = []
    for burst_seed in spawn_seeds(seed, n_bursts):
        rng = make_rng(burst_seed)
        u = ImageGrid(prior.sample(rng, 1)[0])
        burst = observe_integer_burst(u, shifts, model, derive_seed(rng))
        targets: list[ImageGrid] = [] if fresh_reference_target else [burst.reference]
        for tau in ALL_SUBGRIDS[len(targets) :]:
            targets.append(sample_noise(apply_shift_subsample(u, tau), model, derive_seed(rng)))
        dataset.append(TrainingSample(burst, tuple(targets), truth=u))
    return dataset


def stacked_frames(burst: Burst, *, include_reference: bool) -> np.ndarray:
    frames = burst.normalized_frames()
    return np.concatenate([frames[t].flat() for t in burst.input_indices(include_reference=include_reference)])


def fit_standardization(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Centering offset and symmetric (ZCA) whitening matrix of a feature table."""
    offset = features.mean(axis=0)
    centered = features - offset
    cov = centered.T @ centered / features.shape[0]
    eigenvalues, eigenvectors = la.eigh(cov)
    floor = max(float(eigenvalues[-1]), 1e-300) * 1e-12
    inv_sqrt = 1.0 / np.sqrt(np.maximum(eigenvalues, floor))
    return offset, (eigenvectors * inv_sqrt) @ eigenvectors.T


@dataclass(frozen=True, slots=True, eq=False)
class AffineEstimator:
    """``u_hat(v) = weights @ standardize(v) + bias`` with an input-independent ``nu_hat = exp(log_variance)``."""

    weights: DenseMatrix
    bias: ImageGrid
    log_variance: ImageGrid
    input_offset: np.ndarray
    input_whitening: DenseMatrix
    include_reference: bool = False
    seed: int = 0

    def __post_init__(self):
        offset = np.asarray(self.input_offset, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "input_offset", offset)
        if self.bias.shape != self.log_variance.shape:
            raise DimensionError("Bias and log-variance must share the HR shape")
        if self.weights.rows != self.bias.size:
            raise DimensionError(f"Weights have {self.weights.rows} rows for {self.bias.size} HR pixels")
        if not self.weights.cols == offset.size == self.input_whitening.rows == self.input_whitening.cols:
            raise DimensionError("Weights, input offset and whitening disagree on the feature count")
        for name, values in (
            ("weights", self.weights.entries),
            ("input_offset", offset),
            ("input_whitening", self.input_whitening.entries),
        ):
            if not np.all(np.isfinite(values)):
                raise DimensionError(f"Affine estimator field '{name}' has non-finite entries")

    @property
    def hr_shape(self) -> tuple[int, int]:
        return self.bias.shape

    @property
    def variance(self) -> ImageGrid:
        return ImageGrid(variance_from_log(self.log_variance.data))

    def standardize(self, features: np.ndarray) -> np.ndarray:
        return (features - self.input_offset) @ self.input_whitening.entries.T

    def predict_mean_array(self, features: np.ndarray) -> np.ndarray:
        return self.standardize(features) @ self.weights.entries.T + self.bias.flat()

    def predict(self, burst: Burst) -> EstimatorState:
        features = stacked_frames(burst, include_reference=self.include_reference)
        if features.size != self.input_offset.size:
            raise DimensionError(f"Burst gives {features.size} features, estimator expects {self.input_offset.size}")
        mean = self.predict_mean_array(features).reshape(self.hr_shape)
        return EstimatorState.diagonal(ImageGrid(mean), self.variance)

    def effective_weights(self) -> np.ndarray:
        """The map applied to raw stacked frames once standardization is folded in."""
        return self.weights.entries @ self.input_whitening.entries

    def effective_bias(self) -> np.ndarray:
        return self.bias.flat() - self.effective_weights() @ self.input_offset


def _check_dataset(dataset: Sequence[TrainingSample], cfg: TrainConfig) -> tuple[int, int]:
    if not dataset:
        raise DimensionError("Training needs at least one sample")
    geometry = {(s.burst.lr_shape, s.burst.n_frames, s.burst.reference_index) for s in dataset}
    if len(geometry) != 1:
        raise DimensionError("All training bursts must share one geometry")
    if cfg.loss == "supervised" and any(s.truth is None for s in dataset):
        raise DimensionError("Supervised training needs the HR ground truth of every sample")
    return dataset[0].burst.lr_shape


def _training_arrays(
    dataset: Sequence[TrainingSample],
    selfsup: bool,
    hr_shape: tuple[int, int],
) -> np.ndarray:
    """One flattened HR row per sample: the four noisy targets on their subgrids, or the ground truth."""
    if selfsup:
        return np.stack(
            [sum(embed_array(t.data, tau) for t, tau in zip(s.targets, ALL_SUBGRIDS, strict=True)) for s in dataset],
        ).reshape(len(dataset), hr_shape[0] * hr_shape[1])
    return np.stack([s.truth.flat() for s in dataset])  # type: ignore[union-attr]


def _batch_terms(
    targets: np.ndarray,
    means: np.ndarray,
    variance: np.ndarray,
    mask: np.ndarray | None,
    model: NoiseModel,
) -> DiagBatchTerms:
    if mask is None:
        return supervised_batch_terms(targets, means, variance)
    return selfsup_batch_terms(targets, means, variance, mask, model)


def _step_scales(terms: DiagBatchTerms, variance: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel step scales for the mean and the log-variance, shared by every sample of the batch.

    The mean scale is the harmonic mean of the combined variance ``d``. The log-variance scale is the inverse
    Fisher information ``2 (d/nu)^2``, with one factor ``d/nu`` capped.
    """
    mean_scale = 1.0 / np.mean(1.0 / terms.combined, axis=0)
    ratio = 1.0 / np.sqrt(np.mean((variance / terms.combined) ** 2, axis=0))
    return mean_scale, 2.0 * ratio * np.minimum(ratio, _FISHER_RATIO_CAP)


def train_affine(
    dataset: Sequence[TrainingSample],
    model: NoiseModel,
    cfg: TrainConfig | None = None,
) -> AffineEstimator:
    """Mini-batch descent on the empirical NLL with a fixed step halved after each third of the epochs.

    A fresh subgrid ``tau`` is drawn for every sample in every epoch, and ``R_hat`` comes from the current
    prediction (held constant within the step). Gradients are scaled per pixel, never per sample, so training
    stops where the NLL gradient vanishes. On whitened inputs with a constant noise variance the mean step is the
    least-mean-squares update.
    """
    cfg = cfg or TrainConfig()
    lr_height, lr_width = _check_dataset(dataset, cfg)
    hr_shape = (2 * lr_height, 2 * lr_width)
    selfsup = cfg.loss == "selfsup"

    features = np.stack([stacked_frames(s.burst, include_reference=cfg.include_reference) for s in dataset])
    offset, whitening = fit_standardization(features)
    inputs = (features - offset) @ whitening.T
    targets = _training_arrays(dataset, selfsup, hr_shape)
    pixel_subgrid = subgrid_of_pixels(hr_shape).reshape(-1)

    n_samples, n_features = inputs.shape
    weights = np.zeros((targets.shape[1], n_features))
    bias = targets.mean(axis=0)
    log_variance = np.log(np.maximum(targets.var(axis=0), VARIANCE_FLOOR))
    rng = make_rng(cfg.seed)
    decay_every = max(1, math.ceil(cfg.epochs / 3))

    for epoch in range(cfg.epochs):
        step = cfg.learning_rate * 0.5 ** (epoch // decay_every)
        order = rng.permutation(n_samples)
        taus = rng.integers(0, len(ALL_SUBGRIDS), size=n_samples)
        epoch_loss = 0.0
        for start in range(0, n_samples, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            x = inputs[batch]
            variance = variance_from_log(log_variance)
            mask = (pixel_subgrid[None, :] == taus[batch][:, None]).astype(np.float64) if selfsup else None
            terms = _batch_terms(targets[batch], x @ weights.T + bias, variance, mask, model)
            batch_loss = float(np.mean(terms.values))
            if not math.isfinite(batch_loss) or batch_loss > cfg.divergence_threshold:
                raise DivergenceError(
                    f"Training diverged in epoch {epoch}: batch loss {batch_loss:.6g} exceeds "
                    f"{cfg.divergence_threshold:g}",
                )
            epoch_loss += batch_loss * len(batch)

            mean_scale, log_scale = _step_scales(terms, variance)
            grad_mean = terms.grad_mean * mean_scale
            weights -= step * grad_mean.T @ x / len(batch)
            bias -= step * grad_mean.mean(axis=0)
            log_variance -= step * np.mean(terms.grad_variance, axis=0) * variance * log_scale
            np.maximum(log_variance, LOG_VARIANCE_FLOOR, out=log_variance)
        logger.debug("epoch %d: step %.3g, mean loss %.8g", epoch, step, epoch_loss / n_samples)

    logger.info("Trained affine estimator (%s loss) for %d epochs on %d bursts", cfg.loss, cfg.epochs, n_samples)
    return AffineEstimator(
        weights=DenseMatrix(weights),
        bias=ImageGrid(bias.reshape(hr_shape)),
        log_variance=ImageGrid(log_variance.reshape(hr_shape)),
        input_offset=offset,
        input_whitening=DenseMatrix(whitening),
        include_reference=cfg.include_reference,
        seed=cfg.seed,
    )


def variance_stationarity_residual(
    estimator: AffineEstimator,
    dataset: Sequence[TrainingSample],
    model: NoiseModel,
    loss: Literal["selfsup", "supervised"] = "selfsup",
) -> ImageGrid:
    """Per-pixel gradient of the empirical NLL in ``log nu`` over every target of ``dataset``, divided by its Fisher
    information.

    Each pixel is scored against the target of its own subgrid. The residual is zero where the NLL is stationary in
    ``nu``; with a constant noise variance it equals ``(nu - nu_opt) / nu`` exactly.
    """
    if not dataset:
        raise DimensionError("The stationarity residual needs at least one sample")
    selfsup = loss == "selfsup"
    features = np.stack([stacked_frames(s.burst, include_reference=estimator.include_reference) for s in dataset])
    means = estimator.predict_mean_array(features)
    targets = _training_arrays(dataset, selfsup, estimator.hr_shape)
    variance = estimator.variance.flat()
    terms = _batch_terms(targets, means, variance, np.ones_like(means) if selfsup else None, model)
    gradient = np.mean(terms.grad_variance, axis=0) * variance
    fisher = 0.5 * np.mean((variance / terms.combined) ** 2, axis=0)
    return ImageGrid((gradient / fisher).reshape(estimator.hr_shape))


_ESTIMATOR_MANIFEST = "manifest.txt"
_ESTIMATOR_BLOCKS = ("weights", "bias", "log_variance", "input_offset", "input_whitening")


def save_estimator(estimator: AffineEstimator, directory: Path | str, cfg: TrainConfig | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blocks = {
        "weights": estimator.weights.entries,
        "bias": estimator.bias.data,
        "log_variance": estimator.log_variance.data,
        "input_offset": estimator.input_offset.reshape(1, -1),
        "input_whitening": estimator.input_whitening.entries,
    }
    lines = [
        f"hr_height = {estimator.hr_shape[0]}",
        f"hr_width = {estimator.hr_shape[1]}",
        f"n_features = {estimator.input_offset.size}",
        f"include_reference = {str(estimator.include_reference).lower()}",
        f"seed = {estimator.seed}",
    ]
    if cfg is not None:
        lines.extend(f"train.{key} = {value}" for key, value in cfg.dict().items())
    for name, block in blocks.items():
        write_raster(directory / f"{name}.raw", block)
        lines.append(f"block = {name}.raw")
    (directory / _ESTIMATOR_MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_estimator(directory: Path | str) -> AffineEstimator:
    directory = Path(directory)
    header = {}
    for raw_line in (directory / _ESTIMATOR_MANIFEST).read_text(encoding="utf-8").splitlines():
        key, _, value = (part.strip() for part in raw_line.partition("="))
        if key and key != "block":
            header[key] = value
    blocks = {name: read_block(directory / f"{name}.raw") for name in _ESTIMATOR_BLOCKS}
    return AffineEstimator(
        weights=DenseMatrix(blocks["weights"]),
        bias=ImageGrid(blocks["bias"]),
        log_variance=ImageGrid(blocks["log_variance"]),
        input_offset=blocks["input_offset"].reshape(-1),
        input_whitening=DenseMatrix(blocks["input_whitening"]),
        include_reference=header["include_reference"] == "true",
        seed=int(header["seed"]),
    )
