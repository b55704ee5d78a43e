"""Supervised and self-supervised Gaussian NLL losses with their analytic gradients.

Constant ``0.5 * dim * log(2*pi)`` terms are omitted from every NLL value. With a diagonal estimator and a
subgrid selection ``A_tau``, ``A_tau diag(nu) A_tau^T`` is diagonal with entries ``nu[2l + tau]``, so the diagonal
path never builds a matrix.
"""
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .degrade import VARIANCE_FLOOR, NoiseModel
from .exceptions import DefinitenessError, DimensionError, NonPositiveVarianceError
from .grid import (
    DenseMatrix,
    ImageGrid,
    SpdFactorization,
    SubgridId,
    dense_cap_check,
    embed_array,
    extract_array,
    require_even,
    require_same_shape,
    spd_factorize,
    subgrid_indices,
)

FACTOR_DIAGONAL_FLOOR = 1e-8


class VarianceMode(str, Enum):
    diagonal = "diagonal"
    full = "full"


def _checked_variance(values: np.ndarray, what: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)) or np.any(values <= 0):
        raise NonPositiveVarianceError(f"{what} must be finite and positive")
    return np.maximum(values, VARIANCE_FLOOR)


@dataclass(frozen=True, slots=True, eq=False)
class EstimatorState:
    mean: ImageGrid
    variance_mode: VarianceMode
    diag_variance: ImageGrid | None = None
    cov_factor: DenseMatrix | None = None

    def __post_init__(self):
        require_even(self.mean.shape, "estimated mean")
        if self.variance_mode is VarianceMode.diagonal:
            if self.diag_variance is None or self.cov_factor is not None:
                raise DimensionError("A diagonal estimator carries diag_variance and no cov_factor")
            require_same_shape(self.mean, self.diag_variance)
            clamped = _checked_variance(self.diag_variance.data, "Estimated variances")
            object.__setattr__(self, "diag_variance", ImageGrid(clamped))
        else:
            if self.cov_factor is None or self.diag_variance is not None:
                raise DimensionError("A full-covariance estimator carries cov_factor and no diag_variance")
            dense_cap_check(self.mean.shape)
            size = self.mean.size
            if self.cov_factor.entries.shape != (size, size):
                raise DimensionError(f"Covariance factor must be {size}x{size}, got {self.cov_factor.entries.shape}")
            if np.any(np.triu(self.cov_factor.entries, k=1) != 0):
                raise DimensionError("Covariance factor must be lower triangular")
            if np.any(np.diag(self.cov_factor.entries) < FACTOR_DIAGONAL_FLOOR):
                raise DefinitenessError(f"Covariance factor diagonal must be >= {FACTOR_DIAGONAL_FLOOR}")

    @classmethod
    def diagonal(cls, mean: ImageGrid, diag_variance: ImageGrid) -> "EstimatorState":
        return cls(mean, VarianceMode.diagonal, diag_variance=diag_variance)

    @classmethod
    def full(cls, mean: ImageGrid, cov_factor: DenseMatrix | np.ndarray) -> "EstimatorState":
        if not isinstance(cov_factor, DenseMatrix):
            cov_factor = DenseMatrix(cov_factor)
        return cls(mean, VarianceMode.full, cov_factor=cov_factor)

    def covariance(self) -> np.ndarray:
        """Dense estimated covariance: ``L L^T`` or ``diag(nu)``."""
        if self.cov_factor is not None:
            factor = self.cov_factor.entries
            return factor @ factor.T
        assert self.diag_variance is not None
        return np.diag(self.diag_variance.flat())


@dataclass(frozen=True, slots=True, eq=False)
class NoiseCovEstimate:
    """Diagonal of the estimated observation noise covariance on the LR grid."""

    diag: ImageGrid

    def __post_init__(self):
        values = self.diag.data
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise NonPositiveVarianceError("Noise variances must be finite and non-negative")
        object.__setattr__(self, "diag", ImageGrid(np.maximum(values, VARIANCE_FLOOR)))

    @classmethod
    def zero(cls, height: int, width: int) -> "NoiseCovEstimate":
        return cls(ImageGrid.zeros(height, width))


@dataclass(frozen=True, slots=True, eq=False)
class FullGradient:
    mean: ImageGrid
    factor: DenseMatrix


def _pointwise_nll(residual: np.ndarray, combined: np.ndarray) -> np.ndarray:
    return residual**2 / (2.0 * combined) + 0.5 * np.log(combined)


def _pointwise_variance_grad(residual: np.ndarray, combined: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 / combined - residual**2 / combined**2)


def supervised_nll(u: ImageGrid, mean: ImageGrid, diag_variance: ImageGrid) -> float:
    require_same_shape(u, mean, diag_variance)
    var = _checked_variance(diag_variance.data, "Variances")
    return float(np.sum(_pointwise_nll(u.data - mean.data, var)))


def supervised_nll_grad(u: ImageGrid, mean: ImageGrid, diag_variance: ImageGrid) -> tuple[ImageGrid, ImageGrid]:
    """Gradients of the supervised NLL with respect to the mean and the variances."""
    require_same_shape(u, mean, diag_variance)
    var = _checked_variance(diag_variance.data, "Variances")
    residual = u.data - mean.data
    return ImageGrid(-residual / var), ImageGrid(_pointwise_variance_grad(residual, var))


@dataclass(frozen=True, slots=True, eq=False)
class DiagBatchTerms:
    """Diagonal NLL terms of a batch of flattened HR predictions, one row per sample.

    ``mask`` keeps the pixels that enter each sample's loss: the pixels of its subgrid ``tau`` for the
    self-supervised NLL and every pixel for the supervised one.
    """

    residual: np.ndarray
    combined: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if not self.residual.shape == self.combined.shape == self.mask.shape:
            raise DimensionError(
                f"Residual {self.residual.shape}, variance {self.combined.shape} and mask {self.mask.shape} disagree",
            )
        if np.any(self.combined <= 0):
            raise NonPositiveVarianceError("Combined variance must be positive")

    @property
    def values(self) -> np.ndarray:
        return np.sum(self.mask * _pointwise_nll(self.residual, self.combined), axis=1)

    @property
    def grad_mean(self) -> np.ndarray:
        return -self.mask * self.residual / self.combined

    @property
    def grad_variance(self) -> np.ndarray:
        return self.mask * _pointwise_variance_grad(self.residual, self.combined)


def selfsup_batch_terms(
    targets: np.ndarray,
    means: np.ndarray,
    variance: np.ndarray,
    mask: np.ndarray,
    model: NoiseModel,
) -> DiagBatchTerms:
    """``targets`` holds each sample's noisy LR targets embedded on the HR grid.

    ``R_hat`` is ``g`` at the predicted HR mean, which on subgrid ``tau`` is ``estimate_noise_cov(mean, tau)``.
    """
    noise = model.variance(means)
    return DiagBatchTerms(targets - means, np.broadcast_to(variance, means.shape) + noise, mask)


def supervised_batch_terms(truths: np.ndarray, means: np.ndarray, variance: np.ndarray) -> DiagBatchTerms:
    return DiagBatchTerms(truths - means, np.broadcast_to(variance, means.shape), np.ones_like(means))


def estimate_noise_cov(mean: ImageGrid, tau: SubgridId, model: NoiseModel) -> NoiseCovEstimate:
    require_even(mean.shape, "estimated mean")
    return NoiseCovEstimate(ImageGrid(model.variance(extract_array(mean.data, tau))))


def _diag_terms(
    z: ImageGrid,
    est: EstimatorState,
    tau: SubgridId,
    r_hat: NoiseCovEstimate,
) -> tuple[np.ndarray, np.ndarray]:
    """Residual ``z - A_tau u`` and combined variance ``d = nu[2l + tau] + r``."""
    if est.variance_mode is not VarianceMode.diagonal:
        raise DimensionError("Expected a diagonal estimator")
    assert est.diag_variance is not None
    require_same_shape(z, r_hat.diag)
    if (2 * z.height, 2 * z.width) != est.mean.shape:
        raise DimensionError(f"Target is {z.height}x{z.width}, estimator is {est.mean.height}x{est.mean.width}")
    residual = z.data - extract_array(est.mean.data, tau)
    combined = extract_array(est.diag_variance.data, tau) + r_hat.diag.data
    if np.any(combined <= 0):
        raise NonPositiveVarianceError("Combined variance must be positive")
    return residual, combined


def selfsup_nll_diag(z: ImageGrid, est: EstimatorState, tau: SubgridId, r_hat: NoiseCovEstimate) -> float:
    residual, combined = _diag_terms(z, est, tau, r_hat)
    return float(np.sum(_pointwise_nll(residual, combined)))


def grad_mean_diag(z: ImageGrid, est: EstimatorState, tau: SubgridId, r_hat: NoiseCovEstimate) -> ImageGrid:
    residual, combined = _diag_terms(z, est, tau, r_hat)
    return ImageGrid(embed_array(-residual / combined, tau))


def grad_variance_diag(z: ImageGrid, est: EstimatorState, tau: SubgridId, r_hat: NoiseCovEstimate) -> ImageGrid:
    residual, combined = _diag_terms(z, est, tau, r_hat)
    return ImageGrid(embed_array(_pointwise_variance_grad(residual, combined), tau))


def _full_terms(z: ImageGrid, est: EstimatorState, tau: SubgridId, r_hat: NoiseCovEstimate):
    if est.variance_mode is not VarianceMode.full:
        raise DimensionError("Expected a full-covariance estimator")
    require_same_shape(z, r_hat.diag)
    if (2 * z.height, 2 * z.width) != est.mean.shape:
        raise DimensionError(f"Target is {z.height}x{z.width}, estimator is {est.mean.height}x{est.mean.width}")
    dense_cap_check(est.mean.shape)
    selected = subgrid_indices(est.mean.shape, tau)
    covariance = est.covariance()
    inverse_precision = covariance[np.ix_(selected, selected)] + np.diag(r_hat.diag.flat())
    factor = spd_factorize(inverse_precision)
    residual = (z.data - extract_array(est.mean.data, tau)).reshape(-1)
    return selected, factor, residual


def selfsup_nll_full(z: ImageGrid, est: EstimatorState, tau: SubgridId, r_hat: NoiseCovEstimate) -> float:
    _, factor, residual = _full_terms(z, est, tau, r_hat)
    return float(0.5 * residual @ factor.solve(residual) + 0.5 * factor.logdet)


def _hr_covariance_grad(selected: np.ndarray, factor: SpdFactorization, weighted: np.ndarray, size: int) -> np.ndarray:
    cov_grad = np.zeros((size, size))
    cov_grad[np.ix_(selected, selected)] = 0.5 * (factor.inverse() - np.outer(weighted, weighted))
    return cov_grad


def covariance_grad_full(z: ImageGrid, est: EstimatorState, tau: SubgridId, r_hat: NoiseCovEstimate) -> np.ndarray:
    """``dL/dSigma = 0.5 * A^T (M - M r r^T M) A`` as a dense HR matrix."""
    selected, factor, residual = _full_terms(z, est, tau, r_hat)
    return _hr_covariance_grad(selected, factor, factor.solve(residual), est.mean.size)


def grad_full(z: ImageGrid, est: EstimatorState, tau: SubgridId, r_hat: NoiseCovEstimate) -> FullGradient:
    """Mean gradient and the gradient with respect to the lower-triangular factor ``L`` of ``Sigma = L L^T``."""
    selected, factor, residual = _full_terms(z, est, tau, r_hat)
    assert est.cov_factor is not None
    weighted = factor.solve(residual)
    mean_grad = np.zeros(est.mean.size)
    mean_grad[selected] = -weighted
    cov_grad = _hr_covariance_grad(selected, factor, weighted, est.mean.size)
    factor_grad = np.tril((cov_grad + cov_grad.T) @ est.cov_factor.entries)
    return FullGradient(ImageGrid(mean_grad.reshape(est.mean.shape)), DenseMatrix(factor_grad))
