"""Reconstruction and uncertainty-calibration metrics: PSNR, V-RMSE, coverage, calibration error and sharpness."""
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .exceptions import DimensionError, NonPositiveVarianceError
from .grid import ALL_SUBGRIDS, ImageGrid, SubgridId, require_same_shape, subgrid_extract, subgrid_of_pixels

PSNR_IDENTICAL = math.inf

Metric = Callable[..., float]


def default_levels() -> tuple[float, ...]:
    """The 19 nominal levels 0.05, 0.10, ..., 0.95."""
    return tuple(round(0.05 * j, 10) for j in range(1, 20))


def two_sided_quantile(alpha: float | np.ndarray) -> float | np.ndarray:
    """``q`` with ``P(|N(0,1)| <= q) = alpha``."""
    return ndtri((1.0 + np.asarray(alpha, dtype=np.float64)) / 2.0)


@dataclass(frozen=True, slots=True)
class CoverageCurve:
    nominal_levels: tuple[float, ...]
    empirical_levels: tuple[float, ...]

    def __post_init__(self):
        nominal = tuple(float(p) for p in self.nominal_levels)
        empirical = tuple(float(p) for p in self.empirical_levels)
        if len(nominal) != len(empirical):
            raise DimensionError(f"Coverage curve has {len(nominal)} nominal and {len(empirical)} empirical levels")
        if any(not 0 < p < 1 for p in nominal) or any(b <= a for a, b in zip(nominal, nominal[1:], strict=False)):
            raise DimensionError("Nominal levels must be strictly increasing inside (0, 1)")
        if any(not 0 <= p <= 1 for p in empirical):
            raise DimensionError("Empirical levels must lie in [0, 1]")
        object.__setattr__(self, "nominal_levels", nominal)
        object.__setattr__(self, "empirical_levels", empirical)

    def __len__(self) -> int:
        return len(self.nominal_levels)

    def deviations(self) -> np.ndarray:
        return np.abs(np.array(self.nominal_levels) - np.array(self.empirical_levels))


def _positive_variance(nu_hat: ImageGrid) -> np.ndarray:
    if np.any(nu_hat.data <= 0):
        raise NonPositiveVarianceError("Predicted variances must be positive")
    return nu_hat.data


def mse(ref: ImageGrid, test: ImageGrid) -> float:
    require_same_shape(ref, test)
    return float(np.mean((ref.data - test.data) ** 2))


def rmse(ref: ImageGrid, test: ImageGrid) -> float:
    return math.sqrt(mse(ref, test))


def psnr(ref: ImageGrid, test: ImageGrid, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)`` in dB; identical images give ``PSNR_IDENTICAL`` (infinity)."""
    if not peak > 0:
        raise ValueError(f"PSNR peak must be positive, got {peak}")
    error = mse(ref, test)
    if error == 0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(peak**2 / error)


def v_rmse(nu_hat: ImageGrid, mean: ImageGrid, u: ImageGrid) -> float:
    """Root-mean-square gap between predicted variances and realized squared errors."""
    require_same_shape(nu_hat, mean, u)
    squared_error = (mean.data - u.data) ** 2
    return float(np.sqrt(np.mean((nu_hat.data - squared_error) ** 2)))


def coverage(
    u: ImageGrid,
    mean: ImageGrid,
    nu_hat: ImageGrid,
    levels: Sequence[float] | None = None,
) -> CoverageCurve:
    """Fraction of pixels whose truth falls in ``mean +- q(alpha) sqrt(nu_hat)`` for each level ``alpha``."""
    require_same_shape(u, mean, nu_hat)
    levels = tuple(levels) if levels is not None else default_levels()
    # |r| / sigma <= q(alpha)  <=>  2 Phi(|r| / sigma) - 1 <= alpha, so one sort serves every level
    scores = np.sort((np.abs(u.data - mean.data) / np.sqrt(_positive_variance(nu_hat))).reshape(-1))
    thresholds = two_sided_quantile(np.array(levels))
    inside = np.searchsorted(scores, thresholds, side="right") / scores.size
    return CoverageCurve(levels, tuple(float(p) for p in inside))


def calibration_error(curve: CoverageCurve) -> float:
    """Mean absolute gap between nominal and empirical coverage."""
    if len(curve) == 0:
        raise DimensionError("Calibration error needs a non-empty coverage curve")
    return float(np.mean(curve.deviations()))


def coverage_calibration_error(
    u: ImageGrid,
    mean: ImageGrid,
    nu_hat: ImageGrid,
    levels: Sequence[float] | None = None,
) -> float:
    return calibration_error(coverage(u, mean, nu_hat, levels))


def sharpness(nu_hat: ImageGrid, alpha: float = 0.9) -> float:
    """Mean length ``2 q(alpha) sqrt(nu_hat)`` of the predicted intervals."""
    return float(np.mean(2.0 * two_sided_quantile(alpha) * np.sqrt(_positive_variance(nu_hat))))


def per_subgrid(metric: Metric, *grids: ImageGrid, **kwargs: object) -> dict[SubgridId, float]:
    """``metric`` evaluated on each subgrid's pixels of every HR input."""
    if not grids:
        raise DimensionError("per_subgrid needs at least one HR image")
    require_same_shape(*grids)
    return {tau: metric(*(subgrid_extract(g, tau) for g in grids), **kwargs) for tau in ALL_SUBGRIDS}


def subgrid_pixel_counts(hr_shape: tuple[int, int]) -> dict[SubgridId, int]:
    labels = subgrid_of_pixels(hr_shape)
    return {tau: int(np.count_nonzero(labels == tau.index)) for tau in ALL_SUBGRIDS}


def mean_value(grid: ImageGrid) -> float:
    return float(np.mean(grid.data))
