"""Rasters, subgrid indexing and small dense SPD algebra shared by every other module.

HR images are ``2H x 2W``. A subgrid ``tau`` selects the HR pixels at ``2l + tau``; the four subgrids
partition the HR index set. Flat indices are always row-major.
"""
import math
from collections.abc import Iterator
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as la

from .exceptions import DefinitenessError, DimensionError, ProblemTooLargeError

RASTER_DTYPE = np.dtype("<f8")
DENSE_CAP = 4096


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, slots=True, eq=False)
class ImageGrid:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise DimensionError(f"ImageGrid needs a non-empty 2-D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DimensionError("ImageGrid values must be finite")
        object.__setattr__(self, "data", _frozen(data))

    @classmethod
    def zeros(cls, height: int, width: int) -> "ImageGrid":
        return cls(np.zeros((height, width)))

    @classmethod
    def full(cls, height: int, width: int, value: float) -> "ImageGrid":
        return cls(np.full((height, width), float(value)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def size(self) -> int:
        return self.height * self.width

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def __repr__(self) -> str:
        return f"ImageGrid({self.height}x{self.width})"


@dataclass(frozen=True, slots=True, order=True)
class SubgridId:
    tau_row: int
    tau_col: int

    def __post_init__(self):
        if self.tau_row not in (0, 1) or self.tau_col not in (0, 1):
            raise DimensionError(f"Subgrid offsets must be 0 or 1, got ({self.tau_row}, {self.tau_col})")

    @classmethod
    def all(cls) -> tuple["SubgridId", ...]:
        return ALL_SUBGRIDS

    @property
    def index(self) -> int:
        return 2 * self.tau_row + self.tau_col

    def __iter__(self) -> Iterator[int]:
        yield self.tau_row
        yield self.tau_col

    def __str__(self) -> str:
        return f"({self.tau_row},{self.tau_col})"


ALL_SUBGRIDS = (SubgridId(0, 0), SubgridId(0, 1), SubgridId(1, 0), SubgridId(1, 1))


@dataclass(frozen=True, slots=True, eq=False)
class DenseMatrix:
    entries: np.ndarray
    spd: bool = False
    _factor: "SpdFactorization | None" = field(default=None, init=False, repr=False)

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.float64)
        if entries.ndim != 2 or entries.shape[0] < 1 or entries.shape[1] < 1:
            raise DimensionError(f"DenseMatrix needs a non-empty 2-D array, got shape {entries.shape}")
        object.__setattr__(self, "entries", _frozen(entries))
        if self.spd:
            object.__setattr__(self, "_factor", spd_factorize(self.entries))

    @property
    def rows(self) -> int:
        return self.entries.shape[0]

    @property
    def cols(self) -> int:
        return self.entries.shape[1]

    def factor(self) -> "SpdFactorization":
        if self._factor is not None:
            return self._factor
        return spd_factorize(self.entries)

    def diagonal(self) -> np.ndarray:
        return np.diag(self.entries).copy()


@dataclass(frozen=True, slots=True, eq=False)
class SpdFactorization:
    """Lower Cholesky factor of an SPD matrix; solves and log-determinants share it."""

    lower: np.ndarray

    @property
    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return la.cho_solve((self.lower, True), rhs, check_finite=False)

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.lower.shape[0]))


@dataclass(frozen=True, slots=True, eq=False)
class SpdSolution:
    x: np.ndarray
    logdet: float


def spd_factorize(m: np.ndarray | DenseMatrix) -> SpdFactorization:
    entries = m.entries if isinstance(m, DenseMatrix) else np.asarray(m, dtype=np.float64)
    if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
        raise DimensionError(f"Expected a square matrix, got shape {entries.shape}")
    try:
        lower = la.cholesky(entries, lower=True, check_finite=True)
    except (la.LinAlgError, ValueError) as e:
        raise DefinitenessError(f"Matrix of size {entries.shape[0]} is not symmetric positive definite") from e
    return SpdFactorization(lower)


def spd_solve(m: np.ndarray | DenseMatrix, rhs: np.ndarray) -> SpdSolution:
    factor = m.factor() if isinstance(m, DenseMatrix) else spd_factorize(m)
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape[0] != factor.lower.shape[0]:
        raise DimensionError(f"Right-hand side has {rhs.shape[0]} rows, matrix has {factor.lower.shape[0]}")
    return SpdSolution(x=factor.solve(rhs), logdet=factor.logdet)


def require_even(shape: tuple[int, int], what: str = "image") -> None:
    if shape[0] % 2 or shape[1] % 2:
        raise DimensionError(f"The {what} must have even height and width, got {shape[0]}x{shape[1]}")


def require_same_shape(*grids: ImageGrid) -> None:
    shapes = {g.shape for g in grids}
    if len(shapes) != 1:
        raise DimensionError(f"Shape mismatch: {sorted(shapes)}")


def extract_array(array: np.ndarray, tau: SubgridId) -> np.ndarray:
    return array[..., tau.tau_row :: 2, tau.tau_col :: 2]


def embed_array(array: np.ndarray, tau: SubgridId) -> np.ndarray:
    out = np.zeros((*array.shape[:-2], 2 * array.shape[-2], 2 * array.shape[-1]))
    out[..., tau.tau_row :: 2, tau.tau_col :: 2] = array
    return out


def subgrid_extract(img: ImageGrid, tau: SubgridId) -> ImageGrid:
    require_even(img.shape)
    return ImageGrid(extract_array(img.data, tau))


def subgrid_embed(img: ImageGrid, tau: SubgridId) -> ImageGrid:
    return ImageGrid(embed_array(img.data, tau))


def subgrid_indices(hr_shape: tuple[int, int], tau: SubgridId) -> np.ndarray:
    """Flat HR indices sampled by ``tau``, in LR row-major order."""
    require_even(hr_shape)
    rows = np.arange(tau.tau_row, hr_shape[0], 2)
    cols = np.arange(tau.tau_col, hr_shape[1], 2)
    return (rows[:, None] * hr_shape[1] + cols[None, :]).reshape(-1)


def subgrid_of_pixels(hr_shape: tuple[int, int]) -> np.ndarray:
    """Per-pixel subgrid index (``SubgridId.index``) of an HR raster."""
    require_even(hr_shape)
    rows = np.arange(hr_shape[0]) % 2
    cols = np.arange(hr_shape[1]) % 2
    return 2 * rows[:, None] + cols[None, :]


def _header_path(path: Path) -> Path:
    return path.with_suffix(".hdr")


def write_raster(path: Path | str, grid: ImageGrid | np.ndarray) -> None:
    path = Path(path)
    data = grid.data if isinstance(grid, ImageGrid) else np.asarray(grid, dtype=np.float64)
    if data.ndim != 2:
        raise DimensionError(f"Only 2-D blocks can be written, got shape {data.shape}")
    path.write_bytes(np.ascontiguousarray(data, dtype=RASTER_DTYPE).tobytes(order="C"))
    _header_path(path).write_text(f"{data.shape[0]} {data.shape[1]}\n", encoding="utf-8")


def read_block(path: Path | str) -> np.ndarray:
    path = Path(path)
    header = _header_path(path).read_text(encoding="utf-8").split()
    if len(header) != 2:
        raise DimensionError(f"Malformed raster header for '{path}': expected 'height width'")
    height, width = int(header[0]), int(header[1])
    data = np.frombuffer(path.read_bytes(), dtype=RASTER_DTYPE)
    if data.size != height * width:
        raise DimensionError(f"Raster '{path}' holds {data.size} values, header says {height}x{width}")
    return data.reshape(height, width).astype(np.float64)


def read_raster(path: Path | str) -> ImageGrid:
    return ImageGrid(read_block(path))


def dense_cap_check(hr_shape: tuple[int, int], cap: int = DENSE_CAP) -> None:
    unknowns = hr_shape[0] * hr_shape[1]
    if unknowns > cap:
        raise ProblemTooLargeError(
            f"Dense covariance path is limited to {cap} HR unknowns, got {unknowns} ({hr_shape[0]}x{hr_shape[1]})",
        )


LOG_TWO_PI = math.log(2.0 * math.pi)
