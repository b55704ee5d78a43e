"""Degradation operators, the affine signal-dependent noise model and the multi-exposure burst simulator."""
import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Extra, root_validator, validator

from ._utils import derive_seed, make_rng, standard_normal
from .exceptions import DimensionError, NonPositiveVarianceError
from .grid import ALL_SUBGRIDS, ImageGrid, SubgridId, read_raster, require_even, write_raster

VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True, slots=True)
class NoiseModel:
    """Affine variance function ``g(s) = a*s + b``."""

    a: float = 0.0
    b: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.b)) or self.a < 0 or self.b < 0:
            raise NonPositiveVarianceError(f"Noise model needs finite a >= 0 and b >= 0, got a={self.a}, b={self.b}")

    @property
    def is_noiseless(self) -> bool:
        return self.a == 0.0 and self.b == 0.0

    def variance(self, signal: np.ndarray) -> np.ndarray:
        return np.maximum(self.a * np.asarray(signal, dtype=np.float64) + self.b, VARIANCE_FLOOR)


@dataclass(frozen=True, slots=True)
class SubsampleOperator:
    """``(A u)_l = u[(2l + offset) mod 2H]``: an integer HR offset followed by x2 decimation.

    ``A_tau`` is the offset ``tau``; a frame translated by an integer HR shift ``s`` is the offset ``-s``.
    Every such operator selects one HR pixel per LR pixel, so its adjoint inserts zeros.
    """

    offset_row: int = 0
    offset_col: int = 0

    @classmethod
    def from_subgrid(cls, tau: SubgridId) -> "SubsampleOperator":
        return cls(tau.tau_row, tau.tau_col)

    @classmethod
    def from_translation(cls, shift: Sequence[float]) -> "SubsampleOperator":
        row, col = shift
        if row != int(row) or col != int(col):
            raise DimensionError(f"Only integer translations are selection maps, got shift ({row}, {col})")
        return cls(-int(row), -int(col))

    def _rows_cols(self, hr_shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        require_even(hr_shape)
        rows = (2 * np.arange(hr_shape[0] // 2) + self.offset_row) % hr_shape[0]
        cols = (2 * np.arange(hr_shape[1] // 2) + self.offset_col) % hr_shape[1]
        return rows, cols

    @property
    def subgrid(self) -> SubgridId:
        return SubgridId(self.offset_row % 2, self.offset_col % 2)

    def hr_indices(self, hr_shape: tuple[int, int]) -> np.ndarray:
        rows, cols = self._rows_cols(hr_shape)
        return (rows[:, None] * hr_shape[1] + cols[None, :]).reshape(-1)

    def apply_array(self, u: np.ndarray) -> np.ndarray:
        rows, cols = self._rows_cols(u.shape[-2:])
        return u[..., rows[:, None], cols[None, :]]

    def adjoint_array(self, w: np.ndarray) -> np.ndarray:
        hr_shape = (2 * w.shape[-2], 2 * w.shape[-1])
        rows, cols = self._rows_cols(hr_shape)
        out = np.zeros((*w.shape[:-2], *hr_shape))
        out[..., rows[:, None], cols[None, :]] = w
        return out

    def apply(self, u: ImageGrid) -> ImageGrid:
        return ImageGrid(self.apply_array(u.data))

    def adjoint(self, w: ImageGrid) -> ImageGrid:
        return ImageGrid(self.adjoint_array(w.data))


def apply_shift_subsample(u: ImageGrid, tau: SubgridId) -> ImageGrid:
    return SubsampleOperator.from_subgrid(tau).apply(u)


def apply_shift_subsample_adjoint(w: ImageGrid, tau: SubgridId) -> ImageGrid:
    return SubsampleOperator.from_subgrid(tau).adjoint(w)


def decimate(u: ImageGrid) -> ImageGrid:
    return apply_shift_subsample(u, ALL_SUBGRIDS[0])


def _translate_axis(data: np.ndarray, shift: float, axis: int) -> np.ndarray:
    if shift == 0:
        return data
    whole = math.floor(shift)
    frac = shift - whole
    # out[x] = data[x - shift], linear between the two neighbouring samples
    out = np.roll(data, whole, axis=axis)
    if frac == 0:
        return out
    return (1.0 - frac) * out + frac * np.roll(data, whole + 1, axis=axis)


def warp_translate(img: ImageGrid, shift: Sequence[float]) -> ImageGrid:
    """Periodic bilinear translation; integer shifts are exact circular shifts."""
    row, col = (float(s) for s in shift)
    data = _translate_axis(img.data, row, axis=0)
    return ImageGrid(_translate_axis(data, col, axis=1))


def noise_variance(clean: ImageGrid, model: NoiseModel) -> ImageGrid:
    return ImageGrid(model.variance(clean.data))


def sample_noise(clean: ImageGrid, model: NoiseModel, rng_seed: int) -> ImageGrid:
    if model.is_noiseless:
        return clean
    rng = make_rng(rng_seed)
    std = np.sqrt(model.variance(clean.data))
    return ImageGrid(clean.data + std * standard_normal(rng, clean.shape))


class BurstConfig(BaseModel):
    n_frames: int = 8
    hr_height: int
    hr_width: int
    gamma: float = 1.3
    gamma_range: tuple[float, float] | None = None
    exposure_exponent_range: tuple[int, int] = (-5, 5)
    awgn_sigma_range: tuple[float, float] = (5.0, 18.0)
    intensity_scale: float = 255.0
    noise_gain: float = 0.0
    max_shift: float = 1.0
    seed: int = 0

    class Config:
        extra = Extra.forbid
        allow_mutation = False

    @validator("n_frames")
    def _at_least_two_frames(cls, value: int) -> int:
        if value < 2:
            raise ValueError("a burst needs a reference frame and at least one input frame")
        return value

    @validator("hr_height", "hr_width")
    def _positive_even(cls, value: int) -> int:
        if value <= 0 or value % 2:
            raise ValueError(f"must be a positive even integer, got {value}")
        return value

    @validator("gamma")
    def _gamma_above_one(cls, value: float) -> float:
        if value <= 1:
            raise ValueError(f"must be > 1, got {value}")
        return value

    @validator("gamma_range", "exposure_exponent_range", "awgn_sigma_range")
    def _ordered(cls, value: tuple[float, float] | None) -> tuple[float, float] | None:
        if value is not None and value[0] > value[1]:
            raise ValueError(f"range must be ordered, got {value}")
        return value

    @validator("gamma_range")
    def _gamma_range_above_one(cls, value: tuple[float, float] | None) -> tuple[float, float] | None:
        if value is not None and value[0] <= 1:
            raise ValueError(f"gamma must be > 1, got range {value}")
        return value

    @validator("awgn_sigma_range")
    def _non_negative_sigma(cls, value: tuple[float, float]) -> tuple[float, float]:
        if value[0] < 0:
            raise ValueError(f"noise standard deviations must be >= 0, got {value}")
        return value

    @validator("max_shift", "noise_gain")
    def _non_negative(cls, value: float) -> float:
        if value < 0:
            raise ValueError(f"must be >= 0, got {value}")
        return value

    @validator("intensity_scale")
    def _positive_scale(cls, value: float) -> float:
        if value <= 0:
            raise ValueError(f"must be > 0, got {value}")
        return value

    @root_validator(skip_on_failure=True)
    def _seed_is_u64(cls, values: dict) -> dict:
        if not 0 <= values["seed"] < 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {values['seed']}")
        return values


@dataclass(frozen=True, slots=True, eq=False)
class Burst:
    frames: tuple[ImageGrid, ...]
    exposures: tuple[float, ...]
    shifts: tuple[tuple[float, float], ...]
    noise_model: NoiseModel
    seed: int = 0
    gamma: float = 1.0
    reference_index: int = 0

    def __post_init__(self):
        if not len(self.frames) == len(self.exposures) == len(self.shifts):
            raise DimensionError(
                f"Burst has {len(self.frames)} frames, {len(self.exposures)} exposures and {len(self.shifts)} shifts",
            )
        if len(self.frames) < 2:
            raise DimensionError("A burst needs a reference frame and at least one input frame")
        if {f.shape for f in self.frames} != {self.frames[0].shape}:
            raise DimensionError("All frames of a burst must share one shape")
        if tuple(self.shifts[self.reference_index]) != (0.0, 0.0):
            raise DimensionError(f"The reference frame must be aligned, got shift {self.shifts[self.reference_index]}")
        if any(e <= 0 for e in self.exposures):
            raise DimensionError("Exposure times must be positive")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def lr_shape(self) -> tuple[int, int]:
        return self.frames[0].shape

    @property
    def reference(self) -> ImageGrid:
        return self.frames[self.reference_index]

    def normalized_frames(self) -> tuple[ImageGrid, ...]:
        return tuple(ImageGrid(f.data / e) for f, e in zip(self.frames, self.exposures, strict=True))

    def input_indices(self, *, include_reference: bool) -> list[int]:
        return [t for t in range(self.n_frames) if include_reference or t != self.reference_index]

    def operators(self) -> list[SubsampleOperator]:
        return [SubsampleOperator.from_translation(s) for s in self.shifts]


def simulate_burst(u: ImageGrid, cfg: BurstConfig) -> Burst:
    """Random sub-pixel translations, x2 decimation without blur, exposure scaling and noise.

    Draw order from the Philox stream seeded with ``cfg.seed``: gamma (only with ``gamma_range``),
    noise sigma, then per frame the two shift components, the exposure exponent and the frame's noise seed.
    """
    if u.shape != (cfg.hr_height, cfg.hr_width):
        raise DimensionError(f"HR image is {u.height}x{u.width}, config expects {cfg.hr_height}x{cfg.hr_width}")
    rng = make_rng(cfg.seed)
    gamma = cfg.gamma if cfg.gamma_range is None else float(rng.uniform(*cfg.gamma_range))
    sigma = float(rng.uniform(*cfg.awgn_sigma_range)) / cfg.intensity_scale
    model = NoiseModel(a=cfg.noise_gain, b=sigma**2)
    low, high = cfg.exposure_exponent_range

    frames, exposures, shifts = [], [], []
    for t in range(cfg.n_frames):
        drawn = rng.uniform(-cfg.max_shift, cfg.max_shift, size=2)
        shift = (0.0, 0.0) if t == 0 else (float(drawn[0]), float(drawn[1]))
        exposure = gamma ** int(rng.integers(low, high + 1))
        clean = decimate(warp_translate(u, shift))
        frames.append(sample_noise(ImageGrid(exposure * clean.data), model, derive_seed(rng)))
        exposures.append(exposure)
        shifts.append(shift)
    return Burst(tuple(frames), tuple(exposures), tuple(shifts), model, seed=cfg.seed, gamma=gamma)


def observe_integer_burst(
    u: ImageGrid,
    shifts: Sequence[tuple[int, int]],
    model: NoiseModel,
    seed: int,
    exposures: Sequence[float] | None = None,
) -> Burst:
    """Burst with integer HR translations; every frame is an exact selection of ``u`` plus noise."""
    require_even(u.shape)
    if exposures is None:
        exposures = [1.0] * len(shifts)
    rng = make_rng(seed)
    frames = []
    for shift, exposure in zip(shifts, exposures, strict=True):
        clean = SubsampleOperator.from_translation(shift).apply_array(u.data)
        frames.append(sample_noise(ImageGrid(exposure * clean), model, derive_seed(rng)))
    return Burst(
        tuple(frames),
        tuple(float(e) for e in exposures),
        tuple((float(r), float(c)) for r, c in shifts),
        model,
        seed=seed,
    )


_MANIFEST = "manifest.txt"


def save_burst(burst: Burst, directory: Path | str) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [
        f"n_frames = {burst.n_frames}",
        f"reference_index = {burst.reference_index}",
        f"seed = {burst.seed}",
        f"gamma = {burst.gamma!r}",
        f"noise_a = {burst.noise_model.a!r}",
        f"noise_b = {burst.noise_model.b!r}",
    ]
    for t, (frame, exposure, shift) in enumerate(zip(burst.frames, burst.exposures, burst.shifts, strict=True)):
        name = f"frame_{t:03d}.raw"
        write_raster(directory / name, frame)
        lines.append(f"frame = {name} {exposure!r} {shift[0]!r} {shift[1]!r}")
    (directory / _MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_burst(directory: Path | str) -> Burst:
    directory = Path(directory)
    header: dict[str, str] = {}
    frames, exposures, shifts = [], [], []
    for raw_line in (directory / _MANIFEST).read_text(encoding="utf-8").splitlines():
        key, _, value = (part.strip() for part in raw_line.partition("="))
        if key == "frame":
            name, exposure, shift_row, shift_col = value.split()
            frames.append(read_raster(directory / name))
            exposures.append(float(exposure))
            shifts.append((float(shift_row), float(shift_col)))
        elif key:
            header[key] = value
    return Burst(
        tuple(frames),
        tuple(exposures),
        tuple(shifts),
        NoiseModel(float(header["noise_a"]), float(header["noise_b"])),
        seed=int(header["seed"]),
        gamma=float(header["gamma"]),
        reference_index=int(header["reference_index"]),
    )
