"""Exact posterior moments for linear-Gaussian and Gaussian-mixture priors, plus a Monte-Carlo fallback.

All observation operators are integer selections (``SubsampleOperator``), so conditioning is exact and does not
depend on an interpolation kernel.
"""
import logging
import math
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
from scipy.special import logsumexp

from ._utils import open_uniform, standard_normal, substreams
from .degrade import Burst, SubsampleOperator
from .exceptions import (
    DefinitenessError,
    DegenerateLikelihoodError,
    DimensionError,
    EvidenceUnderflowError,
    NonPositiveVarianceError,
    SampleSizeError,
)
from .grid import LOG_TWO_PI, DenseMatrix, ImageGrid, dense_cap_check, require_even, spd_factorize

logger = logging.getLogger(__name__)

MIN_RELIABLE_ESS = 50.0
_MC_CHUNK = 1 << 15

USampler = Callable[[np.random.Generator, int], np.ndarray]


def _periodic_distance(length: int) -> np.ndarray:
    positions = np.arange(length)
    diff = np.abs(positions[:, None] - positions[None, :])
    return np.minimum(diff, length - diff)


def psd_sqrt(cov: np.ndarray) -> np.ndarray:
    """Lower factor ``L`` with ``L L^T ~= cov``, adding diagonal jitter when ``cov`` is only semi-definite."""
    try:
        return la.cholesky(cov, lower=True)
    except la.LinAlgError:
        pass
    scale = max(float(np.mean(np.diag(cov))), 1e-300)
    jitter = 1e-14
    while jitter < 1e-6:
        try:
            return la.cholesky(cov + scale * jitter * np.eye(cov.shape[0]), lower=True)
        except la.LinAlgError:
            jitter *= 10
    raise DefinitenessError("Added maximum jitter and the covariance is still not positive semi-definite")


def _sample_mixture(
    weights: np.ndarray,
    components: Sequence["GaussianPrior | PosteriorSummary"],
    shape: tuple[int, int],
    rng: np.random.Generator,
    n: int,
) -> np.ndarray:
    """Draw component labels by inverse CDF, then sample every component for its labelled rows."""
    labels = np.searchsorted(np.cumsum(weights), open_uniform(rng, n))
    labels = np.minimum(labels, len(components) - 1)
    out = np.empty((n, *shape))
    for k, component in enumerate(components):
        chosen = np.flatnonzero(labels == k)
        if chosen.size:
            out[chosen] = component.sample(rng, chosen.size)
    return out


@dataclass(frozen=True, slots=True, eq=False)
class GaussianPrior:
    mean: ImageGrid
    cov: DenseMatrix

    def __post_init__(self):
        require_even(self.mean.shape, "prior mean")
        dense_cap_check(self.mean.shape)
        if self.cov.entries.shape != (self.mean.size, self.mean.size):
            raise DimensionError(f"Prior covariance must be {self.mean.size}x{self.mean.size}")
        if not self.cov.spd:
            object.__setattr__(self, "cov", DenseMatrix(self.cov.entries, spd=True))

    @classmethod
    def isotropic(cls, hr_shape: tuple[int, int], mean: float, variance: float) -> "GaussianPrior":
        size = hr_shape[0] * hr_shape[1]
        return cls(ImageGrid.full(*hr_shape, mean), DenseMatrix(variance * np.eye(size), spd=True))

    @classmethod
    def stationary(
        cls,
        hr_shape: tuple[int, int],
        mean: float,
        variance: float,
        length_scale: float,
        nugget: float = 1e-4,
    ) -> "GaussianPrior":
        """Periodic stationary covariance close to a squared exponential; ``nugget`` is relative to ``variance``.

        The squared exponential of the wrapped distance is not positive semi-definite on a torus, so the covariance
        is the block-circulant matrix of its spectrum with negative eigenvalues clipped to zero, rescaled to keep the
        marginal variance at ``variance``.
        """
        height, width = hr_shape
        squared = _periodic_distance(height)[0][:, None] ** 2 + _periodic_distance(width)[0][None, :] ** 2
        spectrum = np.maximum(np.fft.fft2(np.exp(-squared / (2.0 * length_scale**2))).real, 0.0)
        spectrum *= variance * spectrum.size / np.sum(spectrum)
        kernel = np.fft.ifft2(spectrum).real
        rows, cols = np.divmod(np.arange(height * width), width)
        cov = kernel[(rows[:, None] - rows[None, :]) % height, (cols[:, None] - cols[None, :]) % width]
        cov = 0.5 * (cov + cov.T) + nugget * variance * np.eye(height * width)
        return cls(ImageGrid.full(*hr_shape, mean), DenseMatrix(cov, spd=True))

    @property
    def shape(self) -> tuple[int, int]:
        return self.mean.shape

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        lower = self.cov.factor().lower
        xi = standard_normal(rng, (n, self.mean.size))
        return (self.mean.flat() + xi @ lower.T).reshape(n, *self.shape)


@dataclass(frozen=True, slots=True, eq=False)
class GmmPrior:
    weights: np.ndarray
    components: tuple[GaussianPrior, ...]

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.components) < 2:
            raise DimensionError("A mixture prior needs at least two components")
        if weights.shape != (len(self.components),):
            raise DimensionError(f"Got {weights.size} weights for {len(self.components)} components")
        if np.any(weights < 0) or abs(float(np.sum(weights)) - 1.0) > 1e-12:
            raise DimensionError(f"Mixture weights must be non-negative and sum to 1, got {weights.tolist()}")
        if len({c.shape for c in self.components}) != 1:
            raise DimensionError("All mixture components must share one HR shape")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "components", tuple(self.components))

    @property
    def shape(self) -> tuple[int, int]:
        return self.components[0].shape

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return _sample_mixture(self.weights, self.components, self.shape, rng, n)


@dataclass(frozen=True, slots=True, eq=False)
class Observation:
    operator: SubsampleOperator
    values: ImageGrid
    noise_diag: ImageGrid

    def __post_init__(self):
        if self.values.shape != self.noise_diag.shape:
            raise DimensionError("Observation values and noise variances must share one shape")
        if np.any(self.noise_diag.data < 0):
            raise NonPositiveVarianceError("Observation noise variances must be non-negative")

    @property
    def hr_shape(self) -> tuple[int, int]:
        return 2 * self.values.height, 2 * self.values.width


def observations_from_burst(burst: Burst, *, include_reference: bool = True) -> list[Observation]:
    """Exposure-normalized frames as observations; the noise variance of ``v/e`` is ``g(v)/e^2``.

    With a signal-dependent gain the variance is the plug-in ``g`` at the observed values.
    """
    observations = []
    for t in burst.input_indices(include_reference=include_reference):
        frame, exposure = burst.frames[t], burst.exposures[t]
        noise = burst.noise_model.variance(frame.data) / exposure**2
        observations.append(
            Observation(
                SubsampleOperator.from_translation(burst.shifts[t]),
                ImageGrid(frame.data / exposure),
                ImageGrid(noise),
            ),
        )
    return observations


@dataclass(frozen=True, slots=True, eq=False)
class PosteriorSummary:
    mean: ImageGrid
    cov: DenseMatrix
    diag: ImageGrid = field(init=False)

    def __post_init__(self):
        if self.cov.entries.shape != (self.mean.size, self.mean.size):
            raise DimensionError(f"Posterior covariance must be {self.mean.size}x{self.mean.size}")
        symmetric = 0.5 * (self.cov.entries + self.cov.entries.T)
        object.__setattr__(self, "cov", DenseMatrix(symmetric))
        diag = np.maximum(np.diag(symmetric), 0.0).reshape(self.mean.shape)
        object.__setattr__(self, "diag", ImageGrid(diag))

    @property
    def shape(self) -> tuple[int, int]:
        return self.mean.shape

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if not np.any(self.cov.entries):
            return np.broadcast_to(self.mean.data, (n, *self.shape)).copy()
        lower = psd_sqrt(self.cov.entries)
        xi = standard_normal(rng, (n, self.mean.size))
        return (self.mean.flat() + xi @ lower.T).reshape(n, *self.shape)


def _stack(observations: Sequence[Observation], hr_shape: tuple[int, int]):
    for obs in observations:
        if obs.hr_shape != hr_shape:
            raise DimensionError(f"Observation of HR size {obs.hr_shape} does not match prior size {hr_shape}")
    indices = np.concatenate([obs.operator.hr_indices(hr_shape) for obs in observations])
    values = np.concatenate([obs.values.flat() for obs in observations])
    noise = np.concatenate([obs.noise_diag.flat() for obs in observations])
    return indices, values, noise


def condition_gaussian(
    prior: GaussianPrior,
    observations: Sequence[Observation],
) -> tuple[PosteriorSummary, float]:
    """Posterior moments and the log marginal likelihood of the stacked observations.

    Uses the gain form ``Sigma0 - Sigma0 H^T S^-1 H Sigma0`` with ``S = H Sigma0 H^T + R`` so noiseless
    observations of distinct pixels stay well posed.
    """
    if not observations:
        return PosteriorSummary(prior.mean, prior.cov), 0.0
    indices, values, noise = _stack(observations, prior.shape)
    mu0 = prior.mean.flat()
    sigma0 = prior.cov.entries
    cross = sigma0[:, indices]
    innovation_cov = cross[indices, :] + np.diag(noise)
    factor = spd_factorize(innovation_cov)
    innovation = values - mu0[indices]
    weighted = factor.solve(innovation)
    mean = mu0 + cross @ weighted
    cov = sigma0 - cross @ factor.solve(cross.T)
    log_evidence = -0.5 * (innovation @ weighted + factor.logdet + indices.size * LOG_TWO_PI)
    return PosteriorSummary(ImageGrid(mean.reshape(prior.shape)), DenseMatrix(cov)), float(log_evidence)


def gaussian_posterior(prior: GaussianPrior, observations: Sequence[Observation]) -> PosteriorSummary:
    summary, _ = condition_gaussian(prior, observations)
    return summary


@dataclass(frozen=True, slots=True, eq=False)
class MixturePosterior:
    weights: np.ndarray
    components: tuple[PosteriorSummary, ...]

    @property
    def shape(self) -> tuple[int, int]:
        return self.components[0].shape

    def summary(self) -> PosteriorSummary:
        if len(self.components) == 1:
            return self.components[0]
        means = np.stack([c.mean.flat() for c in self.components])
        mean = self.weights @ means
        second = sum(
            w * (c.cov.entries + np.outer(m, m)) for w, c, m in zip(self.weights, self.components, means, strict=True)
        )
        # law of total variance
        cov = second - np.outer(mean, mean)
        return PosteriorSummary(ImageGrid(mean.reshape(self.shape)), DenseMatrix(cov))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return _sample_mixture(self.weights, self.components, self.shape, rng, n)


def gmm_posterior_mixture(prior: GmmPrior, observations: Sequence[Observation]) -> MixturePosterior:
    """Component posteriors re-weighted by prior weight times marginal evidence, in the log domain."""
    kept = [(w, c) for w, c in zip(prior.weights, prior.components, strict=True) if w > 0]
    conditioned = [condition_gaussian(component, observations) for _, component in kept]
    log_weights = np.array([math.log(w) + evidence for (w, _), (_, evidence) in zip(kept, conditioned, strict=True)])
    if not np.any(np.isfinite(log_weights)):
        raise EvidenceUnderflowError("Every mixture component has zero evidence for the observations")
    weights = np.exp(log_weights - logsumexp(log_weights))
    return MixturePosterior(weights, tuple(summary for summary, _ in conditioned))


def gmm_posterior(prior: GmmPrior, observations: Sequence[Observation]) -> PosteriorSummary:
    return gmm_posterior_mixture(prior, observations).summary()


@dataclass(frozen=True, slots=True, eq=False)
class MonteCarloPosterior:
    summary: PosteriorSummary
    effective_sample_size: float
    mean_std_error: ImageGrid
    n_samples: int

    @property
    def reliable(self) -> bool:
        return self.effective_sample_size >= MIN_RELIABLE_ESS


@dataclass(slots=True)
class _ChunkStats:
    peak: float
    s0: float
    s1: np.ndarray
    s2: np.ndarray
    q0: float
    q1: np.ndarray
    q2: np.ndarray


def _log_likelihood(samples: np.ndarray, observations: Sequence[Observation]) -> np.ndarray:
    total = np.zeros(samples.shape[0])
    for obs in observations:
        residual = obs.values.data - obs.operator.apply_array(samples)
        total -= 0.5 * np.sum(residual**2 / obs.noise_diag.data, axis=(-2, -1))
    return total


def _chunk_stats(
    sampler: USampler,
    observations: Sequence[Observation],
    rng: np.random.Generator,
    n: int,
) -> _ChunkStats:
    samples = sampler(rng, n).reshape(n, -1)
    log_lik = _log_likelihood(samples.reshape(n, *observations[0].hr_shape), observations)
    peak = float(np.max(log_lik))
    w = np.exp(log_lik - peak)
    w2 = w**2
    return _ChunkStats(
        peak=peak,
        s0=float(np.sum(w)),
        s1=w @ samples,
        s2=(samples * w[:, None]).T @ samples,
        q0=float(np.sum(w2)),
        q1=w2 @ samples,
        q2=w2 @ samples**2,
    )


def mc_posterior(
    sampler: USampler,
    observations: Sequence[Observation],
    n_samples: int,
    seed: int,
    *,
    jobs: int = 1,
) -> MonteCarloPosterior:
    """Self-normalized importance estimate of the posterior moments with the prior as proposal.

    Samples are drawn in fixed-size chunks, each from its own seed sub-stream, and reduced in chunk order, so the
    result does not depend on ``jobs``.
    """
    if n_samples < 1000:
        raise SampleSizeError(f"Monte-Carlo posterior needs at least 1000 samples, got {n_samples}")
    if not observations:
        raise DimensionError("Monte-Carlo posterior needs at least one observation")
    if any(np.any(obs.noise_diag.data <= 0) for obs in observations):
        raise DegenerateLikelihoodError("Zero-noise observations make the likelihood degenerate")
    hr_shape = observations[0].hr_shape
    sizes = [_MC_CHUNK] * (n_samples // _MC_CHUNK)
    if n_samples % _MC_CHUNK:
        sizes.append(n_samples % _MC_CHUNK)
    streams = substreams(seed, len(sizes))

    def run(k: int) -> _ChunkStats:
        return _chunk_stats(sampler, observations, streams[k], sizes[k])

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(run, range(len(sizes))))
    else:
        chunks = [run(k) for k in range(len(sizes))]

    peak = max(c.peak for c in chunks)
    scales = [math.exp(c.peak - peak) for c in chunks]
    s0 = sum(s * c.s0 for s, c in zip(scales, chunks, strict=True))
    s1 = sum(s * c.s1 for s, c in zip(scales, chunks, strict=True))
    s2 = sum(s * c.s2 for s, c in zip(scales, chunks, strict=True))
    q0 = sum(s**2 * c.q0 for s, c in zip(scales, chunks, strict=True))
    q1 = sum(s**2 * c.q1 for s, c in zip(scales, chunks, strict=True))
    q2 = sum(s**2 * c.q2 for s, c in zip(scales, chunks, strict=True))

    mean = s1 / s0
    cov = s2 / s0 - np.outer(mean, mean)
    # delta-method variance of a self-normalized estimate: sum_i w_i^2 (u_i - mean)^2
    mean_var = (q2 - 2.0 * mean * q1 + mean**2 * q0) / s0**2
    ess = s0**2 / q0
    result = MonteCarloPosterior(
        summary=PosteriorSummary(ImageGrid(mean.reshape(hr_shape)), DenseMatrix(cov)),
        effective_sample_size=float(ess),
        mean_std_error=ImageGrid(np.sqrt(np.maximum(mean_var, 0.0)).reshape(hr_shape)),
        n_samples=n_samples,
    )
    if not result.reliable:
        logger.warning("Monte-Carlo posterior is unreliable: effective sample size %.1f < %s", ess, MIN_RELIABLE_ESS)
    return result

