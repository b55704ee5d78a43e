import logging
import math
import re

import numpy as np
import pytest

from ssnll._utils import make_rng
from ssnll.degrade import NoiseModel, SubsampleOperator, observe_integer_burst
from ssnll.exceptions import DegenerateLikelihoodError, DimensionError, SampleSizeError
from ssnll.grid import DenseMatrix, ImageGrid, SubgridId, subgrid_extract
from ssnll.posterior import (
    GaussianPrior,
    GmmPrior,
    Observation,
    condition_gaussian,
    gaussian_posterior,
    gmm_posterior,
    gmm_posterior_mixture,
    mc_posterior,
    observations_from_burst,
)


def _observe(tau: SubgridId, values: np.ndarray, noise: float) -> Observation:
    values = np.asarray(values, dtype=np.float64)
    return Observation(SubsampleOperator.from_subgrid(tau), ImageGrid(values), ImageGrid(np.full(values.shape, noise)))


def _random_observations(rng: np.random.Generator, count: int = 3, noise: float = 0.05) -> list[Observation]:
    taus = [SubgridId(0, 0), SubgridId(0, 1), SubgridId(1, 1), SubgridId(1, 0)]
    return [_observe(taus[k % 4], rng.normal(0.5, 0.1, size=(2, 2)), noise) for k in range(count)]


def test__gaussian_posterior__single_pixel_observation():
    prior = GaussianPrior.isotropic((2, 2), 0.0, 1.0)
    post = gaussian_posterior(prior, [_observe(SubgridId(0, 0), [[0.8]], 1.0)])
    assert post.mean.data.tolist() == pytest.approx([[0.4, 0.0], [0.0, 0.0]])
    assert post.diag.data.tolist() == pytest.approx([[0.5, 1.0], [1.0, 1.0]])


def test__gaussian_posterior__no_observations_returns_prior():
    prior = GaussianPrior.stationary((4, 4), 0.5, 0.01, 1.5)
    summary, log_evidence = condition_gaussian(prior, [])
    assert summary.mean is prior.mean
    np.testing.assert_array_equal(summary.cov.entries, prior.cov.entries)
    assert log_evidence == 0.0


def test__gaussian_posterior__log_evidence_of_scalar_observation():
    prior = GaussianPrior.isotropic((2, 2), 0.0, 1.0)
    _, log_evidence = condition_gaussian(prior, [_observe(SubgridId(0, 0), [[0.0]], 1.0)])
    assert log_evidence == pytest.approx(-0.5 * np.log(2 * np.pi * 2.0))


def test__gaussian_posterior__never_exceeds_prior_covariance(rng: np.random.Generator):
    prior = GaussianPrior.stationary((4, 4), 0.5, 0.01, 1.5)
    post = gaussian_posterior(prior, _random_observations(rng, count=4))
    assert np.min(np.linalg.eigvalsh(prior.cov.entries - post.cov.entries)) >= -1e-12
    assert np.min(np.linalg.eigvalsh(post.cov.entries)) >= -1e-12


def test__gaussian_posterior__noiseless_observation_pins_pixels():
    prior = GaussianPrior.isotropic((2, 2), 0.0, 1.0)
    post = gaussian_posterior(prior, [_observe(SubgridId(1, 0), [[0.3]], 0.0)])
    assert post.mean.data[1, 0] == pytest.approx(0.3)
    assert post.diag.data[1, 0] == pytest.approx(0.0, abs=1e-15)


def test__gaussian_posterior__observation_size_mismatch__raises():
    prior = GaussianPrior.isotropic((4, 4), 0.0, 1.0)
    with pytest.raises(DimensionError, match=re.escape("does not match prior size (4, 4)")):
        gaussian_posterior(prior, [_observe(SubgridId(0, 0), [[0.3]], 1.0)])


def test__observations_from_burst__reference_frame_sharpens_its_subgrid(rng: np.random.Generator):
    prior = GaussianPrior.isotropic((4, 4), 0.5, 0.01)
    u = ImageGrid(rng.uniform(size=(4, 4)))
    burst = observe_integer_burst(u, [(0, 0), (0, 1)], NoiseModel(0.0, 1e-3), seed=7)
    with_reference = gaussian_posterior(prior, observations_from_burst(burst, include_reference=True))
    without = gaussian_posterior(prior, observations_from_burst(burst, include_reference=False))
    reference_subgrid = SubsampleOperator.from_translation((0, 0)).subgrid
    with_diag = subgrid_extract(with_reference.diag, reference_subgrid).data
    assert np.allclose(subgrid_extract(without.diag, reference_subgrid).data, 0.01, rtol=1e-12)
    assert np.all(with_diag < 0.01)


def test__observations_from_burst__normalizes_exposure():
    u = ImageGrid(np.arange(16.0).reshape(4, 4) / 16)
    burst = observe_integer_burst(u, [(0, 0), (1, 1)], NoiseModel(0.0, 1e-4), seed=3, exposures=[1.0, 2.0])
    observations = observations_from_burst(burst)
    np.testing.assert_allclose(observations[1].values.data, burst.frames[1].data / 2.0)
    assert np.allclose(observations[1].noise_diag.data, 2.5e-5, rtol=1e-12)


def test__gmm_posterior__identical_components_equal_gaussian(rng: np.random.Generator):
    component = GaussianPrior.stationary((4, 4), 0.5, 0.01, 1.5)
    observations = _random_observations(rng)
    mixture = gmm_posterior(GmmPrior(np.array([0.3, 0.7]), (component, component)), observations)
    single = gaussian_posterior(component, observations)
    np.testing.assert_allclose(mixture.mean.data, single.mean.data, rtol=1e-12)
    np.testing.assert_allclose(mixture.cov.entries, single.cov.entries, atol=1e-12)


def test__gmm_posterior__zero_weight_component_is_ignored(rng: np.random.Generator):
    first = GaussianPrior.isotropic((2, 2), 0.3, 0.01)
    second = GaussianPrior.isotropic((2, 2), 0.7, 0.01)
    observations = [_observe(SubgridId(0, 1), [[0.6]], 0.01)]
    mixture = gmm_posterior_mixture(GmmPrior(np.array([1.0, 0.0]), (first, second)), observations)
    assert mixture.weights.tolist() == [1.0]
    single = gaussian_posterior(first, observations)
    np.testing.assert_allclose(mixture.summary().mean.data, single.mean.data)


def test__gmm_posterior__symmetric_components_center_on_zero():
    plus = GaussianPrior.isotropic((2, 2), 1.0, 0.25)
    minus = GaussianPrior.isotropic((2, 2), -1.0, 0.25)
    observations = [_observe(SubgridId(1, 1), [[0.0]], 0.5)]
    mixture = gmm_posterior_mixture(GmmPrior(np.array([0.5, 0.5]), (plus, minus)), observations)
    assert mixture.weights == pytest.approx([0.5, 0.5])
    summary = mixture.summary()
    assert np.allclose(summary.mean.data, 0.0, atol=1e-15)
    # the between-component spread dominates the variance
    assert np.all(summary.diag.data > 0.5)


def test__gmm_posterior__evidence_favours_matching_component():
    low = GaussianPrior.isotropic((2, 2), 0.2, 0.001)
    high = GaussianPrior.isotropic((2, 2), 0.8, 0.001)
    observations = [_observe(SubgridId(0, 0), [[0.79]], 0.001)]
    mixture = gmm_posterior_mixture(GmmPrior(np.array([0.5, 0.5]), (low, high)), observations)
    assert mixture.weights[1] > 0.999


def test__gmm_prior__validation():
    component = GaussianPrior.isotropic((2, 2), 0.0, 1.0)
    with pytest.raises(DimensionError, match=re.escape("A mixture prior needs at least two components")):
        GmmPrior(np.array([1.0]), (component,))
    with pytest.raises(DimensionError, match=re.escape("Mixture weights must be non-negative and sum to 1")):
        GmmPrior(np.array([0.6, 0.6]), (component, component))


def test__gaussian_prior__stationary_is_periodic():
    prior = GaussianPrior.stationary((4, 4), 0.0, 1.0, 1.5)
    cov = prior.cov.entries
    assert cov[0, 1] == pytest.approx(cov[0, 3])
    assert cov[0, 0] == pytest.approx(1.0 + 1e-4)
    assert isinstance(prior.cov, DenseMatrix) and prior.cov.spd


@pytest.mark.parametrize("hr_shape", [(4, 4), (6, 6), (8, 8)])
@pytest.mark.parametrize("length_scale", [1.0, 1.5])
def test__gaussian_prior__stationary_is_positive_definite(hr_shape: tuple[int, int], length_scale: float):
    prior = GaussianPrior.stationary(hr_shape, 0.5, 0.01, length_scale)
    cov = prior.cov.entries
    np.testing.assert_array_equal(cov, cov.T)
    assert np.min(np.linalg.eigvalsh(cov)) >= 0.5 * 1e-4 * 0.01
    np.testing.assert_allclose(np.diag(cov), 0.01 * (1.0 + 1e-4), rtol=1e-10)
    assert prior.cov.factor().logdet < 0
    assert np.all(np.isfinite(prior.sample(make_rng(3), 10)))


def test__gmm_prior__sample_follows_weights():
    low = GaussianPrior.isotropic((2, 2), -10.0, 1e-2)
    high = GaussianPrior.isotropic((2, 2), 10.0, 1e-2)
    only_low = GmmPrior(np.array([1.0, 0.0]), (low, high)).sample(make_rng(4), 500)
    assert only_low.shape == (500, 2, 2)
    assert np.all(only_low < 0)
    mixed = GmmPrior(np.array([0.25, 0.75]), (low, high)).sample(make_rng(5), 20000)
    assert np.mean(mixed[:, 0, 0] > 0) == pytest.approx(0.75, abs=0.02)
    assert np.all(np.sign(mixed[:, 0, 0])[:, None, None] == np.sign(mixed))


def test__mc_posterior__zero_noise__raises():
    prior = GaussianPrior.isotropic((2, 2), 0.0, 1.0)
    with pytest.raises(DegenerateLikelihoodError, match=re.escape("Zero-noise observations")):
        mc_posterior(prior.sample, [_observe(SubgridId(0, 0), [[0.1]], 0.0)], 1000, seed=1)


def test__mc_posterior__too_few_samples__raises():
    prior = GaussianPrior.isotropic((2, 2), 0.0, 1.0)
    with pytest.raises(SampleSizeError, match=re.escape("at least 1000 samples, got 10")):
        mc_posterior(prior.sample, [_observe(SubgridId(0, 0), [[0.1]], 1.0)], 10, seed=1)


def test__mc_posterior__low_effective_sample_size__warns(caplog: pytest.LogCaptureFixture):
    prior = GaussianPrior.isotropic((2, 2), 0.0, 1.0)
    observations = [_observe(tau, [[0.5]], 1e-6) for tau in (SubgridId(0, 0), SubgridId(1, 1))]
    with caplog.at_level(logging.WARNING, logger="ssnll.posterior"):
        result = mc_posterior(prior.sample, observations, 2000, seed=5)
    assert not result.reliable
    assert "effective sample size" in caplog.text


def test__mc_posterior__independent_of_jobs():
    prior = GaussianPrior.isotropic((2, 2), 0.0, 1.0)
    observations = [_observe(SubgridId(0, 0), [[0.4]], 0.5)]
    serial = mc_posterior(prior.sample, observations, 70000, seed=11, jobs=1)
    threaded = mc_posterior(prior.sample, observations, 70000, seed=11, jobs=3)
    np.testing.assert_array_equal(serial.summary.mean.data, threaded.summary.mean.data)
    assert serial.effective_sample_size == threaded.effective_sample_size


@pytest.mark.slow
def test__mc_posterior__matches_analytic_gaussian(rng: np.random.Generator):
    prior = GaussianPrior.stationary((4, 4), 0.5, 0.01, 1.5)
    observations = _random_observations(rng, count=4, noise=0.01)
    exact = gaussian_posterior(prior, observations)
    approx = mc_posterior(prior.sample, observations, 400_000, seed=99)
    assert approx.reliable
    gap = np.abs(approx.summary.mean.data - exact.mean.data)
    assert np.all(gap <= 5 * approx.mean_std_error.data + 1e-12)
    np.testing.assert_allclose(approx.summary.diag.data, exact.diag.data, rtol=0.1)


def test__mc_posterior__std_error_shrinks_with_sample_count():
    prior = GaussianPrior.isotropic((2, 2), 0.0, 1.0)
    observations = [_observe(SubgridId(0, 0), [[0.4]], 2.0)]
    ratios = [
        mc_posterior(prior.sample, observations, 2000, seed=k).mean_std_error.data
        / mc_posterior(prior.sample, observations, 4000, seed=1000 + k).mean_std_error.data
        for k in range(50)
    ]
    ratio = np.mean(ratios, axis=0)
    assert np.all(np.abs(ratio / math.sqrt(2.0) - 1.0) <= 0.2)


def test__mc_posterior__matches_two_component_mixture():
    low = GaussianPrior.isotropic((2, 2), -1.0, 0.5)
    high = GaussianPrior.isotropic((2, 2), 1.0, 0.5)
    prior = GmmPrior(np.array([0.4, 0.6]), (low, high))
    observations = [_observe(SubgridId(0, 0), [[0.2]], 0.3)]
    exact = gmm_posterior(prior, observations)
    approx = mc_posterior(prior.sample, observations, 1_000_000, seed=21)
    assert approx.reliable
    gap = np.abs(approx.summary.mean.data - exact.mean.data)
    assert np.all(gap <= 3 * approx.mean_std_error.data)
    np.testing.assert_allclose(approx.summary.diag.data, exact.diag.data, rtol=0.02)
