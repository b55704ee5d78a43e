import textwrap
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import pytest
from pytest_fixture_classes import fixture_class

from ssnll._utils import make_rng
from ssnll.degrade import NoiseModel, observe_integer_burst
from ssnll.grid import ImageGrid
from ssnll.posterior import GaussianPrior, observations_from_burst
from ssnll.risk import RHatMode, RiskProblem

# reference frame, then one input frame per subgrid
BALANCED_SHIFTS = ((0, 0), (0, 0), (0, 1), (1, 0), (1, 1))


@pytest.fixture()
def rng() -> np.random.Generator:
    return make_rng(20240601)


@fixture_class(name="make_gaussian_problem")
class MakeGaussianProblem:
    rng: np.random.Generator

    def __call__(
        self,
        hr_shape: tuple[int, int] = (4, 4),
        *,
        noise: NoiseModel = NoiseModel(0.0, 1e-3),
        shifts: Sequence[tuple[int, int]] = BALANCED_SHIFTS,
        include_reference: bool = True,
        r_hat_mode: RHatMode = RHatMode.exact_diag,
    ) -> RiskProblem:
        prior = GaussianPrior.stationary(hr_shape, 0.5, 0.01, 1.5)
        u = ImageGrid(prior.sample(self.rng, 1)[0])
        burst = observe_integer_burst(u, shifts, noise, int(self.rng.integers(2**32)))
        observations = observations_from_burst(burst, include_reference=include_reference)
        return RiskProblem.from_gaussian(prior, observations, noise, r_hat_mode)


@fixture_class(name="write_config")
class WriteConfig:
    tmp_path: Path

    def __call__(self, text: str, name: str = "experiment.cfg") -> Path:
        path = self.tmp_path / name
        path.write_text(textwrap.dedent(text), encoding="utf-8")
        return path
