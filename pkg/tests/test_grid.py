import re

import numpy as np
import pytest

from ssnll.exceptions import DefinitenessError, DimensionError, ProblemTooLargeError
from ssnll.grid import (
    ALL_SUBGRIDS,
    DenseMatrix,
    ImageGrid,
    SubgridId,
    dense_cap_check,
    read_raster,
    spd_solve,
    subgrid_embed,
    subgrid_extract,
    subgrid_indices,
    write_raster,
)


@pytest.fixture()
def ramp() -> ImageGrid:
    return ImageGrid(np.arange(16, dtype=float).reshape(4, 4))


@pytest.mark.parametrize(
    ("tau", "expected"),
    [
        (SubgridId(0, 0), [[0, 2], [8, 10]]),
        (SubgridId(0, 1), [[1, 3], [9, 11]]),
        (SubgridId(1, 0), [[4, 6], [12, 14]]),
        (SubgridId(1, 1), [[5, 7], [13, 15]]),
    ],
)
def test__subgrid_extract__picks_every_other_pixel(ramp: ImageGrid, tau: SubgridId, expected: list):
    assert subgrid_extract(ramp, tau).data.tolist() == expected


def test__subgrid_extract__odd_image__raises():
    with pytest.raises(DimensionError, match=re.escape("The image must have even height and width, got 3x4")):
        subgrid_extract(ImageGrid(np.zeros((3, 4))), SubgridId(0, 0))


def test__subgrid_id__out_of_range__raises():
    with pytest.raises(DimensionError, match=re.escape("Subgrid offsets must be 0 or 1, got (2, 0)")):
        SubgridId(2, 0)


def test__subgrid_embed__inserts_zeros():
    assert subgrid_embed(ImageGrid(np.array([[5.0]])), SubgridId(0, 0)).data.tolist() == [[5, 0], [0, 0]]
    assert subgrid_embed(ImageGrid(np.array([[5.0]])), SubgridId(1, 1)).data.tolist() == [[0, 0], [0, 5]]


def test__subgrid_embed__is_right_inverse_of_extract(rng: np.random.Generator):
    x = ImageGrid(rng.normal(size=(3, 3)))
    for tau in ALL_SUBGRIDS:
        embedded = subgrid_embed(x, tau)
        assert np.array_equal(subgrid_extract(embedded, tau).data, x.data)
        for other in ALL_SUBGRIDS:
            if other != tau:
                assert not np.any(subgrid_extract(embedded, other).data)


def test__subgrids__partition_the_image(rng: np.random.Generator):
    img = ImageGrid(rng.normal(size=(6, 8)))
    rebuilt = sum(subgrid_embed(subgrid_extract(img, tau), tau).data for tau in ALL_SUBGRIDS)
    assert np.array_equal(rebuilt, img.data)
    indices = np.sort(np.concatenate([subgrid_indices(img.shape, tau) for tau in ALL_SUBGRIDS]))
    assert np.array_equal(indices, np.arange(img.size))


def test__subgrid_embed__is_adjoint_of_extract(rng: np.random.Generator):
    x = ImageGrid(rng.normal(size=(3, 4)))
    y = ImageGrid(rng.normal(size=(6, 8)))
    for tau in ALL_SUBGRIDS:
        lhs = float(np.sum(subgrid_embed(x, tau).data * y.data))
        rhs = float(np.sum(x.data * subgrid_extract(y, tau).data))
        assert lhs == pytest.approx(rhs, rel=1e-14, abs=1e-14)


def test__subgrid_indices__match_extract(ramp: ImageGrid):
    for tau in ALL_SUBGRIDS:
        assert np.array_equal(ramp.flat()[subgrid_indices(ramp.shape, tau)], subgrid_extract(ramp, tau).flat())


def test__image_grid__non_finite__raises():
    with pytest.raises(DimensionError, match=re.escape("ImageGrid values must be finite")):
        ImageGrid(np.array([[1.0, np.nan]]))


def test__spd_solve__identity():
    solution = spd_solve(np.eye(2), np.array([3.0, 4.0]))
    assert solution.x.tolist() == [3.0, 4.0]
    assert solution.logdet == 0.0


def test__spd_solve__diagonal():
    solution = spd_solve(np.diag([2.0, 4.0]), np.array([2.0, 4.0]))
    assert solution.x == pytest.approx([1.0, 1.0])
    assert solution.logdet == pytest.approx(np.log(8.0))
    assert solution.logdet == pytest.approx(2.0794, abs=1e-4)


def test__spd_solve__random_matrix__small_residual(rng: np.random.Generator):
    a = rng.normal(size=(5, 5))
    m = a @ a.T + 5 * np.eye(5)
    b = rng.normal(size=5)
    solution = spd_solve(DenseMatrix(m, spd=True), b)
    assert np.linalg.norm(m @ solution.x - b) <= 1e-10 * np.linalg.norm(b)
    assert solution.logdet == pytest.approx(float(np.sum(np.log(np.linalg.eigvalsh(m)))), rel=1e-8)


def test__spd_solve__indefinite__raises():
    with pytest.raises(DefinitenessError, match=re.escape("Matrix of size 2 is not symmetric positive definite")):
        spd_solve(np.array([[1.0, 0.0], [0.0, -1.0]]), np.ones(2))


def test__dense_matrix__spd_flag_validates_by_factorization():
    with pytest.raises(DefinitenessError):
        DenseMatrix(np.array([[0.0, 1.0], [1.0, 0.0]]), spd=True)


def test__dense_cap_check__too_large__raises():
    dense_cap_check((64, 64))
    with pytest.raises(
        ProblemTooLargeError,
        match=re.escape("Dense covariance path is limited to 4096 HR unknowns, got 4224 (66x64)"),
    ):
        dense_cap_check((66, 64))


def test__raster__write_then_read_is_bit_exact(tmp_path, rng: np.random.Generator):
    grid = ImageGrid(rng.normal(size=(3, 5)))
    write_raster(tmp_path / "grid.raw", grid)
    assert (tmp_path / "grid.hdr").read_text() == "3 5\n"
    assert (tmp_path / "grid.raw").stat().st_size == 3 * 5 * 8
    assert np.array_equal(read_raster(tmp_path / "grid.raw").data, grid.data)


def test__raster__size_mismatch__raises(tmp_path):
    write_raster(tmp_path / "grid.raw", np.zeros((2, 2)))
    (tmp_path / "grid.hdr").write_text("3 3\n")
    with pytest.raises(DimensionError, match=re.escape("holds 4 values, header says 3x3")):
        read_raster(tmp_path / "grid.raw")
