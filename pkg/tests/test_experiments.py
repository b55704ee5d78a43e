import re
from pathlib import Path

import numpy as np
import pytest

from ssnll.exceptions import ConfigError
from ssnll.experiments import (
    RESULT_COLUMNS,
    ExperimentConfig,
    ExperimentKind,
    PriorKind,
    balanced_shifts,
    load_config,
    make_instance,
    parse_config_text,
    run_experiment,
    write_artifacts,
)
from ssnll.risk import RHatMode

from tests.conftest import WriteConfig


def test__parse_config_text__reads_every_value_kind():
    cfg = parse_config_text(
        """
        # theory check on a small grid
        experiment = prop1   # trailing comment
        hr_height = 6

        prior = isotropic
        noise_b = 2.5e-4
        r_hat_mode = zero
        include_reference = false
        levels = 0.5, 0.9
        seed = 18446744073709551615
        """,
    )
    assert cfg.experiment is ExperimentKind.prop1
    assert cfg.hr_shape == (6, 4)
    assert cfg.prior is PriorKind.isotropic
    assert cfg.noise_b == 2.5e-4
    assert cfg.r_hat_mode is RHatMode.zero
    assert cfg.include_reference is False
    assert cfg.levels == [0.5, 0.9]
    assert cfg.seed == 2**64 - 1


@pytest.mark.parametrize(
    ("text", "message"),
    [
        ("experiment = prop1\noops\n", "line 2: Expected 'key = value', got 'oops'"),
        ("experiment = prop1\n\nwidth = 4\n", "line 3: Unknown key 'width'"),
        ("experiment = prop1\nseed = 1\nseed = 2\n", "line 3: Duplicate key 'seed' (first set on line 2)"),
        ("experiment = prop1\n# comment\nhr_height = 5\n", "line 3: Field 'hr_height' must be even, got 5"),
        ("experiment = prop1\nhr_width = wide\n", "line 2: Field 'hr_width': value is not a valid integer"),
        ("experiment = nothing\n", "line 1: Field 'experiment': value is not a valid enumeration member"),
        ("experiment = prop1\nmc_samples = 10\n", "line 2: Field 'mc_samples' must be >= 1000, got 10"),
        ("experiment = prop1\nlevels = 0.9, 0.5\n", "line 2: Field 'levels' must be strictly increasing inside (0, 1)"),
        ("experiment = prop1\nseed = 18446744073709551616\n", "line 2: Field 'seed' must fit in 64 unsigned bits"),
        ("hr_height = 4\n", "Field 'experiment': field required"),
    ],
)
def test__parse_config_text__errors_name_the_line(text: str, message: str):
    with pytest.raises(ConfigError, match=re.escape(message)):
        parse_config_text(text)


def test__parse_config_text__cross_field_errors():
    with pytest.raises(ConfigError, match=re.escape("gmm_means has 3 entries but gmm_weights has 2")):
        parse_config_text("experiment = prop1\ngmm_means = 0.1, 0.5, 0.9\n")
    with pytest.raises(ConfigError, match=re.escape("needs a Gaussian prior")):
        parse_config_text("experiment = train_affine\nprior = gmm\n")
    with pytest.raises(ConfigError, match=re.escape("HR grid 66x64 exceeds the dense limit of 4096 pixels")):
        parse_config_text("experiment = stationarity\nhr_height = 66\nhr_width = 64\n")


def test__config_error__carries_line_and_field():
    with pytest.raises(ConfigError) as info:
        parse_config_text("experiment = prop1\nnoise_b = 0\n")
    assert info.value.line == 2
    assert info.value.field == "noise_b"


def test__load_config__reads_file(write_config: WriteConfig):
    path = write_config(
        """
        experiment = gradcheck
        instances = 3
        """,
    )
    assert load_config(path).instances == 3


def test__config_hash__ignores_output_directory():
    cfg = ExperimentConfig(experiment=ExperimentKind.gradcheck)
    assert cfg.copy(update={"out": "elsewhere"}).config_hash() == cfg.config_hash()
    assert cfg.copy(update={"seed": 1}).config_hash() != cfg.config_hash()
    assert "seed = 0" in cfg.canonical_lines()
    assert all(not line.startswith("out ") for line in cfg.canonical_lines())


def test__balanced_shifts__cycle_through_subgrids():
    assert balanced_shifts(4) == [(0, 0), (0, 0), (0, 1), (1, 0)]
    assert balanced_shifts(6)[-1] == (0, 0)


def test__make_instance__is_reproducible():
    cfg = ExperimentConfig(experiment=ExperimentKind.stationarity, prior=PriorKind.gmm)
    first, second = make_instance(cfg, 77), make_instance(cfg, 77)
    assert (first.u.data == second.u.data).all()
    assert (first.problem.posterior.cov.entries == second.problem.posterior.cov.entries).all()
    assert first.problem.sampler is not None
    assert len(first.observations) == cfg.n_frames


def test__run_experiment__gradcheck_passes():
    output = run_experiment(ExperimentConfig(experiment=ExperimentKind.gradcheck, instances=2, seed=3))
    assert output.passed, [row for row in output.rows if not row.passed]
    assert {row.check for row in output.rows if row.instance == "all"} == {
        "max_grad_selfsup_diag",
        "max_grad_selfsup_full",
        "max_grad_supervised",
        "max_grad_risk",
    }


def test__run_experiment__independent_of_jobs():
    cfg = ExperimentConfig(experiment=ExperimentKind.stationarity, instances=4, seed=11)
    serial = run_experiment(cfg, jobs=1)
    threaded = run_experiment(cfg, jobs=3)
    assert serial.rows == threaded.rows
    assert serial.seeds == threaded.seeds


def test__run_experiment__stationarity_passes():
    output = run_experiment(ExperimentConfig(experiment=ExperimentKind.stationarity, instances=3, seed=2))
    assert output.passed, [row for row in output.rows if not row.passed]
    assert len(output.rows) == 12


def test__run_experiment__prop1_passes():
    cfg = ExperimentConfig(experiment=ExperimentKind.prop1, instances=1, restarts=3, seed=4)
    output = run_experiment(cfg)
    assert output.passed, [row for row in output.rows if not row.passed]
    assert "bias_inflation_variance" in {row.check for row in output.rows}


def test__run_experiment__rejects_zero_jobs():
    with pytest.raises(ValueError, match=re.escape("jobs must be >= 1, got 0")):
        run_experiment(ExperimentConfig(experiment=ExperimentKind.gradcheck), jobs=0)


def test__run_experiment__train_affine_reports_both_losses():
    cfg = ExperimentConfig(
        experiment=ExperimentKind.train_affine,
        n_bursts=64,
        test_bursts=4,
        epochs=2,
        write_rasters=True,
    )
    output = run_experiment(cfg)
    checks = {row.check for row in output.rows}
    assert {"mean_vs_oracle_selfsup", "variance_vs_oracle_supervised", "mean_selfsup_vs_supervised"} <= checks
    assert {"psnr_selfsup", "calibration_error_supervised"} <= checks
    assert set(output.estimators) == {"selfsup", "supervised"}
    assert set(output.rasters) == {"mean", "variance", "squared_error", "oracle_mean", "oracle_variance"}


def test__run_experiment__coverage_study_rows():
    cfg = ExperimentConfig(experiment=ExperimentKind.coverage_study, instances=2, coverage_pixels=3200, levels=[0.9])
    output = run_experiment(cfg)
    values = {row.check: row.value for row in output.rows}
    assert set(values) == {"coverage_at_0.90", "calibration_error", "sharpness", "pixels"}
    assert values["pixels"] == 3200
    assert values["coverage_at_0.90"] == values["calibration_error"]


@pytest.mark.slow
def test__run_experiment__coverage_study_is_calibrated():
    cfg = ExperimentConfig(experiment=ExperimentKind.coverage_study, instances=20, seed=1)
    output = run_experiment(cfg, jobs=4)
    assert output.passed, [row for row in output.rows if not row.passed]


@pytest.mark.slow
def test__run_experiment__reference_subgrid_is_most_certain():
    cfg = ExperimentConfig(experiment=ExperimentKind.subgrid_study, hr_height=16, hr_width=16, n_frames=5, seed=6)
    output = run_experiment(cfg, jobs=4)
    assert output.passed, [row for row in output.rows if not row.passed]


@pytest.mark.slow
def test__run_experiment__selfsup_training_matches_supervised_and_oracle():
    cfg = ExperimentConfig(
        experiment=ExperimentKind.train_affine,
        hr_height=8,
        hr_width=8,
        n_frames=4,
        noise_b=1e-4,
        n_bursts=4000,
        test_bursts=200,
        epochs=150,
        seed=2024,
    )
    output = run_experiment(cfg, jobs=2)
    assert output.passed, [row for row in output.rows if not row.passed]


def test__make_instance__gmm_prior_builds_mixture():
    cfg = ExperimentConfig(
        experiment=ExperimentKind.prop1,
        prior=PriorKind.gmm,
        gmm_means=[0.2, 0.5, 0.8],
        gmm_weights=[0.2, 0.3, 0.5],
    )
    instance = make_instance(cfg, 5)
    assert instance.problem.posterior.shape == (4, 4)
    assert instance.problem.sampler is not None


def test__write_artifacts__results_and_manifest(tmp_path: Path):
    cfg = ExperimentConfig(experiment=ExperimentKind.stationarity, instances=2, seed=9)
    output = run_experiment(cfg)
    write_artifacts(tmp_path, cfg, output, "0.3.0")
    results = (tmp_path / "results.csv").read_bytes()
    assert b"\r" not in results
    lines = results.decode().splitlines()
    assert lines[0] == ",".join(RESULT_COLUMNS)
    assert len(lines) == 1 + len(output.rows)
    assert lines[1].startswith(f"{cfg.config_hash()},stationarity,0,all,invertibility_min_eigenvalue,")
    manifest = (tmp_path / "manifest.txt").read_text().splitlines()
    assert manifest[:2] == ["version = 0.3.0", f"config_hash = {cfg.config_hash()}"]
    assert f"trial_seeds = {output.seeds[0]}, {output.seeds[1]}" in manifest
    assert "results = results.csv" in manifest
    assert not (tmp_path / "rasters").exists()


def test__write_artifacts__rasters_and_estimators(tmp_path: Path):
    cfg = ExperimentConfig(
        experiment=ExperimentKind.train_affine,
        n_bursts=32,
        test_bursts=2,
        epochs=1,
        write_rasters=True,
    )
    write_artifacts(tmp_path, cfg, run_experiment(cfg), "0.3.0")
    assert (tmp_path / "rasters" / "mean.raw").exists()
    assert (tmp_path / "estimators" / "selfsup" / "manifest.txt").exists()
    manifest = (tmp_path / "manifest.txt").read_text()
    assert "raster = rasters/oracle_variance.raw" in manifest
    assert "estimator = estimators/supervised" in manifest


@pytest.mark.parametrize("experiment", list(ExperimentKind))
def test__make_instance__default_config(experiment: ExperimentKind):
    cfg = ExperimentConfig(experiment=experiment)
    trial = make_instance(cfg, 5)
    assert trial.u.shape == (4, 4)
    assert len(trial.observations) == cfg.n_frames
    assert np.all(trial.problem.posterior.diag.data > 0)
    if experiment is not ExperimentKind.train_affine:
        mixture = make_instance(ExperimentConfig(experiment=experiment, prior=PriorKind.gmm), 5)
        assert mixture.problem.sampler is not None


def test__run_experiment__subgrid_study_scores_trained_estimators():
    cfg = ExperimentConfig(
        experiment=ExperimentKind.subgrid_study,
        n_frames=5,
        instances=3,
        n_bursts=64,
        test_bursts=4,
        epochs=2,
    )
    output = run_experiment(cfg)
    checks = {row.check for row in output.rows}
    assert {
        "variance_smallest_failure_rate",
        "expected_rmse_smallest_failure_rate",
        "pooled_rmse",
        "v_rmse_selfsup",
        "calibration_error_supervised_with_reference",
        "sharpness_selfsup_with_reference",
        "variance_smallest_selfsup_with_reference_failure",
        "variance_smallest_supervised_with_reference_failure",
    } <= checks
    assert "variance_smallest_selfsup_failure" not in checks
    assert set(output.estimators) == {"selfsup", "supervised", "selfsup_with_reference", "supervised_with_reference"}
    rates = {row.check: row for row in output.rows if row.check.endswith("_failure_rate")}
    assert rates["expected_rmse_smallest_failure_rate"].passed
    assert rates["variance_smallest_failure_rate"].passed
    per_subgrid = {row.subgrid for row in output.rows if row.check == "v_rmse_supervised_with_reference"}
    assert per_subgrid == {"(0,0)", "(0,1)", "(1,0)", "(1,1)"}
    assert len(output.seeds) == cfg.instances + 3
