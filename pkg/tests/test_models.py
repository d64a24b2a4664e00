import warnings

import pytest
from pydantic import ValidationError

from errors import ConfigError
from models import ControllerSpec, EquivalenceReport, ExperimentConfig, RunResult


def test_desk_and_full_scale_defaults():
    desk = ExperimentConfig.desk_scale()
    assert desk.n_phi == 70
    assert min(desk.total_samples_grid) == 119
    full = ExperimentConfig.full_scale()
    assert (full.n_train, full.n_noise) == (200, 30)
    assert full.total_samples_grid[0] == 119 and full.total_samples_grid[-1] == 10000


@pytest.mark.parametrize(
    "overrides",
    [
        dict(total_samples_grid=[40]),
        dict(lambda2_grid=[-1.0]),
        dict(controllers=["mpc"]),
        dict(controllers=["indirect"]),
        dict(controllers=[]),
        dict(input_lower=1.0, input_upper=-1.0),
        dict(r=0.0),
    ],
)
def test_invalid_configs_are_rejected(overrides):
    with pytest.raises(ValidationError):
        ExperimentConfig(**overrides)


def test_config_file_parsing(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text(
        "# small run\n"
        "total_samples_grid = 119, 500   # two lengths\n"
        "lambda2_grid = 1, 1000\n"
        "n_train = 3\n"
        "controllers = spc, deepc_l2\n"
        "\n"
        "output_dir = results/small\n"
    )
    config = ExperimentConfig.from_file(path)
    assert config.total_samples_grid == [119, 500]
    assert config.lambda2_grid == [1.0, 1000.0]
    assert config.n_train == 3 and config.n_noise == 10
    assert config.output_dir == "results/small"

    full = ExperimentConfig.from_file(path, full_scale=True)
    assert full.n_noise == 30 and full.n_train == 3


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("n_train = 3\nbogus = 1\n", ":2: unknown key"),
        ("n_train 3\n", ":1: expected"),
        ("n_train = many\n", "invalid config"),
    ],
)
def test_config_file_errors(tmp_path, text, fragment):
    path = tmp_path / "bad.conf"
    path.write_text(text)
    with pytest.raises(ConfigError, match=fragment):
        ExperimentConfig.from_file(path)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(tmp_path / "absent.conf")


def test_environment_overrides(monkeypatch):
    monkeypatch.setenv("DDPC_OUTPUT_DIR", "/tmp/ddpc-out")
    monkeypatch.setenv("DDPC_JOBS", "4")
    config = ExperimentConfig().with_env_overrides()
    assert config.output_dir == "/tmp/ddpc-out" and config.jobs == 4

    monkeypatch.setenv("DDPC_JOBS", "four")
    with pytest.raises(ConfigError):
        ExperimentConfig().with_env_overrides()


def test_controller_expansion_over_slack_grid():
    config = ExperimentConfig(controllers=["spc", "deepc_proj", "gamma_ddpc", "oracle"], lambda2_grid=[1.0, 10.0], lambda1=2.0)
    labels = [s.label for s in config.controller_specs()]
    assert labels == ["SPC", "DeePC_proj(1)", "DeePC_proj(10)", "GammaDDPC(2,1)", "GammaDDPC(2,10)", "Oracle"]


@pytest.mark.parametrize(
    "spec, weights",
    [
        (ControllerSpec(kind="deepc_l2", beta=5.0), (5.0, 5.0, False)),
        (ControllerSpec(kind="deepc_proj", beta=5.0), (0.0, 5.0, False)),
        (ControllerSpec(kind="gamma_ddpc", beta2=2.0, beta3=7.0), (2.0, 7.0, False)),
        (ControllerSpec(kind="indirect", lam1=1.0, lam2=3.0, causal=True), (1.0, 3.0, True)),
        (ControllerSpec(kind="cspc"), (0.0, 0.0, True)),
    ],
)
def test_indirect_weights(spec, weights):
    assert spec.indirect_weights() == weights


def test_oracle_has_no_indirect_counterpart():
    spec = ControllerSpec(kind="oracle")
    assert spec.slack_weight is None
    with pytest.raises(ValueError):
        spec.indirect_weights()


def test_negative_weights_rejected():
    with pytest.raises(ValidationError):
        ControllerSpec(kind="deepc_l2", beta=-1.0)


def test_run_result_csv_row():
    result = RunResult(
        controller="SPC", kind="spc", total_samples=119, train_seed=1, noise_seed=2, j_star=0.1, j_oracle_dist=0.0, slack_ms=0.0
    )
    row = dict(zip(RunResult.csv_header(), result.to_csv_row()))
    assert row["lambda2"] == ""
    assert row["j_star"] == "0.10000000000000001"
    assert row["status"] == "optimal"


def test_equivalence_report_verdicts():
    assert EquivalenceReport.judge("gamma", 1e-7, 1e-7, 1e-9, 1e-5, 1e-7).verdict == "pass"
    assert EquivalenceReport.judge("gamma", 1e-7, 1e-7, 1e-3, 1e-5, 1e-7).verdict == "fail"
    assert EquivalenceReport.judge("gamma", 1e-7, 1e-4, None, 1e-5).verdict == "fail"
    skipped = EquivalenceReport.skipped("gamma", "singular", 1e-5, instance_id=3)
    assert skipped.verdict == "skipped" and skipped.detail == "singular" and skipped.instance_id == 3


def test_csv_row_does_not_warn():
    result = RunResult(controller="Oracle", kind="oracle", total_samples=119, train_seed=1, noise_seed=2)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        row = result.to_csv_row()
    assert len(row) == len(RunResult.csv_header())
