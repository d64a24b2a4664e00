import numpy as np
import pytest

import bench
from errors import InfeasibleProblemError
from models import ControllerSpec, ExperimentConfig, SummaryRow


@pytest.fixture
def tiny_config(tmp_path):
    """rho = 5, T = 8: n_phi = 18, so N_bar = 30 gives N = n_phi"""
    return ExperimentConfig(
        past_horizon=5,
        future_horizon=8,
        total_samples_grid=[30, 80],
        lambda2_grid=[1.0, 100.0],
        n_train=2,
        n_noise=2,
        controllers=["spc", "cspc", "deepc_proj", "oracle"],
        output_dir=str(tmp_path / "out"),
    )


def _cell(config, kind, n_bar, **spec):
    train_seed = bench.train_seed_for(config, n_bar, 0)
    noise_seed = bench.noise_seed_for(config, n_bar, 0, 0)
    return bench.run_single(config, ControllerSpec(kind=kind, **spec), n_bar, train_seed, noise_seed)


def test_seeds_follow_the_sweep_coordinates(tiny_config):
    assert bench.train_seed_for(tiny_config, 30, 0) != bench.train_seed_for(tiny_config, 30, 1)
    assert bench.noise_seed_for(tiny_config, 30, 0, 0) != bench.noise_seed_for(tiny_config, 30, 0, 1)
    assert bench.train_seed_for(tiny_config, 30, 0) != bench.noise_seed_for(tiny_config, 30, 0, 0)


def test_initial_problem_has_zero_past_inputs(tiny_config):
    problem = bench.initial_problem(tiny_config, noise_seed=4)
    assert np.all(problem.z[:5] == 0)
    assert np.any(problem.z[5:] != 0)
    assert np.allclose(problem.y_ref, 0.75)


def test_oracle_is_at_zero_distance_from_itself(tiny_config):
    result = _cell(tiny_config, "oracle", 80)
    assert result.ok
    assert result.j_oracle_dist == pytest.approx(0.0, abs=1e-12)
    assert result.slack_ms == 0.0


def test_interpolating_data_uses_no_slack(tiny_config):
    result = _cell(tiny_config, "deepc_proj", 30, beta=1.0)
    assert result.ok
    assert result.rank_delta == 0
    assert result.slack_ms == 0.0


def test_noise_free_spc_matches_oracle(tiny_config):
    config = tiny_config.model_copy(update={"noise_std": 0.0})
    spc = _cell(config, "spc", 80)
    oracle = _cell(config, "oracle", 80)
    assert spc.j_star == pytest.approx(oracle.j_star, abs=1e-6)
    assert spc.j_oracle_dist == pytest.approx(0.0, abs=1e-6)


def test_solver_failure_is_recorded_not_raised(tiny_config, monkeypatch):
    def refuse(*args, **kwargs):
        raise InfeasibleProblemError("no convergence", status="max_iter")

    monkeypatch.setattr(bench, "solve_indirect", refuse)
    result = _cell(tiny_config, "deepc_proj", 80, beta=1.0)
    assert result.status == "max_iter"
    assert not result.ok
    assert result.j_star is None and result.slack_ms is None


def test_gamma_cell_records_unmet_precondition(tiny_config):
    short = _cell(tiny_config, "gamma_ddpc", 30, beta2=1.0, beta3=1.0)
    assert short.status == "precondition"
    assert short.skipped and not short.ok
    assert short.j_star is None
    rich = _cell(tiny_config, "gamma_ddpc", 80, beta2=1.0, beta3=1.0)
    assert rich.ok


def test_sweep_is_independent_of_worker_count(tiny_config, tmp_path):
    serial = bench.run_sweep(tiny_config, out_dir=tmp_path / "serial", progress=False)
    parallel = bench.run_sweep(tiny_config.model_copy(update={"jobs": 2}), out_dir=tmp_path / "parallel", progress=False)
    assert len(serial) == 2 * 2 * 2 * 5
    assert (tmp_path / "serial" / "results.csv").read_bytes() == (tmp_path / "parallel" / "results.csv").read_bytes()
    assert [r.model_dump() for r in serial] == [r.model_dump() for r in parallel]


def test_results_file_reads_back(tiny_config, tmp_path):
    results = bench.run_sweep(tiny_config, out_dir=tmp_path, progress=False)
    assert bench.read_results(tmp_path / "results.csv") == results


def test_aggregate_writes_summary_and_figures(tiny_config, tmp_path):
    results = bench.run_sweep(tiny_config, out_dir=tmp_path / "run", progress=False)
    paths = bench.aggregate_and_plot(results, tmp_path / "run")
    assert sorted(p.name for p in paths) == ["fig_cost.svg", "fig_oracle.svg", "fig_slack.svg", "summary.csv"]
    slack_svg = (tmp_path / "run" / "fig_slack.svg").read_text()
    assert "<svg" in slack_svg
    assert "DeePC_proj(1)" in slack_svg

    summary = bench.summarize(results)
    assert {r.count for r in summary} == {4}
    assert len(summary) == 5 * 2

    again = bench.aggregate_and_plot(results, tmp_path / "again")
    assert [p.read_bytes() for p in again] == [p.read_bytes() for p in paths]


def test_aggregate_rejects_empty_results(tmp_path):
    with pytest.raises(ValueError):
        bench.aggregate_and_plot([], tmp_path)


def _row(controller, kind, n_bar, lam2=None, j_star=1.0, j_oracle=1.0, slack=0.0):
    return SummaryRow(
        controller=controller,
        kind=kind,
        total_samples=n_bar,
        lambda2=lam2,
        count=1,
        j_star_median=j_star,
        j_star_q25=j_star,
        j_star_q75=j_star,
        j_oracle_median=j_oracle,
        j_oracle_q25=j_oracle,
        j_oracle_q75=j_oracle,
        slack_ms_median=slack,
        slack_ms_q25=slack,
        slack_ms_q75=slack,
    )


def test_trend_report_on_expected_shape():
    summary = [
        _row("SPC", "spc", 119, j_star=2.0, j_oracle=3.0),
        _row("SPC", "spc", 10000, j_star=1.0),
        _row("C-SPC", "cspc", 119, j_oracle=2.0),
        _row("C-SPC", "cspc", 10000),
        _row("DeePC_proj(1)", "deepc_proj", 119, 1.0, slack=0.0),
        _row("DeePC_proj(1)", "deepc_proj", 10000, 1.0, j_star=1.5, slack=1e-3),
        _row("DeePC_proj(1000)", "deepc_proj", 119, 1000.0, slack=0.0),
        _row("DeePC_proj(1000)", "deepc_proj", 10000, 1000.0, j_star=1.1, slack=1e-7),
    ]
    report = bench.trend_report(summary)
    assert report == {
        "slack_increasing_small_lambda": True,
        "slack_zero_at_smallest_n": True,
        "cost_order_at_largest_n": True,
        "cspc_closer_to_oracle_at_smallest_n": True,
    }


def test_trend_report_without_needed_series():
    report = bench.trend_report([_row("SPC", "spc", 119)])
    assert set(report.values()) == {None}


@pytest.mark.slow
def test_desk_scale_trends(tmp_path):
    config = ExperimentConfig.desk_scale(
        total_samples_grid=[119, 1000, 10000],
        lambda2_grid=[1.0, 1000.0],
        n_train=5,
        n_noise=3,
        controllers=["spc", "cspc", "deepc_proj", "oracle"],
        jobs=2,
    )
    results = bench.run_sweep(config, out_dir=tmp_path, progress=False)
    assert all(r.ok for r in results)
    report = bench.trend_report(bench.summarize(results))
    assert report["slack_zero_at_smallest_n"]
    assert report["slack_increasing_small_lambda"]
    assert report["cost_order_at_largest_n"]
    assert report["cspc_closer_to_oracle_at_smallest_n"]
