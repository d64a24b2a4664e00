import json

import main


def test_bad_config_exits_with_config_code(tmp_path):
    path = tmp_path / "bad.conf"
    path.write_text("nonsense = 1\n")
    assert main.main(["bench", "--config", str(path), "--no-progress"]) == main.EXIT_CONFIG


def test_verify_writes_json_lines(tmp_path):
    out = tmp_path / "reports.jsonl"
    code = main.main(["verify", "--suite", "identities", "--instances", "2", "--out", str(out)])
    assert code == main.EXIT_OK
    lines = out.read_text().splitlines()
    assert [json.loads(line)["instance_id"] for line in lines] == [0, 1]


def test_verify_prints_reports_without_output_file(capsys):
    assert main.main(["verify", "--suite", "corollary1", "--instances", "1"]) == main.EXIT_OK
    assert json.loads(capsys.readouterr().out.splitlines()[0])["check"] == "corollary1"


def test_demo_prints_one_line_per_controller(tmp_path, capsys):
    path = tmp_path / "demo.conf"
    path.write_text(
        "past_horizon = 5\nfuture_horizon = 8\ntotal_samples_grid = 80\nlambda2_grid = 10\n"
        "controllers = spc, cspc, deepc_proj\n"
    )
    assert main.main(["demo", "--config", str(path)]) == main.EXIT_OK
    out = capsys.readouterr().out
    assert "N_bar = 80, N = 68" in out
    for label in ("Oracle", "SPC", "C-SPC", "DeePC_proj(10)"):
        assert label in out


def test_bench_writes_outputs(tmp_path, capsys):
    path = tmp_path / "tiny.conf"
    out = tmp_path / "run"
    path.write_text(
        "past_horizon = 5\nfuture_horizon = 8\ntotal_samples_grid = 30, 80\nlambda2_grid = 1\n"
        "n_train = 1\nn_noise = 1\ncontrollers = spc, deepc_proj\n"
    )
    code = main.main(["bench", "--config", str(path), "--out", str(out), "--no-progress"])
    assert code == main.EXIT_OK
    assert (out / "results.csv").exists() and (out / "fig_slack.svg").exists()
    assert "slack_zero_at_smallest_n: True" in capsys.readouterr().out


def test_scale_flag_and_its_alias_select_the_full_grid():
    parser = main.build_parser()
    for flag in ("--paper-scale", "--full-scale"):
        assert parser.parse_args(["bench", flag]).full_scale
    assert not parser.parse_args(["bench"]).full_scale
    assert main.load_config(None, full_scale=True).n_train == 200
