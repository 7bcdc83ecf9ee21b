import pytest

from retrain_rl.cli import main

SMALL = ["--T", "8", "--n", "200", "--runs", "2", "--train-steps", "128", "--train-horizon", "6",
         "--set", "rollout_length=64", "--set", "minibatch_size=32", "--set", "epochs=1"]


def test_no_args_prints_help(capsys):
    assert main([]) == 0
    assert "compare" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [["bogus"], ["compare", "--nope"], ["compare", "--T", "x"],
                                  ["compare", "--T", "1"], ["compare", "--set", "zzz=1"]])
def test_usage_errors_exit_1(argv):
    assert main(argv) == 1


def test_missing_checkpoint_is_runtime_failure(tmp_path):
    assert main(["compare", "--checkpoint", str(tmp_path / "none"), "--out",
                 str(tmp_path)]) == 2


def test_train_then_compare_from_checkpoint(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), *SMALL]) == 0
    assert (out / "agent" / "agent.json").exists()
    assert main(["compare", "--out", str(out), "--checkpoint", str(out / "agent"), *SMALL]) == 0
    assert "Never update" in capsys.readouterr().out
    assert (out / "results.csv").exists()


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("# small\nT = 8\nn = 200\nruns = 1\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path), "--runs", "2"]) == 0
    assert len(list((tmp_path / "simulate").glob("run_*.csv"))) == 2


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--nets", "2"]) == 0
    assert "PASS" in capsys.readouterr().out
