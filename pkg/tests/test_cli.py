import subprocess
import sys

import pytest

from ctxedit import config
from ctxedit.cli import main


def test_plan_recamera(capsys):
    assert main(["plan", "--task", "recamera", "--frames", "6"]) == 0
    out = capsys.readouterr().out
    assert "config fingerprint:" in out
    assert "soft_reference\t300,301,302,303,304,305\t" in out
    assert "overlap check: ok" in out


def test_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_train_missing_dataset_exit_3(tmp_path, capsys):
    missing = tmp_path / "no_such_data"
    code = main(["train", "--data", str(missing), "--out", str(tmp_path / "run")])
    assert code == 3
    assert str(missing) in capsys.readouterr().err


def test_bad_config_exit_3(tmp_path, capsys):
    p = tmp_path / "c.yaml"
    p.write_text("nonsense: true\n")
    assert main(["plan", "--config", str(p), "--task", "recamera", "--frames", "2"]) == 3


def test_bad_task_exit_3():
    assert main(["plan", "--task", "audio", "--frames", "2"]) == 3


def _tiny_config(tmp_path):
    cfg = config.Config()
    cfg.model.depth, cfg.model.channels, cfg.model.heads, cfg.model.head_dim = 1, 16, 2, 8
    cfg.data.frames = [2]
    cfg.data.train_count = 3
    cfg.data.benchmark_per_task = 2
    cfg.train.batch_size = 2
    cfg.train.schedule = "recamera,id_delete:2"
    cfg.sample.steps = 2
    cfg.paths.data = str(tmp_path / "data")
    cfg.paths.benchmark = str(tmp_path / "bench")
    cfg.paths.runs = str(tmp_path / "runs")
    path = tmp_path / "cfg.yaml"
    path.write_text(config.dumps(cfg))
    return path


def test_end_to_end_small(tmp_path, capsys):
    cfgp = str(_tiny_config(tmp_path))
    assert main(["gen-data", "--config", cfgp, "--kinds", "recamera,id_delete"]) == 0
    assert main(["gen-data", "--config", cfgp, "--benchmark", "--kinds", "recamera,id_delete"]) == 0
    assert main(["train", "--config", cfgp, "--out", str(tmp_path / "run")]) == 0
    ckpt = tmp_path / "run" / "last.cxck"
    assert ckpt.exists() and (tmp_path / "run" / "metrics.log").exists()
    assert main(["sample", "--config", cfgp, "--checkpoint", str(ckpt), "--task", "recamera",
                 "--out", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "strip.gif").exists()
    assert main(["eval", "--config", cfgp, "--checkpoint", str(ckpt), "--out", str(tmp_path / "e"), "--gif"]) == 0
    report = (tmp_path / "e" / "report.tsv").read_text()
    assert "recamera\ttrajectory_error" in report
    assert (tmp_path / "e" / "id_delete.gif").exists()
    # resume finishes immediately: the schedule is already complete
    assert main(["train", "--config", cfgp, "--resume", str(ckpt), "--out", str(tmp_path / "run2")]) == 0


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "ctxedit.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gen-data" in res.stdout
