import subprocess
import sys

import numpy as np
import pytest

from radarkit import cli, experiment, nets
from radarkit.config import ConfigError, parse_config

TINY = """\
[run]
seed = 5

[data]
num_classes = 3
per_class = 6
test_per_class = 2
image_size = 8

[classifier]
epochs = 1
batch_size = 6

[detector]
epochs = 1
batch_size = 6
attack_iters = 2

[radar]
epochs = 1
batch_size = 6
attack_iters = 2
val_limit = 4

[attack]
iters = 3
kind = spgd
detector = pre

[eval]
kinds = pgd, opgd
n_list = 5
trajectory_images = 3
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


def run(*args):
    return cli.main([str(a) for a in args])


class TestConfig:
    def test_defaults_and_overrides(self):
        cfg = parse_config(TINY, seed_override=9, out_override="x")
        assert cfg.seed == 9 and str(cfg.out) == "x"
        assert cfg["attack"]["epsilon"] == 16 / 255
        assert cfg["eval"]["kinds"] == ("pgd", "opgd")

    def test_ratio_values(self):
        cfg = parse_config("[run]\nseed = 1\n[attack]\nepsilon = 8/255\n")
        assert cfg["attack"]["epsilon"] == 8 / 255

    def test_unknown_key_named_with_line(self):
        with pytest.raises(ConfigError, match=r"<config>:4: unknown key 'epoch' in section \[radar\]"):
            parse_config("[run]\nseed = 1\n[radar]\nepoch = 3\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match=r"\[optimizer\]"):
            parse_config("[run]\nseed = 1\n[optimizer]\nlr = 1\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match=r":4: bad value for \[classifier\] epochs"):
            parse_config("[run]\nseed = 1\n[classifier]\nepochs = many\n")

    def test_seed_mandatory(self):
        with pytest.raises(ConfigError, match="seed"):
            parse_config("[data]\nkind = synth\n")

    def test_syntax_error(self):
        with pytest.raises(ConfigError):
            parse_config("seed = 1\n")

    def test_dump_round_trips(self):
        cfg = parse_config(TINY)
        again = parse_config(cfg.dump())
        assert again.values == cfg.values


class TestExitCodes:
    def test_unknown_key_exits_1(self, tmp_path, capsys):
        path = tmp_path / "bad.ini"
        path.write_text(TINY + "colour = red\n")
        assert run("evaluate", "--config", path, "--out", tmp_path) == 1
        assert "colour" in capsys.readouterr().err

    def test_missing_config_exits_1(self, tmp_path):
        assert run("evaluate", "--config", tmp_path / "nope.ini") == 1

    def test_usage_error_exits_1(self):
        with pytest.raises(SystemExit) as exc:
            run("fly", "--config", "x")
        assert exc.value.code == 1

    def test_missing_checkpoint_exits_2(self, cfg_file, tmp_path, capsys):
        assert run("train-detector", "--config", cfg_file, "--out", tmp_path / "o") == 2
        assert "train-classifier" in capsys.readouterr().err

    def test_corrupt_checkpoint_exits_2(self, cfg_file, tmp_path):
        out = tmp_path / "o"
        out.mkdir()
        (out / "classifier.rdr").write_bytes(b"JUNK")
        assert run("train-detector", "--config", cfg_file, "--out", out) == 2

    def test_module_entry_point(self, cfg_file, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "radarkit", "evaluate", "--config", str(cfg_file),
                               "--out", str(tmp_path)], capture_output=True, text=True)
        assert proc.returncode == 2


def test_full_pipeline_and_attack(cfg_file, tmp_path):
    out = tmp_path / "run"
    for cmd in ("train-classifier", "train-detector", "evaluate", "finetune-radar", "attack", "evaluate"):
        assert run(cmd, "--config", cfg_file, "--out", out) == 0, cmd
    names = {p.name for p in out.iterdir()}
    assert {"classifier.rdr", "detector_pre.rdr", "detector_radar.rdr", "report.csv", "report.txt",
            "adv_spgd_pre.rdr", "trajectory_spgd_pre.csv", "classifier_log.csv",
            "detector_radar_log.csv", "eval_trajectory_radar_opgd.csv"} <= names
    report = experiment.read_report_csv(out / "report.csv")
    assert {r for r, _, _ in report} == {"pre", "radar"}
    assert ("radar", "opgd", "sr@5") in report
    batch = experiment.load_adversarial_batch(out / "adv_spgd_pre.rdr")
    assert np.abs(batch["x_adv"] - batch["x"]).max() <= 16 / 255 + 1e-12
    assert len(batch["y"]) == 6
    assert nets.load_checkpoint(out / "detector_radar.rdr").is_detector
    # evaluate is a pure function of its inputs
    first = (out / "report.csv").read_bytes()
    assert run("evaluate", "--config", cfg_file, "--out", out) == 0
    assert (out / "report.csv").read_bytes() == first
