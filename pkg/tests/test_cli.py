from __future__ import annotations

import subprocess
import sys

import pytest

from avmtl.cli import (
    EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_DATA, EXIT_OK, SYNTH_TRAINING, build_parser, main, resolve_config,
)
from avmtl.config import load_config


@pytest.fixture(scope="module")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "corpus"
    assert main(["synth", "--out", str(root), "--videos", "2", "--val-videos", "1", "--frames", "20"]) == EXIT_OK
    return root


def test_synth_writes_loadable_config(synth_root):
    cfg = load_config(synth_root / "pipeline.cfg")
    assert cfg.out_dir == str(synth_root / "run")
    assert cfg.train_au_dir == str(synth_root / "annotations" / "au" / "train")
    for key, value in SYNTH_TRAINING.items():
        assert getattr(cfg, key) == value


def test_stats_and_prepare(synth_root, tmp_path, capsys):
    args = ["--config", str(synth_root / "pipeline.cfg"), "--out", str(tmp_path)]
    assert main(["stats", *args]) == EXIT_OK
    assert "AU1" in capsys.readouterr().out
    assert main(["prepare-data", *args]) == EXIT_OK
    assert '"au_val": 0' in capsys.readouterr().out
    assert (tmp_path / "prepared" / "au_val.csv").is_file()


def test_exit_codes(synth_root, tmp_path):
    cfg = str(synth_root / "pipeline.cfg")
    assert main(["prepare-data", "--config", str(tmp_path / "missing.cfg")]) == EXIT_CONFIG
    assert main(["synth"]) == EXIT_CONFIG
    (tmp_path / "bad.cfg").write_text("visual_lr = -1\n")
    assert main(["prepare-data", "--config", str(tmp_path / "bad.cfg")]) == EXIT_CONFIG
    assert main(["prepare-data", "--out", str(tmp_path / "a")]) == EXIT_CONFIG  # no annotation dirs
    assert main(["train-visual", "--config", cfg, "--out", str(tmp_path / "b")]) == EXIT_DATA
    assert main(["train-audio-sequence", "--config", cfg, "--out", str(tmp_path / "c")]) == EXIT_CHECKPOINT
    assert main(["prepare-data", "--config", cfg, "--out", str(tmp_path / "d")]) == EXIT_OK
    assert main(["evaluate", "--config", cfg, "--out", str(tmp_path / "d")]) == EXIT_CHECKPOINT


def test_flags_override_file(synth_root, tmp_path):
    args = build_parser().parse_args(["train-visual", "--config", str(synth_root / "pipeline.cfg"),
                                      "--alternation", "epoch", "--seed", "7", "--threshold", "0.4",
                                      "--out", str(tmp_path)])
    cfg = resolve_config(args)
    assert (cfg.alternation, cfg.seed, cfg.threshold, cfg.out_dir) == ("epoch_by_epoch", 7, 0.4, str(tmp_path))


def test_usage_errors_exit_nonzero():
    proc = subprocess.run([sys.executable, "-m", "avmtl", "train-visual", "--alternation", "daily"],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "invalid choice" in proc.stderr
    proc = subprocess.run([sys.executable, "-m", "avmtl", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "train-audio-sequence" in proc.stdout
