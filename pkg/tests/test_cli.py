import csv

import numpy as np
import pytest

from dynsep.cli import main
from dynsep.deploy import load_checkpoint
from dynsep.spectral import Waveform, write_wav
from dynsep.training import DataSpec, synth_batch

QUICK = ["--config", "desk", "--set", "train.max_epochs=2", "--set", "train.steps_per_epoch=2",
         "--set", "train.val_batches=1", "--set", "data.duration=0.25", "--set", "data.batch_size=2"]


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", *QUICK, "--seed", "3", "--out", str(out)]) == 0
    return out


def test_train_writes_checkpoint_metrics_and_config(trained):
    names = sorted(p.name for p in trained.iterdir())
    assert names == ["best.ckpt", "config.txt", "metrics.csv"]
    rows = read_rows(trained / "metrics.csv")
    assert rows[0] == ["epoch", "train_loss", "val_loss", "lr", "histogram"]
    assert [r[0] for r in rows[1:]] == ["1", "2"]
    assert "train.seed" not in (trained / "config.txt").read_text()
    assert "seed = 3" in (trained / "config.txt").read_text()
    assert load_checkpoint(trained / "best.ckpt").config.max_width == 4


def test_same_seed_gives_the_same_run(trained, tmp_path):
    assert main(["train", *QUICK, "--seed", "3", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "metrics.csv").read_bytes() == (trained / "metrics.csv").read_bytes()
    assert (tmp_path / "best.ckpt").read_bytes() == (trained / "best.ckpt").read_bytes()


def test_config_snapshot_replays_the_run(trained, tmp_path):
    assert main(["train", "--config", str(trained / "config.txt"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "best.ckpt").read_bytes() == (trained / "best.ckpt").read_bytes()


def test_unknown_key_is_a_usage_error(tmp_path, capsys):
    assert main(["train", "--config", "desk", "--set", "model.widht=2", "--out", str(tmp_path)]) == 2
    assert "model.widht" in capsys.readouterr().err
    assert list(tmp_path.iterdir()) == []


def test_argparse_errors_exit_two(capsys):
    assert main(["frobnicate"]) == 2
    assert main(["eval"]) == 2  # --checkpoint is required
    assert main(["--help"]) == 0
    capsys.readouterr()


def test_train_needs_out():
    assert main(["train", *QUICK]) == 2


def test_missing_checkpoint_is_a_runtime_failure(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt")]) == 1


def test_corrupt_checkpoint_is_a_runtime_failure(trained, tmp_path):
    raw = bytearray((trained / "best.ckpt").read_bytes())
    raw[-20] ^= 0x10
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    assert main(["eval", "--checkpoint", str(tmp_path / "bad.ckpt")]) == 1


def test_synthetic_eval_is_reproducible(trained, tmp_path, capsys):
    args = ["eval", "--checkpoint", str(trained / "best.ckpt"), "--config", "desk", "--set", "data.duration=0.25",
            "--batches", "1", "--w", "2", "--d", "3", "--seed", "5"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = (tmp_path / "a" / "eval.csv").read_bytes(), (tmp_path / "b" / "eval.csv").read_bytes()
    assert a == b
    rows = read_rows(tmp_path / "a" / "eval.csv")
    assert rows[0] == ["item", "w", "d", "snr_db"] and rows[-1][0] == "mean"
    assert "mean SNR at (w=2, d=3)" in capsys.readouterr().out


def test_oracle_eval_scores_one_hundred(trained, tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--config", "desk",
                 "--set", "data.duration=0.25", "--batches", "1", "--oracle", "--out", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "eval.csv")
    assert all(float(r[3]) == 100.0 for r in rows[1:])


@pytest.fixture(scope="module")
def wav_pair(tmp_path_factory):
    d = tmp_path_factory.mktemp("wav")
    mixture, target = synth_batch(np.random.default_rng(8), DataSpec(duration=0.5, batch_size=1))
    write_wav(d / "mix.wav", Waveform(mixture[0], 8000))
    write_wav(d / "tgt.wav", Waveform(target[0], 8000))
    return d / "mix.wav", d / "tgt.wav"


def test_extracted_checkpoint_scores_like_the_full_model(trained, wav_pair, tmp_path):
    mix, tgt = wav_pair
    assert main(["extract", "--checkpoint", str(trained / "best.ckpt"), "--w", "2", "--d", "3",
                 "--out", str(tmp_path)]) == 0
    small = tmp_path / "subnet_w2_d3.ckpt"
    assert small.exists()
    common = ["--mixture", str(mix), "--target", str(tgt), "--w", "2", "--d", "3"]
    assert main(["eval", "--checkpoint", str(trained / "best.ckpt"), *common, "--out", str(tmp_path / "full")]) == 0
    assert main(["eval", "--checkpoint", str(small), *common, "--out", str(tmp_path / "sub")]) == 0
    full = read_rows(tmp_path / "full" / "eval.csv")
    sub = read_rows(tmp_path / "sub" / "eval.csv")
    assert full == sub


def test_wav_eval_checks_sample_rate(trained, wav_pair, tmp_path):
    mix, tgt = wav_pair
    write_wav(tmp_path / "fast.wav", Waveform(np.zeros((1, 400)), 16000))
    assert main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--mixture", str(tmp_path / "fast.wav"),
                 "--target", str(tgt)]) == 2


def test_enumerate_large_preset(tmp_path, capsys):
    assert main(["enumerate", "--config", "paper", "--out", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "costs.csv")
    assert rows[0] == ["w", "d", "params", "macs_per_s", "snr_db"]
    assert len(rows) == 193
    assert "192 subnetworks" in capsys.readouterr().out


def test_enumerate_with_measurement(trained, tmp_path):
    assert main(["enumerate", "--checkpoint", str(trained / "best.ckpt"), "--config", "desk", "--set",
                 "data.duration=0.25", "--measure", "--batches", "1", "--out", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "costs.csv")
    assert len(rows) == 17 and all(r[4] != "" for r in rows[1:])


def test_select(tmp_path, capsys):
    assert main(["select", "--config", "desk", "--max-macs", "inf", "--out", str(tmp_path)]) == 0
    assert "selected w=4 d=4" in capsys.readouterr().out
    assert read_rows(tmp_path / "selection.csv")[1][:2] == ["4", "4"]
    assert main(["select", "--config", "desk", "--max-macs", "1"]) == 1
    assert "smallest" in capsys.readouterr().err
    assert main(["select", "--config", "desk"]) == 2


def test_extract_by_budget(trained, tmp_path):
    assert main(["extract", "--checkpoint", str(trained / "best.ckpt"), "--max-params", "inf",
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "subnet_w4_d4.ckpt").read_bytes() == (trained / "best.ckpt").read_bytes()
    assert main(["extract", "--checkpoint", str(trained / "best.ckpt"), "--w", "9", "--out", str(tmp_path)]) == 2


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--config", "desk", "--w", "1", "--d", "1", "--coords", "3",
                 "--out", str(tmp_path)]) == 0
    assert "ok" in capsys.readouterr().out
    assert read_rows(tmp_path / "gradcheck.csv")[1][3] == "1"


def test_nothing_is_written_outside_out(trained, tmp_path, monkeypatch, wav_pair):
    cwd = tmp_path / "cwd"
    cwd.mkdir()
    monkeypatch.chdir(cwd)
    main(["enumerate", "--config", "desk"])
    main(["select", "--config", "desk", "--max-macs", "inf"])
    main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--mixture", str(wav_pair[0]),
          "--target", str(wav_pair[1])])
    assert list(cwd.iterdir()) == []
