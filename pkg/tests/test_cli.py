import csv
import json

import pytest

from sicl.cli import main, resolve_config
from sicl.errors import SiclError

TINY = ["--set", "world.num_subjects=4", "--set", "world.num_activities=2", "--set", "world.windows_per_pair=3",
        "--set", "train_subjects=[0,1]", "--set", "test_subjects=[2,3]", "--set", "pretrain_epochs=1",
        "--set", "linear_epochs=2", "--set", "batch_size=8"]


def test_overrides_win_over_file(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"tau": 0.3, "world": {"num_subjects": 5}, "seed": 4,
                                    "train_subjects": [0, 1, 2], "test_subjects": [3, 4]}))
    cfg = resolve_config(cfg_file, ["tau=0.7", "world.noise_sigma=0.2"], seed=9)
    assert cfg.tau == 0.7 and cfg.world.num_subjects == 5 and cfg.world.noise_sigma == 0.2 and cfg.seed == 9


def test_unknown_override_rejected():
    with pytest.raises(SiclError):
        resolve_config(None, ["world.nope=1"])


def test_invalid_config_rejected(tmp_path):
    assert main(["gen", "--out", str(tmp_path), "--set", "loss=bogus"]) != 0


def test_gen_then_verify(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path / "g"), "--set", "world.subject_nuisance_strength=0", *TINY]) == 0
    assert (tmp_path / "g" / "dataset.sicl").exists()
    assert (tmp_path / "g" / "dataset.sicl.manifest.json").exists()
    assert main(["verify", "--quick", "--out", str(tmp_path / "v")]) == 0
    assert "all checks passed" in capsys.readouterr().out


def test_pipeline_and_echo_reproduces(tmp_path):
    data = tmp_path / "g" / "dataset.sicl"
    assert main(["gen", "--out", str(tmp_path / "g"), *TINY]) == 0
    assert main(["pretrain", "--out", str(tmp_path / "p"), "--data", str(data), *TINY]) == 0
    ckpt = tmp_path / "p" / "checkpoint.ckpt"
    before = ckpt.read_bytes()
    assert main(["linear-eval", "--out", str(tmp_path / "e"), "--data", str(data), "--checkpoint", str(ckpt),
                 *TINY]) == 0
    assert ckpt.read_bytes() == before
    report = json.loads((tmp_path / "e" / "report.json").read_text())
    assert 0 <= report["mean_class_accuracy"] <= 1
    assert main(["analyze", "--out", str(tmp_path / "a"), "--data", str(data), "--checkpoint", str(ckpt),
                 *TINY]) == 0
    assert (tmp_path / "a" / "histogram.csv").exists()
    assert main(["finetune", "--out", str(tmp_path / "f"), "--data", str(data), *TINY]) == 0

    echo = tmp_path / "p" / "config.json"
    assert main(["pretrain", "--out", str(tmp_path / "p2"), "--data", str(data), "--config", str(echo)]) == 0
    assert (tmp_path / "p2" / "checkpoint.ckpt").read_bytes() == before
    assert (tmp_path / "p2" / "loss_curve.csv").read_bytes() == (tmp_path / "p" / "loss_curve.csv").read_bytes()


def test_matrix_csv_shape(tmp_path):
    assert main(["matrix", "--out", str(tmp_path), "--losses", "nce,sicl", "--seeds", "0,1,2", *TINY]) == 0
    rows = list(csv.reader(open(tmp_path / "matrix.csv")))
    assert rows[0] == ["loss", "seed", "mean_class_accuracy", "gap"]
    assert len(rows) == 7
    assert [r[0] for r in rows[1:]] == ["nce"] * 3 + ["sicl"] * 3


def test_missing_checkpoint_fails_cleanly(tmp_path, capsys):
    code = main(["linear-eval", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "gone.ckpt"), *TINY])
    assert code != 0
    assert "checkpoint not found" in capsys.readouterr().err


def test_every_subcommand_writes_config_echo(tmp_path):
    main(["gen", "--out", str(tmp_path), *TINY])
    echo = json.loads((tmp_path / "config.json").read_text())
    assert echo["world"]["num_subjects"] == 4
