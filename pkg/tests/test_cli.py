import os

import numpy as np
import pytest

from repinv.cli import _draw, build_config, main, parse_config_text, resolve_key, stage_seed, UsageError
from repinv.harness import CurveRow, LayerNce, read_csv, read_pnm

TINY = """
# tiny classifier for fast runs
classifier.c1 = 4
classifier.c2 = 4
classifier.fc3 = 8
classifier.max_steps = 10
classifier.val_every = 5
classifier.checkpoints = 0,10
inverter.layers = 1
inverter.filters = 4
inverter.max_steps = 4
inverter.val_every = 2
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "c.cfg"
    cfg.write_text(TINY)
    out = root / "clf"
    assert main(["train-classifier", "--config", str(cfg), "--out", str(out), "--seed", "7"]) == 0
    return root, cfg, out


class TestConfigParsing:
    def test_comments_and_blank_lines(self):
        assert parse_config_text("a.b = 1  # note\n\n# only comment\nc.d=x") == {"a.b": "1", "c.d": "x"}

    def test_missing_equals(self):
        with pytest.raises(UsageError, match=":2:"):
            parse_config_text("a.b = 1\nnonsense")

    def test_unknown_key_named(self):
        with pytest.raises(UsageError, match="classfier.lr"):
            build_config({"classfier.lr": "0.1"})

    def test_typed_values(self):
        cfg = build_config({"classifier.checkpoints": "0,5", "classifier.dropout": "false", "inverter.lr": "0.01"})
        assert cfg["classifier.checkpoints"] == (0, 5)
        assert cfg["classifier.dropout"] is False and cfg["inverter.lr"] == 0.01

    def test_bad_value(self):
        with pytest.raises(UsageError, match="classifier.c1"):
            build_config({"classifier.c1": "many"})

    def test_bare_names_resolve_in_command_namespace(self):
        assert resolve_key("k", ("mi", "eval", "data")) == "mi.k"
        assert resolve_key("pool", ("mi", "eval", "data")) == "eval.pool"
        with pytest.raises(UsageError):
            resolve_key("lr", ("mi", "eval", "data"))

    def test_stage_seeds_differ_and_repeat(self):
        assert stage_seed(1, "a") == stage_seed(1, "a") != stage_seed(1, "b")
        assert stage_seed(2**63, "a") < 2**31


def test_draw_is_seeded_and_not_a_prefix():
    images = np.arange(100)
    a = _draw(images, 10, 3, "show")
    assert np.array_equal(a, _draw(images, 10, 3, "show")) and not np.array_equal(a, images[:10])
    assert np.all(np.diff(a) > 0) and len(_draw(images, 500, 3, "show")) == 100


class TestExitCodes:
    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("classfier.lr = 0.1\n")
        assert main(["train-classifier", "--config", str(cfg), "--out", str(tmp_path)]) == 1
        assert "classfier.lr" in capsys.readouterr().err

    def test_k_not_below_n(self, tmp_path):
        assert main(["estimate-mi", "--kind", "kraskov", "--k", "5000", "--n", "100", "--out", str(tmp_path)]) == 1

    def test_bad_subcommand_and_flag(self, tmp_path):
        assert main(["launch"]) == 1
        assert main(["grid", "--out", str(tmp_path), "--frobnicate", "3"]) == 1
        assert main(["grid", "--out", str(tmp_path), "--rows"]) == 1

    def test_missing_config_file(self, tmp_path):
        assert main(["grid", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path)]) == 2

    def test_missing_checkpoint(self, tmp_path):
        assert main(["train-inverter", "--classifier", str(tmp_path / "no.ckpt"), "--out", str(tmp_path)]) == 2

    def test_corrupt_checkpoint(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint")
        assert main(["sample", "--classifier", str(bad), "--inverter", str(bad), "--out", str(tmp_path)]) == 2

    def test_divergence(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(TINY + "classifier.lr = 1e200\nclassifier.max_steps = 30\n")
        assert main(["train-classifier", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


class TestCommands:
    def test_train_classifier_outputs(self, trained):
        _, _, out = trained
        assert sorted(os.listdir(out / "checkpoints")) == ["step_000000.ckpt", "step_000010.ckpt"]
        assert (out / "classifier.ckpt").exists()
        assert [r.step for r in read_csv(out / "train_curve.csv", CurveRow)] == [0, 5, 10]
        assert "seed = 7" in (out / "resolved.cfg").read_text()
        assert "classifier.c1 = 4" in (out / "resolved.cfg").read_text()

    def test_byte_identical_reruns(self, trained):
        root, cfg, out = trained
        again = root / "again"
        assert main(["train-classifier", "--config", str(cfg), "--out", str(again), "--seed", "7"]) == 0
        assert (again / "train_curve.csv").read_bytes() == (out / "train_curve.csv").read_bytes()
        assert (again / "classifier.ckpt").read_bytes() == (out / "classifier.ckpt").read_bytes()

    def test_inverter_sample_topk_mi(self, trained):
        root, cfg, out = trained
        clf = str(out / "classifier.ckpt")
        inv_out = root / "inv"
        for layer in ("CONV1", "CONV2", "FC3"):
            assert main(["train-inverter", "--config", str(cfg), "--seed", "7", "--classifier", clf, "--layer", layer, "--out", str(inv_out)]) == 0
        inv = {layer: str(inv_out / f"inverter_{layer}.ckpt") for layer in ("CONV1", "CONV2", "FC3")}
        common = ["--config", str(cfg), "--seed", "7", "--classifier", clf]
        assert main(["sample", *common, "--inverter", inv["FC3"], "--count", "2", "--out", str(root / "s")]) == 0
        assert read_pnm(root / "s" / "samples_FC3.pgm").shape == (29, 29, 1)
        assert main(["topk", *common, "--inverter", inv["FC3"], "--pool", "4", "--k", "2", "--out", str(root / "t")]) == 0
        assert read_pnm(root / "t" / "topk_FC3.pgm").shape == (14, 44, 1)
        entries = ",".join(f"{k}={v}" for k, v in inv.items())
        assert main(["estimate-mi", *common, "--inverters", entries, "--out", str(root / "m")]) == 0
        rows = read_csv(root / "m" / "mi_by_layer.csv", LayerNce)
        assert [r.layer for r in rows] == ["CONV1", "CONV2", "FC3"] and rows[0].nce_rel_conv1 == 1.0
        for kind in ("kraskov", "binning", "kde"):
            assert main(["estimate-mi", *common, "--kind", kind, "--n", "50", "--out", str(root / kind)]) == 0

    def test_train_mse_and_grid(self, trained):
        root, cfg, out = trained
        args = ["--config", str(cfg), "--seed", "7", "--classifier", str(out / "classifier.ckpt"), "--mse.max_steps", "3", "--count", "3"]
        assert main(["train-mse", *args, "--out", str(root / "mse")]) == 0
        assert (root / "mse" / "mse_FC3.ckpt").exists()
        assert main(["grid", "--rows", "2", "--cols", "3", "--out", str(root / "g")]) == 0
        assert read_pnm(root / "g" / "grid.pgm").shape == (29, 44, 1)
