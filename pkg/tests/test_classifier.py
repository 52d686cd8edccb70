import numpy as np
import pytest

from repinv.checkpoint import CheckpointError
from repinv.classifier import (
    ClassifierConfig,
    ClassifierModel,
    TrainCurve,
    CurvePoint,
    load_checkpoint,
    save_checkpoint,
    train_classifier,
)
from repinv.data import ImageDataset, split_deterministic

SMALL = dict(c1=4, c2=4, fc3=8, fc_widths=(16, 16), batch_size=16, val_every=5, max_steps=20)


def _random_data(n=60, size=14, seed=0):
    rng = np.random.default_rng(seed)
    data = ImageDataset(rng.integers(0, 16, (n, size, size, 1), dtype=np.uint8), rng.integers(0, 10, n), levels=16)
    return split_deterministic(data, (0.6, 0.2, 0.2), seed)


class TestTaps:
    def test_full_size_shapes(self):
        m = ClassifierModel(ClassifierConfig(padding="valid", c2=16), (28, 28, 1), levels=256)
        assert m.tap_shape("CONV1") == (12, 12, 32)
        assert m.tap_shape("CONV2") == (4, 4, 16)
        assert m.tap_shape("FC3") == (256,)
        assert m.tap_shape("LOGITS") == (10,)

    def test_desk_shapes(self):
        m = ClassifierModel(ClassifierConfig(**SMALL), (14, 14, 1), levels=16)
        assert m.tap_shape("CONV1") == (7, 7, 4)
        assert m.tap_shape("CONV2") == (3, 3, 4)

    def test_valid_padding_too_small(self):
        with pytest.raises(ValueError, match="too small"):
            ClassifierModel(ClassifierConfig(padding="valid", **SMALL), (14, 14, 1), levels=16)

    @pytest.mark.parametrize("variant,shape", [("global_pool", (8,)), ("fully_connected", (8,))])
    def test_variant_taps(self, variant, shape):
        m = ClassifierModel(ClassifierConfig(variant=variant, **SMALL), (14, 14, 1), levels=16)
        assert m.tap_shape("FC3") == shape
        if variant == "fully_connected":
            assert m.tap_shape("CONV1") == (16,)

    def test_zero_image_gives_relu_bias(self):
        m = ClassifierModel(ClassifierConfig(**SMALL), (14, 14, 1), levels=16)
        bias = np.array([0.3, -0.2, 0.0, 1.1])
        m.params["conv1/b"] = bias
        out = m.extract(np.zeros((2, 14, 14, 1), dtype=np.uint8), "CONV1")
        np.testing.assert_array_equal(out, np.broadcast_to(np.maximum(bias, 0.0), out.shape))

    def test_unknown_tap(self):
        m = ClassifierModel(ClassifierConfig(**SMALL), (14, 14, 1), levels=16)
        with pytest.raises(KeyError):
            m.extract(np.zeros((1, 14, 14, 1), dtype=np.uint8), "FC4")

    def test_extract_is_deterministic(self):
        m = ClassifierModel(ClassifierConfig(**SMALL), (14, 14, 1), levels=16)
        x = np.random.default_rng(0).integers(0, 16, (5, 14, 14, 1))
        np.testing.assert_array_equal(m.extract(x, "FC3"), m.extract(x, "FC3"))


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(c1=0), dict(batch_size=0), dict(checkpoints=(10, 100)), dict(checkpoints=(0, 100, 10)), dict(variant="resnet")])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            ClassifierConfig(**bad)

    def test_curve_steps_increase(self):
        curve = TrainCurve()
        curve.append(CurvePoint(0, 1.0, 0.1))
        with pytest.raises(ValueError):
            curve.append(CurvePoint(0, 1.0, 0.1))


class TestCheckpoints:
    def test_bitwise_round_trip(self, tmp_path):
        m = ClassifierModel(ClassifierConfig(**SMALL, seed=3), (14, 14, 1), levels=16)
        save_checkpoint(m, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert back.config == m.config
        for name, value in m.params.items():
            assert back.params[name].tobytes() == value.tobytes()

    def test_architecture_mismatch(self, tmp_path):
        m = ClassifierModel(ClassifierConfig(**SMALL), (14, 14, 1), levels=16)
        save_checkpoint(m, tmp_path / "m.ckpt")
        other = ClassifierModel(ClassifierConfig(**dict(SMALL, c1=8)), (14, 14, 1), levels=16)
        with pytest.raises(CheckpointError, match="descriptor mismatch"):
            load_checkpoint(tmp_path / "m.ckpt", expect=other)

    def test_corrupt_file(self, tmp_path):
        m = ClassifierModel(ClassifierConfig(**SMALL), (14, 14, 1), levels=16)
        save_checkpoint(m, tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "cut.ckpt").write_bytes(raw[:-9])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(tmp_path / "cut.ckpt")
        (tmp_path / "ver.ckpt").write_bytes(raw[:8] + (7).to_bytes(4, "little") + raw[12:])
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(tmp_path / "ver.ckpt")

    def test_step_zero_reproduces_initialisation(self, tmp_path):
        data = _random_data()
        config = ClassifierConfig(**dict(SMALL, max_steps=10), seed=5, checkpoints=(0, 10))
        _, _, snaps = train_classifier(config, data, checkpoint_dir=tmp_path)
        fresh = ClassifierModel(config, data.shape, data.levels)
        loaded = load_checkpoint(tmp_path / "step_000000.ckpt")
        for name, value in fresh.params.items():
            assert snaps[0].params[name].tobytes() == value.tobytes()
            assert loaded.params[name].tobytes() == value.tobytes()
        assert (tmp_path / "step_000010.ckpt").exists()


class TestTraining:
    def test_seeded_determinism(self):
        data = _random_data()
        config = ClassifierConfig(**SMALL, seed=1)
        a = train_classifier(config, data)
        b = train_classifier(config, data)
        np.testing.assert_equal([tuple(vars(p).values()) for p in a[1].points], [tuple(vars(p).values()) for p in b[1].points])
        for name in a[0].params:
            assert a[0].params[name].tobytes() == b[0].params[name].tobytes()

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_early_stopping_keeps_best(self, seed):
        data = _random_data(seed=seed)
        config = ClassifierConfig(**dict(SMALL, max_steps=40, patience=2), seed=seed)
        model, curve, _ = train_classifier(config, data)
        best = model.accuracy(data.subset("val"))
        assert best >= curve.points[-1].val_accuracy
        assert best == max(p.val_accuracy for p in curve.points)

    def test_overfit_subset(self):
        data = _random_data(n=100)
        config = ClassifierConfig(**dict(SMALL, max_steps=5), train_subset=10, dropout=False)
        _, curve, _ = train_classifier(config, data)
        assert [p.step for p in curve.points] == [0, 5]

    def test_overfit_subset_is_a_seeded_draw(self, desk):
        # the desk train split is grouped by class, so a prefix would be a single digit
        config = ClassifierConfig(c1=4, c2=4, fc3=8, max_steps=300, val_every=300, train_subset=100, dropout=False, patience=0, lr=3e-3)
        model, _, _ = train_classifier(config, desk)
        assert model.accuracy(desk.subset("val")) > 0.4

    def test_divergence_names_step(self):
        data = _random_data()
        config = ClassifierConfig(**dict(SMALL, lr=1e200, max_steps=30))
        with pytest.raises(ArithmeticError, match="step"):
            train_classifier(config, data)

    def test_untrained_accuracy_near_chance(self, desk):
        test = desk.subset("test")
        accs = [ClassifierModel(ClassifierConfig(seed=s), desk.shape, desk.levels).accuracy(test) for s in range(10)]
        assert all(0.06 <= a <= 0.16 for a in accs), accs


def _shift(images, dy, dx):
    return np.roll(np.roll(images, dy, axis=1), dx, axis=2)


def test_global_pool_translation_property(desk):
    """Shifts by the pooling stride leave global-pool FC3 nearly fixed; the baseline moves."""
    # pad desk digits onto a 22x22 frame so shifted digits stay inside
    x = desk.subset("test").images[:20]
    frame = np.zeros((len(x), 22, 22, 1), dtype=np.uint8)
    frame[:, 4:18, 4:18] = x
    moved = _shift(frame, 4, -4)
    dist = {}
    for variant in ("baseline", "global_pool"):
        m = ClassifierModel(ClassifierConfig(variant=variant, seed=2), (22, 22, 1), desk.levels)
        dist[variant] = np.median(np.abs(m.extract(frame, "FC3") - m.extract(moved, "FC3")).sum(axis=1))
    assert dist["global_pool"] * 5 <= dist["baseline"], dist
