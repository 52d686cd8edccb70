"""Supervised image classifiers with named representation taps."""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from repinv.autodiff import AdamState, Graph, NonFiniteError, adam_step, backward, conv_init, dense_init, evaluate
from repinv.checkpoint import CheckpointError, check_descriptor, read_container, write_container

log = logging.getLogger(__name__)

TAPS = ("CONV1", "CONV2", "FC3", "LOGITS")
VARIANTS = ("baseline", "global_pool", "fully_connected")


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss."""


@dataclass
class ClassifierConfig:
    variant: str = "baseline"
    c1: int = 32
    c2: int = 32
    kernel: int = 5
    padding: str = "same"
    fc3: int = 256
    fc_widths: tuple[int, int] = (512, 512)
    dropout: bool = True
    dropout_conv: float = 0.2
    dropout_fc: float = 0.5
    lr: float = 3e-4
    max_steps: int = 10000
    patience: int = 10
    val_every: int = 200
    batch_size: int = 64
    seed: int = 0
    checkpoints: tuple[int, ...] = (0, 10, 100, 1000, 10000)
    train_subset: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown classifier variant {self.variant!r}")
        sizes = (self.c1, self.c2, self.fc3, self.batch_size, *self.fc_widths)
        if min(sizes) <= 0:
            raise ValueError("filter counts, units and batch size must be positive")
        cps = list(self.checkpoints)
        if cps and (cps[0] != 0 or cps != sorted(set(cps))):
            raise ValueError(f"checkpoint schedule must be strictly ascending from 0, got {cps}")


@dataclass(frozen=True)
class CurvePoint:
    step: int
    train_loss: float
    val_accuracy: float


@dataclass
class TrainCurve:
    points: list[CurvePoint] = field(default_factory=list)

    def append(self, point):
        if self.points and point.step <= self.points[-1].step:
            raise ValueError("curve steps must increase")
        self.points.append(point)


def build_graph(config, input_shape, num_classes, rng):
    """Classifier graph with outputs ``CONV1``, ``CONV2``, ``FC3``, ``LOGITS`` and ``loss``.

    Taps sit after ReLU and pooling of each block, before that block's dropout.
    """
    h, w, c = input_shape
    g = Graph()
    x = g.input("x")
    labels = g.input("labels")
    p_conv = config.dropout_conv if config.dropout else 0.0
    p_fc = config.dropout_fc if config.dropout else 0.0

    if config.variant == "fully_connected":
        w1, w2 = config.fc_widths
        flat = g.flatten(x)
        a = g.relu(g.dense(flat, g.param("fc1/w", dense_init(rng, h * w * c, w1)), g.param("fc1/b", np.zeros(w1))))
        g.output("CONV1", a)
        a = g.dropout(a, p_conv)
        a = g.relu(g.dense(a, g.param("fc2/w", dense_init(rng, w1, w2)), g.param("fc2/b", np.zeros(w2))))
        g.output("CONV2", a)
        feat, feat_dim = g.dropout(a, p_conv), w2
    else:
        k = config.kernel
        a = g.conv2d(x, g.param("conv1/w", conv_init(rng, k, c, config.c1)), config.padding)
        a = g.maxpool2(g.relu(g.add(a, g.param("conv1/b", np.zeros(config.c1)))))
        g.output("CONV1", a)
        a = g.dropout(a, p_conv)
        a = g.conv2d(a, g.param("conv2/w", conv_init(rng, k, config.c1, config.c2)), config.padding)
        a = g.maxpool2(g.relu(g.add(a, g.param("conv2/b", np.zeros(config.c2)))))
        g.output("CONV2", a)
        if config.variant == "global_pool":
            feat, feat_dim = g.global_maxpool(a), config.c2
        else:
            hh, ww = conv_tap_shape(config, input_shape)
            feat, feat_dim = g.flatten(a), hh * ww * config.c2
        feat = g.dropout(feat, p_conv)

    fc = g.relu(g.dense(feat, g.param("fc3/w", dense_init(rng, feat_dim, config.fc3)), g.param("fc3/b", np.zeros(config.fc3))))
    g.output("FC3", fc)
    logits = g.dense(g.dropout(fc, p_fc), g.param("out/w", dense_init(rng, config.fc3, num_classes)), g.param("out/b", np.zeros(num_classes)))
    g.output("LOGITS", logits)
    g.output("loss", g.apply("softmax_xent", logits, labels))
    g.validate()
    return g


def conv_tap_shape(config, input_shape):
    """Spatial size of the CONV2 tap for the convolutional variants."""
    size = list(input_shape[:2])
    shrink = 0 if config.padding == "same" else config.kernel - 1
    for _ in range(2):
        size = [(s - shrink) // 2 for s in size]
    if min(size) < 1:
        raise ValueError(f"input {input_shape[:2]} too small for kernel {config.kernel} with {config.padding!r} padding")
    return tuple(size)


class ClassifierModel:
    """A classifier's parameters, architecture and representation taps."""

    def __init__(self, config, input_shape, levels, num_classes=10, params=None):
        self.config = config
        self.input_shape = tuple(int(s) for s in input_shape)
        self.levels = int(levels)
        self.num_classes = int(num_classes)
        self.graph = build_graph(config, self.input_shape, num_classes, np.random.default_rng([config.seed, 0]))
        if params is not None:
            for name, value in params.items():
                if name not in self.graph.params or self.graph.params[name].shape != value.shape:
                    raise CheckpointError(f"parameter {name!r} does not fit the architecture")
            self.graph.params = {name: np.array(params[name]) for name in self.graph.params}

    @property
    def params(self):
        return self.graph.params

    def scale_inputs(self, images):
        images = np.asarray(images)
        if images.shape[1:] != self.input_shape:
            raise ValueError(f"images of shape {images.shape[1:]} but the classifier expects {self.input_shape}")
        if images.size and int(images.max()) >= self.levels:
            raise ValueError(f"pixel value outside [0, {self.levels - 1}]")
        return images.astype(np.float64) / (self.levels - 1)

    def extract(self, images, layer, batch_size=500):
        """Representation of ``images`` at tap ``layer`` (infer mode)."""
        if layer not in TAPS:
            raise KeyError(f"unknown tap {layer!r}; expected one of {TAPS}")
        x = self.scale_inputs(images)
        parts = [
            evaluate(self.graph, {"x": x[i:i + batch_size]}, mode="infer", outputs=[layer], keep_caches=False)[layer]
            for i in range(0, len(x), batch_size)
        ]
        if not parts:
            return np.zeros((0,) + self.tap_shape(layer))
        return np.concatenate(parts)

    def tap_shape(self, layer):
        return self.extract(np.zeros((1,) + self.input_shape, dtype=np.uint8), layer).shape[1:]

    def predict(self, images):
        return self.extract(images, "LOGITS").argmax(axis=1)

    def accuracy(self, data):
        if len(data) == 0:
            return float("nan")
        return float(np.mean(self.predict(data.images) == data.labels))

    def descriptor(self):
        desc = {"kind": "classifier"}
        for f in dataclasses.fields(self.config):
            value = getattr(self.config, f.name)
            desc[f"config.{f.name}"] = ",".join(map(str, value)) if isinstance(value, tuple) else value
        desc["input_shape"] = ",".join(map(str, self.input_shape))
        desc["levels"] = self.levels
        desc["num_classes"] = self.num_classes
        return desc

    def copy(self):
        return ClassifierModel(self.config, self.input_shape, self.levels, self.num_classes, self.params)


def architecture_keys(model):
    """Descriptor entries that must match for a checkpoint to fit an expected model."""
    desc = model.descriptor()
    keys = ("variant", "c1", "c2", "kernel", "padding", "fc3", "fc_widths")
    out = {f"config.{k}": desc[f"config.{k}"] for k in keys}
    out.update(kind="classifier", input_shape=desc["input_shape"], levels=desc["levels"], num_classes=desc["num_classes"])
    return out


def save_checkpoint(model, path):
    write_container(path, model.descriptor(), model.params)


def _parse_config(desc):
    kwargs = {}
    for f in dataclasses.fields(ClassifierConfig):
        raw = desc.get(f"config.{f.name}")
        if raw is None:
            raise CheckpointError(f"descriptor lacks config.{f.name}")
        default = getattr(ClassifierConfig, f.name, None)
        if f.name in ("fc_widths", "checkpoints"):
            kwargs[f.name] = tuple(int(v) for v in raw.split(",") if v)
        elif isinstance(default, bool):
            kwargs[f.name] = raw == "True"
        elif isinstance(default, int):
            kwargs[f.name] = int(raw)
        elif isinstance(default, float):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw
    return ClassifierConfig(**kwargs)


def load_checkpoint(path, expect=None):
    """Load a classifier; ``expect`` (a model or descriptor dict) pins the architecture."""
    desc, params = read_container(path)
    if desc.get("kind") != "classifier":
        raise CheckpointError(f"{path}: not a classifier checkpoint (kind={desc.get('kind')!r})")
    if expect is not None:
        check_descriptor(desc, architecture_keys(expect) if isinstance(expect, ClassifierModel) else expect, str(path))
    config = _parse_config(desc)
    shape = tuple(int(v) for v in desc["input_shape"].split(","))
    return ClassifierModel(config, shape, int(desc["levels"]), int(desc["num_classes"]), params)


def step_seed(seed, step):
    return seed * 10_000_019 + step


def train_classifier(config, data, checkpoint_dir=None):
    """Train with Adam and early stopping on validation accuracy.

    Args:
        config: a :class:`ClassifierConfig`.
        data: an :class:`~repinv.data.ImageDataset` with train and val splits.
        checkpoint_dir: if given, ``step_XXXXXX.ckpt`` files are written there
            at every scheduled step.

    Returns:
        ``(best_model, curve, checkpoints)`` where ``checkpoints`` maps each
        scheduled step reached to a model snapshot.
    """
    train, val = data.subset("train"), data.subset("val")
    if len(train) == 0 or len(val) == 0:
        raise ValueError("dataset needs non-empty train and val splits")
    if config.train_subset:
        # seeded draw: the train split keeps the source order, which may be grouped by class
        keep = np.random.default_rng([config.seed, 4]).choice(len(train), min(config.train_subset, len(train)), replace=False)
        train = train.take(np.sort(keep))
    model = ClassifierModel(config, data.shape, data.levels, data.num_classes)
    x_train = model.scale_inputs(train.images)
    y_train = train.labels
    rng = np.random.default_rng([config.seed, 1])
    state = AdamState(lr=config.lr)
    curve = TrainCurve()
    checkpoints = {}
    schedule = set(config.checkpoints)
    best_acc, best_params, stale = -1.0, None, 0
    losses = []
    order, cursor = rng.permutation(len(x_train)), 0

    def snapshot(step):
        snap = model.copy()
        checkpoints[step] = snap
        if checkpoint_dir is not None:
            save_checkpoint(snap, os.path.join(checkpoint_dir, f"step_{step:06d}.ckpt"))

    for step in range(config.max_steps + 1):
        if step in schedule:
            snapshot(step)
        if step % config.val_every == 0 or step == config.max_steps:
            acc = model.accuracy(val)
            mean_loss = float(np.mean(losses)) if losses else float("nan")
            curve.append(CurvePoint(step, mean_loss, acc))
            losses = []
            log.info("classifier step %d loss %.4f val acc %.4f", step, mean_loss, acc)
            if acc > best_acc:
                best_acc, best_params, stale = acc, {k: v.copy() for k, v in model.params.items()}, 0
            else:
                stale += 1
                if config.patience > 0 and stale >= config.patience:
                    break
        if step == config.max_steps:
            break
        bs = min(config.batch_size, len(x_train))
        if cursor + bs > len(order):
            order, cursor = rng.permutation(len(x_train)), 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        try:
            ev = evaluate(model.graph, {"x": x_train[idx], "labels": y_train[idx]}, mode="train", seed=step_seed(config.seed, step))
            grads = backward(ev, "loss")
        except NonFiniteError as exc:
            raise DivergenceError(f"non-finite value at training step {step}: {exc}") from exc
        loss = float(ev["loss"])
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at training step {step}")
        losses.append(loss)
        params, state = adam_step(model.params, grads, state)
        model.graph.params = params
    best = ClassifierModel(config, data.shape, data.levels, data.num_classes, best_params)
    return best, curve, checkpoints
