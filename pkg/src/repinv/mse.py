"""Point-estimate inversion: a decoder f(h) trained with squared error.

The decoder maps ``h`` to a coarse feature grid (a dense projection for
vector contexts, nearest resize plus a 1x1 convolution for spatial ones),
upsamples by nearest neighbour to the image size and refines with two 3x3
convolutions. Pixels are scaled to [0, 1] for the loss.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np

from repinv.autodiff import AdamState, Graph, NonFiniteError, adam_step, backward, conv_init, dense_init, evaluate
from repinv.checkpoint import CheckpointError, check_descriptor, read_container, write_container
from repinv.classifier import DivergenceError, TrainCurve

log = logging.getLogger(__name__)


@dataclass
class MseConfig:
    filters: int = 32
    coarse: int = 2
    lr: float = 1e-3
    max_steps: int = 2000
    batch_size: int = 32
    val_every: int = 250
    seed: int = 0
    zero_init: bool = False

    def __post_init__(self):
        if self.filters <= 0 or self.coarse <= 0 or self.batch_size <= 0:
            raise ValueError("filters, coarse factor and batch size must be positive")


@dataclass(frozen=True)
class MseCurvePoint:
    step: int
    train_mse: float
    val_mse: float


def build_graph(config, image_shape, rep_shape, rng):
    height, width, channels = image_shape
    gh, gw = max(1, height // config.coarse), max(1, width // config.coarse)
    f = config.filters
    g = Graph()
    h = g.input("h")
    target = g.input("target")
    if len(rep_shape) == 3:
        a = g.conv2d(g.resize_nearest(h, (gh, gw)), g.param("proj/w", conv_init(rng, 1, rep_shape[2], f)), "same")
        a = g.add(a, g.param("proj/b", np.zeros(f)))
    else:
        dim = int(np.prod(rep_shape))
        a = g.dense(g.flatten(h), g.param("proj/w", dense_init(rng, dim, gh * gw * f)), g.param("proj/b", np.zeros(gh * gw * f)))
        a = g.reshape(a, (gh, gw, f))
    a = g.resize_nearest(g.relu(a), (height, width))
    a = g.conv2d(a, g.param("conv1/w", conv_init(rng, 3, f, f)), "same")
    a = g.relu(g.add(a, g.param("conv1/b", np.zeros(f))))
    out = g.conv2d(a, g.param("conv2/w", conv_init(rng, 3, f, channels)), "same")
    out = g.add(out, g.param("conv2/b", np.zeros(channels)))
    g.output("image", out)
    g.output("loss", g.apply("mse", out, target))
    g.validate()
    return g


class MseInverterModel:
    """Deterministic decoder from a classifier tap back to pixel space."""

    def __init__(self, config, image_shape, rep_shape, layer="", levels=16, h_scale=1.0, params=None):
        self.config = config
        self.image_shape = tuple(int(s) for s in image_shape)
        self.rep_shape = tuple(int(s) for s in rep_shape)
        self.layer = layer
        self.levels = int(levels)
        self.h_scale = float(h_scale)
        self.graph = build_graph(config, self.image_shape, self.rep_shape, np.random.default_rng([config.seed, 5]))
        if config.zero_init:
            self.graph.params = {k: np.zeros_like(v) for k, v in self.graph.params.items()}
        if params is not None:
            for name, value in params.items():
                if name not in self.graph.params or self.graph.params[name].shape != np.shape(value):
                    raise CheckpointError(f"parameter {name!r} does not fit the decoder architecture")
            self.graph.params = {name: np.array(params[name], dtype=np.float64) for name in self.graph.params}

    @property
    def params(self):
        return self.graph.params

    def check_rep(self, h):
        h = np.asarray(h, dtype=np.float64)
        if h.shape[1:] != self.rep_shape:
            raise ValueError(f"representation of shape {h.shape[1:]} but the decoder expects {self.rep_shape}")
        return h

    def to_unit(self, images):
        return np.asarray(images, dtype=np.float64) / (self.levels - 1)

    def descriptor(self):
        desc = {"kind": "mse"}
        for f in dataclasses.fields(self.config):
            desc[f"config.{f.name}"] = getattr(self.config, f.name)
        desc.update(
            layer=self.layer,
            levels=self.levels,
            image_shape=",".join(map(str, self.image_shape)),
            rep_shape=",".join(map(str, self.rep_shape)),
            h_scale=repr(self.h_scale),
        )
        return desc


def reconstruct(model, h, batch_size=256):
    """Real-valued reconstructions in [0, 1] pixel scale (not clamped)."""
    h = model.check_rep(h)
    if len(h) == 0:
        return np.zeros((0,) + model.image_shape)
    return np.concatenate([
        evaluate(model.graph, {"h": h[i:i + batch_size] * model.h_scale}, outputs=["image"], keep_caches=False)["image"]
        for i in range(0, len(h), batch_size)
    ])


def export(images, levels):
    """Quantize [0, 1]-scale reconstructions to integer levels by rounding and clamping."""
    return np.clip(np.rint(np.asarray(images) * (levels - 1)), 0, levels - 1).astype(np.uint8)


def mse(model, images, h):
    return float(np.mean((reconstruct(model, h) - model.to_unit(images)) ** 2))


def fit_mse(model, x_train, h_train, x_val, h_val):
    """Train the decoder on precomputed pairs; returns ``(model, curve)``."""
    config = model.config
    h_train, h_val = model.check_rep(h_train), model.check_rep(h_val)
    if len(h_train) == 0:
        raise ValueError("decoder training needs a non-empty train split")
    rms = float(np.sqrt(np.mean(np.square(h_train))))
    model.h_scale = 1.0 / rms if rms > 0 else 1.0
    y_train = model.to_unit(x_train)
    rng = np.random.default_rng([config.seed, 6])
    state = AdamState(lr=config.lr)
    curve = TrainCurve()
    best, best_params = math.inf, None
    losses = []
    order, cursor = rng.permutation(len(h_train)), 0
    for step in range(config.max_steps + 1):
        if step % config.val_every == 0 or step == config.max_steps:
            train_mse = float(np.mean(losses)) if losses else math.nan
            val = mse(model, x_val, h_val) if len(h_val) else train_mse
            curve.append(MseCurvePoint(step, train_mse, val))
            losses = []
            log.info("mse decoder %s step %d val mse %.5f", model.layer, step, val)
            if not val >= best:
                best, best_params = val, {k: v.copy() for k, v in model.params.items()}
        if step == config.max_steps:
            break
        bs = min(config.batch_size, len(h_train))
        if cursor + bs > len(order):
            order, cursor = rng.permutation(len(h_train)), 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        try:
            ev = evaluate(model.graph, {"h": h_train[idx] * model.h_scale, "target": y_train[idx]}, mode="train")
            grads = backward(ev, "loss")
        except NonFiniteError as exc:
            raise DivergenceError(f"non-finite value at decoder step {step}: {exc}") from exc
        losses.append(float(ev["loss"]))
        params, state = adam_step(model.params, grads, state)
        model.graph.params = params
    if best_params is not None:
        model.graph.params = best_params
    return model, curve


def train_mse(classifier, layer, data, config):
    """Fit a decoder for ``layer`` of a frozen classifier; returns ``(model, curve)``."""
    train, val = data.subset("train"), data.subset("val")
    h_train = classifier.extract(train.images, layer)
    h_val = classifier.extract(val.images, layer)
    model = MseInverterModel(config, data.shape, h_train.shape[1:], layer, data.levels)
    return fit_mse(model, train.images, h_train, val.images, h_val)


def save_checkpoint(model, path):
    write_container(path, model.descriptor(), model.params)


def load_checkpoint(path, expect=None):
    desc, params = read_container(path)
    if desc.get("kind") != "mse":
        raise CheckpointError(f"{path}: not a decoder checkpoint (kind={desc.get('kind')!r})")
    if expect:
        check_descriptor(desc, expect, str(path))
    kwargs = {}
    for f in dataclasses.fields(MseConfig):
        raw = desc[f"config.{f.name}"]
        default = getattr(MseConfig, f.name)
        kwargs[f.name] = raw == "True" if isinstance(default, bool) else type(default)(raw)
    config = MseConfig(**kwargs)
    shape = tuple(int(v) for v in desc["image_shape"].split(","))
    rep = tuple(int(v) for v in desc["rep_shape"].split(",") if v)
    model = MseInverterModel(dataclasses.replace(config, zero_init=False), shape, rep, desc["layer"], int(desc["levels"]), float(desc["h_scale"]), params)
    model.config = config
    return model
