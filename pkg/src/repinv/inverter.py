"""Conditional autoregressive density models p(x | h) over quantized images.

The network is a small masked-convolution stack: one 5x5 mask-A layer, then
residual 3x3 mask-B blocks, then a 1x1 mask-B head with ``C * L`` logits per
pixel. The representation ``h`` enters every layer as an additive bias,
either a dense projection broadcast over space (vector contexts) or a
nearest-neighbour resize followed by a 1x1 convolution (spatial contexts).
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np

from repinv.autodiff import AdamState, Graph, NonFiniteError, adam_step, backward, conv_init, dense_init, evaluate, log_softmax
from repinv.checkpoint import CheckpointError, check_descriptor, read_container, write_container
from repinv.classifier import DivergenceError, TrainCurve

log = logging.getLogger(__name__)

CONDITIONING = ("auto", "vector_bias", "spatial_bias")
MAX_ENUMERATION = 2**20


@dataclass
class InversionConfig:
    layers: int = 4
    filters: int = 32
    kernel: int = 5
    levels: int = 16
    conditioning: str = "auto"
    dropout: float = 0.5
    context_dropout: float = 0.0
    positional_bias: bool = True
    lr: float = 1e-3
    lr_decay: float = 0.9999
    max_steps: int = 2000
    batch_size: int = 32
    val_every: int = 250
    patience: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.conditioning not in CONDITIONING:
            raise ValueError(f"unknown conditioning {self.conditioning!r}; expected one of {CONDITIONING}")
        if self.layers < 0 or self.filters <= 0 or self.batch_size <= 0:
            raise ValueError("layers must be >= 0, filters and batch size > 0")
        if self.kernel % 2 == 0:
            raise ValueError(f"first-layer kernel must be odd, got {self.kernel}")
        if not 2 <= self.levels <= 256:
            raise ValueError(f"levels must be in [2, 256], got {self.levels}")
        for name in ("dropout", "context_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")


@dataclass(frozen=True)
class InverterCurvePoint:
    step: int
    train_nll: float
    val_nll: float


def _resolve_conditioning(mode, rep_shape):
    if mode == "auto":
        return "spatial_bias" if len(rep_shape) == 3 else "vector_bias"
    if mode == "spatial_bias" and len(rep_shape) != 3:
        raise ValueError(f"spatial conditioning needs an HWC representation, got shape {rep_shape}")
    return mode


def build_graph(config, image_shape, rep_shape, conditioning, rng):
    """Graph with outputs ``logits`` and ``nll`` (per-example nats) and ``loss`` (mean)."""
    height, width, channels = image_shape
    f, levels = config.filters, config.levels
    if f % channels:
        raise ValueError(f"filters ({f}) must be divisible by the channel count ({channels})")
    g = Graph()
    x = g.input("x")
    t = g.input("t")
    h = g.input("h")
    if conditioning == "spatial_bias":
        ctx = g.resize_nearest(h, (height, width))
        ctx_dim = rep_shape[2]
    else:
        ctx = g.flatten(h)
        ctx_dim = int(np.prod(rep_shape))

    def condition(a, i):
        if conditioning == "spatial_bias":
            bias = g.conv2d(ctx, g.param(f"ctx{i}/w", conv_init(rng, 1, ctx_dim, f)), "same")
            bias = g.dropout(bias, config.context_dropout) if config.context_dropout else bias
            a = g.add_cropped(a, bias)
        else:
            bias = g.dense(ctx, g.param(f"ctx{i}/w", dense_init(rng, ctx_dim, f)), g.param(f"ctx{i}/b", np.zeros(f)))
            bias = g.dropout(bias, config.context_dropout) if config.context_dropout else bias
            a = g.add(a, g.reshape(bias, (1, 1, f)))
        if config.positional_bias:
            a = g.add_cropped(a, g.param(f"pos{i}", np.zeros((height, width, f))))
        return a

    a = g.masked_conv2d(x, g.param("in/w", conv_init(rng, config.kernel, channels, f)), "A", groups=channels)
    a = g.relu(condition(g.add(a, g.param("in/b", np.zeros(f))), 0))
    for i in range(1, config.layers + 1):
        r = g.masked_conv2d(a, g.param(f"res{i}/w", conv_init(rng, 3, f, f)), "B", groups=channels)
        r = g.relu(condition(g.add(r, g.param(f"res{i}/b", np.zeros(f))), i))
        a = g.add(a, g.dropout(r, config.dropout))
    logits = g.masked_conv2d(a, g.param("out/w", conv_init(rng, 1, f, channels * levels)), "B", groups=channels)
    logits = g.add(logits, g.param("out/b", np.zeros(channels * levels)))
    g.output("logits", logits)
    nll = g.apply("categorical_nll", logits, t, levels=levels)
    g.output("nll", nll)
    g.output("loss", g.apply("mean", nll))
    g.validate()
    return g


class InversionModel:
    """p(x | h) for one classifier tap.

    Args:
        config: an :class:`InversionConfig`.
        image_shape: ``(H, W, C)`` of the modelled images.
        rep_shape: shape of one representation (without the batch axis).
        layer: name of the classifier tap this model inverts.
        h_scale: multiplier applied to representations before they enter the
            network (set from the training data by :func:`train_inverter`).
        params: optional parameter dict replacing the initialisation.
    """

    def __init__(self, config, image_shape, rep_shape, layer="", h_scale=1.0, params=None):
        self.config = config
        self.image_shape = tuple(int(s) for s in image_shape)
        self.rep_shape = tuple(int(s) for s in rep_shape)
        self.layer = layer
        self.h_scale = float(h_scale)
        self.conditioning = _resolve_conditioning(config.conditioning, self.rep_shape)
        rng = np.random.default_rng([config.seed, 2])
        self.graph = build_graph(config, self.image_shape, self.rep_shape, self.conditioning, rng)
        if params is not None:
            self.set_params(params)

    @property
    def params(self):
        return self.graph.params

    @property
    def levels(self):
        return self.config.levels

    @property
    def dims(self):
        return int(np.prod(self.image_shape))

    def set_params(self, params):
        for name, value in params.items():
            if name not in self.graph.params or self.graph.params[name].shape != np.shape(value):
                raise CheckpointError(f"parameter {name!r} does not fit the inverter architecture")
        self.graph.params = {name: np.array(params[name], dtype=np.float64) for name in self.graph.params}

    def zero_params(self):
        self.graph.params = {k: np.zeros_like(v) for k, v in self.graph.params.items()}
        return self

    def copy(self):
        return InversionModel(self.config, self.image_shape, self.rep_shape, self.layer, self.h_scale, self.params)

    def check_inputs(self, x, h):
        x = np.asarray(x)
        h = np.asarray(h, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != self.image_shape:
            raise ValueError(f"images of shape {x.shape[1:]} but the model expects {self.image_shape}")
        if h.shape[1:] != self.rep_shape:
            raise ValueError(f"representation of shape {h.shape[1:]} but the model expects {self.rep_shape}")
        if len(h) != len(x):
            raise ValueError(f"{len(x)} images but {len(h)} representations")
        if x.size and (x.min() < 0 or x.max() >= self.levels):
            raise ValueError(f"pixel value outside [0, {self.levels - 1}]")
        return x.astype(np.int64), h

    def feed(self, x, h):
        """Graph inputs for integer images ``x`` and raw representations ``h``."""
        scaled = x.astype(np.float64) * (2.0 / (self.levels - 1)) - 1.0
        return {"x": scaled, "t": x, "h": h * self.h_scale}

    def descriptor(self):
        desc = {"kind": "inverter"}
        for f in dataclasses.fields(self.config):
            desc[f"config.{f.name}"] = getattr(self.config, f.name)
        desc["conditioning"] = self.conditioning
        desc["layer"] = self.layer
        desc["image_shape"] = ",".join(map(str, self.image_shape))
        desc["rep_shape"] = ",".join(map(str, self.rep_shape))
        desc["h_scale"] = repr(self.h_scale)
        return desc


def log_conditionals(model, x, h, batch_size=256):
    """Teacher-forced log-probabilities, shape ``(N, H, W, C, L)``."""
    x, h = model.check_inputs(x, h)
    n = len(x)
    shape = (n,) + model.image_shape + (model.levels,)
    if n == 0:
        return np.zeros(shape)
    parts = []
    for i in range(0, n, batch_size):
        xb, hb = x[i:i + batch_size], h[i:i + batch_size]
        logits = evaluate(model.graph, model.feed(xb, hb), mode="infer", outputs=["logits"], keep_caches=False)["logits"]
        parts.append(log_softmax(logits.reshape((len(xb),) + model.image_shape + (model.levels,))))
    return np.concatenate(parts)


def log_prob(model, x, h, batch_size=256):
    """Exact log p(x | h) in nats, one value per image."""
    x, h = model.check_inputs(x, h)
    if len(x) == 0:
        return np.zeros(0)
    parts = [
        -evaluate(model.graph, model.feed(x[i:i + batch_size], h[i:i + batch_size]), mode="infer", outputs=["nll"], keep_caches=False)["nll"]
        for i in range(0, len(x), batch_size)
    ]
    return np.concatenate(parts)


def bits_per_dim(nll_nats, image_shape):
    return nll_nats / (int(np.prod(image_shape)) * math.log(2))


def sample(model, h, seed=0):
    """Ancestral samples, one image per row of ``h``, in raster order.

    Rows below the one being drawn cannot influence it, so each pass runs the
    network on the rows filled so far only.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.shape[1:] != model.rep_shape:
        raise ValueError(f"representation of shape {h.shape[1:]} but the model expects {model.rep_shape}")
    height, width, channels = model.image_shape
    levels = model.levels
    n = len(h)
    rng = np.random.default_rng([seed, 3])
    x = np.zeros((n, height, width, channels), dtype=np.int64)
    for r in range(height):
        for c in range(width):
            for ch in range(channels):
                crop = x[:, :r + 1]
                feed = model.feed(crop, h)
                logits = evaluate(model.graph, {k: feed[k] for k in ("x", "h")}, mode="infer", outputs=["logits"], keep_caches=False)["logits"]
                z = logits[:, r, c, ch * levels:(ch + 1) * levels]
                cdf = np.cumsum(np.exp(log_softmax(z)), axis=-1)
                u = rng.random((n, 1))
                x[:, r, c, ch] = np.minimum((u > cdf).sum(axis=-1), levels - 1)
    return x


def enumerate_density(model, h, chunk=4096):
    """Probability of every image given one representation ``h``.

    Returns an array of shape ``(L,) * (H*W*C)`` indexed by the raster-ordered
    pixel values.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.shape == model.rep_shape:
        h = h[None]
    if h.shape != (1,) + model.rep_shape:
        raise ValueError(f"enumerate_density takes a single representation of shape {model.rep_shape}")
    dims, levels = model.dims, model.levels
    total = levels**dims
    if total > MAX_ENUMERATION:
        raise ValueError(f"{levels}^{dims} images exceeds the enumeration limit of {MAX_ENUMERATION}")
    codes = np.arange(total)
    digits = (codes[:, None] // levels ** np.arange(dims - 1, -1, -1)) % levels
    images = digits.reshape((total,) + model.image_shape)
    lp = np.concatenate([
        log_prob(model, images[i:i + chunk], np.repeat(h, len(images[i:i + chunk]), axis=0), batch_size=chunk)
        for i in range(0, total, chunk)
    ])
    return np.exp(lp).reshape((levels,) * dims)


def _rms(h):
    value = float(np.sqrt(np.mean(np.square(h)))) if h.size else 0.0
    return value if value > 0 else 1.0


def fit_inverter(model, x_train, h_train, x_val, h_val):
    """Maximum-likelihood training of ``model`` on precomputed ``(x, h)`` pairs.

    Sets ``model.h_scale`` from the training representations, keeps the
    parameters with the best validation NLL, and returns
    ``(model, curve)``.
    """
    config = model.config
    x_train, h_train = model.check_inputs(x_train, h_train)
    x_val, h_val = model.check_inputs(x_val, h_val)
    if len(x_train) == 0:
        raise ValueError("inverter training needs a non-empty train split")
    model.h_scale = 1.0 / _rms(h_train)
    rng = np.random.default_rng([config.seed, 4])
    state = AdamState(lr=config.lr)
    curve = TrainCurve()
    best_nll, best_params, stale = math.inf, None, 0
    losses = []
    order, cursor = rng.permutation(len(x_train)), 0

    def val_nll():
        if len(x_val) == 0:
            return float(np.mean(losses)) if losses else math.nan
        return float(-np.mean(log_prob(model, x_val, h_val)))

    for step in range(config.max_steps + 1):
        if step % config.val_every == 0 or step == config.max_steps:
            nll = val_nll()
            curve.append(InverterCurvePoint(step, float(np.mean(losses)) if losses else math.nan, nll))
            losses = []
            log.info("inverter %s step %d val nll %.3f", model.layer, step, nll)
            if nll < best_nll:
                best_nll, best_params, stale = nll, {k: v.copy() for k, v in model.params.items()}, 0
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
            ev = evaluate(model.graph, model.feed(x_train[idx], h_train[idx]), mode="train", seed=config.seed * 10_000_019 + step)
            grads = backward(ev, "loss")
        except NonFiniteError as exc:
            raise DivergenceError(f"non-finite value at inverter step {step}: {exc}") from exc
        losses.append(float(ev["loss"]))
        state.lr = config.lr * config.lr_decay**step
        params, state = adam_step(model.params, grads, state)
        model.graph.params = params
    if best_params is not None:
        model.graph.params = best_params
    return model, curve


def train_inverter(classifier, layer, data, config):
    """Train p(x | h) for ``layer`` of a frozen classifier.

    Representations come from ``classifier.extract`` on the train and val
    splits of ``data``.

    Returns:
        ``(model, curve)``.
    """
    if config.levels != data.levels:
        raise ValueError(f"inverter levels {config.levels} but the dataset has {data.levels}")
    train, val = data.subset("train"), data.subset("val")
    h_train = classifier.extract(train.images, layer)
    h_val = classifier.extract(val.images, layer)
    model = InversionModel(config, data.shape, h_train.shape[1:], layer)
    return fit_inverter(model, train.images, h_train, val.images, h_val)


def expect_representation(model, classifier):
    """Raise if ``classifier``'s tap no longer has the shape the inverter was built for."""
    shape = tuple(classifier.tap_shape(model.layer))
    if shape != model.rep_shape:
        raise ValueError(f"tap {model.layer} has shape {shape} but the inverter expects {model.rep_shape}")


def save_checkpoint(model, path):
    write_container(path, model.descriptor(), model.params)


def _parse_config(desc):
    kwargs = {}
    for f in dataclasses.fields(InversionConfig):
        raw = desc.get(f"config.{f.name}")
        if raw is None:
            raise CheckpointError(f"descriptor lacks config.{f.name}")
        default = getattr(InversionConfig, f.name)
        if isinstance(default, bool):
            kwargs[f.name] = raw == "True"
        elif isinstance(default, int):
            kwargs[f.name] = int(raw)
        elif isinstance(default, float):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw
    return InversionConfig(**kwargs)


def load_checkpoint(path, expect=None):
    """Load an inverter; ``expect`` is a dict of descriptor entries that must match."""
    desc, params = read_container(path)
    if desc.get("kind") != "inverter":
        raise CheckpointError(f"{path}: not an inverter checkpoint (kind={desc.get('kind')!r})")
    if expect:
        check_descriptor(desc, expect, str(path))
    config = _parse_config(desc)
    config.conditioning = desc["conditioning"]
    image_shape = tuple(int(v) for v in desc["image_shape"].split(","))
    rep_shape = tuple(int(v) for v in desc["rep_shape"].split(",") if v)
    return InversionModel(config, image_shape, rep_shape, desc["layer"], float(desc["h_scale"]), params)
