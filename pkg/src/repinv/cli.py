"""Command-line entry point: ``repinv <command> [--config PATH] [--seed N] [--out DIR] [--key value ...]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import os
import sys

import numpy as np

from repinv import classifier as clf
from repinv import harness, inverter as inv, mi, mse
from repinv.autodiff import GraphError, NonFiniteError
from repinv.checkpoint import CheckpointError
from repinv.data import DataError, atomic_write_bytes, desk_affine, downsample2, from_idx, load_cifar10_batch, load_mnist_sample, make_affine_digits, quantize, split_deterministic

log = logging.getLogger("repinv")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    """Bad command line or configuration."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_tuple(text):
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _float_tuple(text):
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _str_tuple(text):
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


def _from_dataclass(cls, skip=("seed",)):
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = f.default
        if isinstance(default, bool):
            parse = _bool
        elif isinstance(default, tuple):
            parse = _int_tuple
        else:
            parse = type(default)
        out[f.name] = (parse, default)
    return out


SCHEMA = {
    "data": {
        "source": (str, "mnist_sample"),
        "images": (str, ""),
        "labels": (str, ""),
        "cifar": (_str_tuple, ()),
        "size": (int, 14),
        "levels": (int, 16),
        "fractions": (_float_tuple, (0.8, 0.1, 0.1)),
        "affine": (_bool, False),
        "canvas": (int, 20),
    },
    "classifier": _from_dataclass(clf.ClassifierConfig),
    "inverter": _from_dataclass(inv.InversionConfig, skip=("seed", "levels")),
    "mse": _from_dataclass(mse.MseConfig),
    "mi": {
        "kind": (str, "nce"),
        "k": (int, 3),
        "bins": (int, 30),
        "sigma2": (float, 1.0),
        "held_out": (float, 0.5),
        "n": (int, 1000),
        "layer": (str, "FC3"),
    },
    "eval": {
        "classifier": (str, ""),
        "inverter": (str, ""),
        "inverters": (_str_tuple, ()),
        "mse": (str, ""),
        "layer": (str, "FC3"),
        "layers": (_str_tuple, harness.MI_LAYERS),
        "subset": (int, 200),
        "n_samples": (int, 10),
        "pool": (int, 256),
        "k": (int, 8),
        "index": (int, 0),
        "count": (int, 16),
        "rows": (int, 4),
        "cols": (int, 4),
        "split": (str, "test"),
        "regimes": (_str_tuple, ("regular", "overfit")),
        "overfit_subset": (int, 100),
        "workers": (int, 1),
    },
}

COMMANDS = {
    "train-classifier": ("classifier", "data"),
    "train-inverter": ("inverter", "eval", "data"),
    "train-mse": ("mse", "eval", "data"),
    "sample": ("eval", "inverter", "data"),
    "estimate-mi": ("mi", "eval", "data"),
    "nn-table": ("eval", "data"),
    "topk": ("eval", "data"),
    "dynamics": ("eval", "classifier", "inverter", "data"),
    "grid": ("eval", "data"),
}


def stage_seed(seed, stage):
    """Per-stage seed derived from the global one by hashing."""
    digest = hashlib.sha256(f"{seed}/{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def parse_config_text(text, source="config"):
    """``key = value`` lines with ``#`` comments; returns a raw string dict."""
    raw = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{source}:{n}: expected 'key = value'")
        raw[key.strip()] = value.strip()
    return raw


def resolve_key(key, namespaces):
    """Map a dotted or bare key to ``namespace.name``; bare names search ``namespaces`` in order."""
    if "." in key:
        ns, _, name = key.partition(".")
        if ns in SCHEMA and name in SCHEMA[ns]:
            return key
        raise UsageError(f"unknown config key {key!r}")
    for ns in namespaces:
        if key in SCHEMA[ns]:
            return f"{ns}.{key}"
    raise UsageError(f"unknown option --{key} for this command")


def build_config(raw):
    """Typed config with defaults for every known key; unknown keys are errors."""
    cfg = {f"{ns}.{name}": default for ns, keys in SCHEMA.items() for name, (_, default) in keys.items()}
    for key, text in raw.items():
        ns, _, name = key.partition(".")
        if ns not in SCHEMA or name not in SCHEMA[ns]:
            raise UsageError(f"unknown config key {key!r}")
        try:
            cfg[key] = SCHEMA[ns][name][0](text)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from exc
    return cfg


def _text(value):
    if isinstance(value, tuple):
        return ",".join(map(str, value))
    return str(value)


def write_resolved(out, cfg, seed, command):
    lines = [f"# resolved configuration for {command}", f"seed = {seed}"]
    lines += [f"{key} = {_text(cfg[key])}" for key in sorted(cfg)]
    atomic_write_bytes(os.path.join(out, "resolved.cfg"), ("\n".join(lines) + "\n").encode("utf-8"))


def section(cfg, ns):
    return {key.partition(".")[2]: value for key, value in cfg.items() if key.startswith(ns + ".")}


def classifier_config(cfg, seed):
    return clf.ClassifierConfig(seed=stage_seed(seed, "classifier"), **section(cfg, "classifier"))


def inverter_config(cfg, seed, stage="inverter"):
    return inv.InversionConfig(seed=stage_seed(seed, stage), levels=cfg["data.levels"], **section(cfg, "inverter"))


def mse_config(cfg, seed):
    return mse.MseConfig(seed=stage_seed(seed, "mse"), **section(cfg, "mse"))


# ---------------------------------------------------------------------------
# Data and model loading
# ---------------------------------------------------------------------------


def load_data(cfg, seed):
    src = cfg["data.source"]
    split_seed = stage_seed(seed, "split")
    if src == "mnist_sample":
        raw = load_mnist_sample()
    elif src == "idx":
        if not cfg["data.images"] or not cfg["data.labels"]:
            raise UsageError("data.source = idx needs data.images and data.labels")
        raw = from_idx(cfg["data.images"], cfg["data.labels"])
    elif src == "cifar":
        if not cfg["data.cifar"]:
            raise UsageError("data.source = cifar needs data.cifar (comma-separated batch files)")
        parts = [load_cifar10_batch(p) for p in cfg["data.cifar"]]
        raw = type(parts[0])(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]), levels=256)
    else:
        raise UsageError(f"unknown data.source {src!r}")
    if cfg["data.affine"]:
        if src != "mnist_sample":
            raw = downsample2(raw) if cfg["data.size"] * 2 == raw.shape[0] else raw
            warped, _ = make_affine_digits(raw, cfg["data.canvas"], split_seed)
            return split_deterministic(quantize(warped, cfg["data.levels"]), cfg["data.fractions"], split_seed)
        return desk_affine(cfg["data.canvas"], cfg["data.levels"], cfg["data.fractions"], split_seed, source=raw)
    if cfg["data.size"] * 2 == raw.shape[0]:
        raw = downsample2(raw)
    elif cfg["data.size"] != raw.shape[0]:
        raise UsageError(f"data.size {cfg['data.size']} does not fit {raw.shape[0]}-pixel images")
    return split_deterministic(quantize(raw, cfg["data.levels"]), cfg["data.fractions"], split_seed)


def _need_path(cfg, key):
    path = cfg[key]
    if not path:
        raise UsageError(f"{key} must name a checkpoint file")
    if not os.path.exists(path):
        raise DataError(f"{key}: no such file {path!r}")
    return path


def load_classifier(cfg):
    return clf.load_checkpoint(_need_path(cfg, "eval.classifier"))


def load_inverters(cfg):
    """``eval.inverters`` entries are ``LAYER=PATH``."""
    out = {}
    for entry in cfg["eval.inverters"]:
        layer, sep, path = entry.partition("=")
        if not sep:
            raise UsageError(f"eval.inverters entry {entry!r} is not LAYER=PATH")
        if not os.path.exists(path):
            raise DataError(f"inverter checkpoint {path!r} not found")
        out[layer] = inv.load_checkpoint(path)
    return out


def _split(data, tag):
    if tag not in ("train", "val", "test"):
        raise UsageError(f"unknown split {tag!r}")
    return data.subset(tag)


def _draw(images, count, seed, stage):
    """Seeded subset of ``count`` images in split order; splits may be grouped by class."""
    count = min(count, len(images))
    keep = np.random.default_rng(stage_seed(seed, stage)).choice(len(images), count, replace=False)
    return images[np.sort(keep)]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train_classifier(cfg, seed, out):
    data = load_data(cfg, seed)
    ckdir = os.path.join(out, "checkpoints")
    os.makedirs(ckdir, exist_ok=True)
    model, curve, _ = clf.train_classifier(classifier_config(cfg, seed), data, checkpoint_dir=ckdir)
    clf.save_checkpoint(model, os.path.join(out, "classifier.ckpt"))
    harness.write_csv(os.path.join(out, "train_curve.csv"), harness.curve_rows(curve))
    print(f"test accuracy {model.accuracy(data.subset('test')):.4f}")


def cmd_train_inverter(cfg, seed, out):
    data = load_data(cfg, seed)
    classifier = load_classifier(cfg)
    layer = cfg["eval.layer"]
    model, curve = inv.train_inverter(classifier, layer, data, inverter_config(cfg, seed))
    inv.save_checkpoint(model, os.path.join(out, f"inverter_{layer}.ckpt"))
    harness.write_csv(os.path.join(out, f"inverter_{layer}_curve.csv"), harness.curve_rows(curve))
    est = mi.nce_bound(model, classifier, layer, data.subset("test"))
    print(f"{layer} test NCE {est.value:.3f} nats (se {est.stderr:.3f}), {est.bits_per_dim:.4f} bits/dim")


def cmd_train_mse(cfg, seed, out):
    data = load_data(cfg, seed)
    classifier = load_classifier(cfg)
    layer = cfg["eval.layer"]
    model, curve = mse.train_mse(classifier, layer, data, mse_config(cfg, seed))
    mse.save_checkpoint(model, os.path.join(out, f"mse_{layer}.ckpt"))
    harness.write_csv(os.path.join(out, f"mse_{layer}_curve.csv"), harness.curve_rows(curve))
    test = data.subset("test")
    shown = _draw(test.images, cfg["eval.count"], seed, "show")
    count = len(shown)
    recon = mse.export(mse.reconstruct(model, classifier.extract(shown, layer)), data.levels)
    pairs = np.concatenate([shown, recon])
    harness.sample_grid(pairs, 2, count, os.path.join(out, f"mse_{layer}.pgm"), data.levels)
    print(f"{layer} test MSE {mse.mse(model, test.images, classifier.extract(test.images, layer)):.5f}")


def cmd_sample(cfg, seed, out):
    data = load_data(cfg, seed)
    classifier = load_classifier(cfg)
    model = inv.load_checkpoint(_need_path(cfg, "eval.inverter"))
    inv.expect_representation(model, classifier)
    part = _split(data, cfg["eval.split"])
    shown = _draw(part.images, cfg["eval.count"], seed, "show")
    count = len(shown)
    draws = inv.sample(model, classifier.extract(shown, model.layer), seed=stage_seed(seed, "sample"))
    rows = [shown, draws]
    harness.sample_grid(np.concatenate(rows), 2, count, os.path.join(out, f"samples_{model.layer}.pgm"), data.levels)


def cmd_estimate_mi(cfg, seed, out):
    kind = cfg["mi.kind"]
    n, k = cfg["mi.n"], cfg["mi.k"]
    if kind not in ("nce", "kraskov", "binning", "kde"):
        raise UsageError(f"unknown mi.kind {kind!r}")
    if n < 1:
        raise UsageError("mi.n must be positive")
    if kind == "kraskov" and not 1 <= k < n:
        raise UsageError(f"mi.k must satisfy 1 <= k < n (got k={k}, n={n})")
    data = load_data(cfg, seed)
    classifier = load_classifier(cfg)
    test = data.subset("test")
    if kind == "nce":
        inverters = load_inverters(cfg)
        if not inverters:
            raise UsageError("mi.kind = nce needs eval.inverters")
        layers = tuple(layer for layer in harness.MI_LAYERS if layer in inverters)
        if "CONV1" in inverters:
            rows = harness.mi_by_layer(classifier, inverters, test, layers)
        else:
            rows = []
            for layer in layers:
                e = mi.nce_bound(inverters[layer], classifier, layer, test)
                rows.append(harness.LayerNce(layer, e.value, float("nan"), e.stderr))
        harness.write_csv(os.path.join(out, "mi_by_layer.csv"), rows)
        return
    images = _draw(test.images, n, seed, "mi")
    acts = classifier.extract(images, cfg["mi.layer"]).reshape(len(images), -1)
    if kind == "kraskov":
        est = mi.kraskov_entropy(acts, k)
    elif kind == "binning":
        est = mi.binning_mi(np.arange(len(images)), acts, cfg["mi.bins"])
    else:
        est = mi.kde_noise_bound(acts, cfg["mi.sigma2"], cfg["mi.held_out"], seed=stage_seed(seed, "kde"))
    harness.write_csv(os.path.join(out, "mi.csv"), [harness.MiRow.from_estimate(cfg["mi.layer"], est)])
    print(f"{est.kind} {cfg['mi.layer']}: {est.value:.6g} nats (n={est.n})")


def cmd_nn_table(cfg, seed, out):
    data = load_data(cfg, seed)
    classifier = load_classifier(cfg)
    inverters = load_inverters(cfg)
    rows = harness.nn_table(
        classifier, inverters, data, cfg["eval.layers"], cfg["eval.subset"], cfg["eval.n_samples"], stage_seed(seed, "nn_table")
    )
    harness.write_nn_table(os.path.join(out, "nn_table.csv"), rows)


def cmd_topk(cfg, seed, out):
    data = load_data(cfg, seed)
    classifier = load_classifier(cfg)
    model = inv.load_checkpoint(_need_path(cfg, "eval.inverter"))
    part = _split(data, cfg["eval.split"])
    i = cfg["eval.index"]
    if not 0 <= i < len(part):
        raise UsageError(f"eval.index {i} outside the {len(part)}-image split")
    x = part.images[i]
    h = classifier.extract(x[None], model.layer)[0]
    images, dist = harness.topk_samples(model, x, h, cfg["eval.pool"], cfg["eval.k"], stage_seed(seed, "topk"))
    harness.sample_grid(np.concatenate([x[None], images]), 1, len(images) + 1, os.path.join(out, f"topk_{model.layer}.pgm"), data.levels)
    harness.write_csv(os.path.join(out, f"topk_{model.layer}.csv"), [harness.TopkRow(r, float(d)) for r, d in enumerate(dist)])


def cmd_dynamics(cfg, seed, out):
    data = load_data(cfg, seed)
    base = dataclasses.replace(classifier_config(cfg, seed), patience=0)
    checkpoints = {}
    for regime in cfg["eval.regimes"]:
        if regime == "regular":
            config = base
        elif regime == "overfit":
            config = dataclasses.replace(base, train_subset=cfg["eval.overfit_subset"], dropout=False)
        else:
            raise UsageError(f"unknown regime {regime!r}; expected regular or overfit")
        ckdir = os.path.join(out, regime)
        os.makedirs(ckdir, exist_ok=True)
        _, curve, snaps = clf.train_classifier(config, data, checkpoint_dir=ckdir)
        harness.write_csv(os.path.join(ckdir, "train_curve.csv"), harness.curve_rows(curve))
        missing = [s for s in config.checkpoints if s not in snaps]
        if missing:
            raise DataError(f"regime {regime}: no checkpoint for step(s) {missing}")
        checkpoints[regime] = snaps
    records = harness.dynamics_sweep(checkpoints, cfg["eval.layers"], inverter_config(cfg, seed), data, cfg["eval.workers"])
    harness.write_csv(os.path.join(out, "dynamics.csv"), records)


def cmd_grid(cfg, seed, out):
    data = load_data(cfg, seed)
    part = _split(data, cfg["eval.split"])
    shown = _draw(part.images, cfg["eval.rows"] * cfg["eval.cols"], seed, "show")
    harness.sample_grid(shown, cfg["eval.rows"], cfg["eval.cols"], os.path.join(out, "grid.pgm" if data.shape[2] == 1 else "grid.ppm"), data.levels)


HANDLERS = {
    "train-classifier": cmd_train_classifier,
    "train-inverter": cmd_train_inverter,
    "train-mse": cmd_train_mse,
    "sample": cmd_sample,
    "estimate-mi": cmd_estimate_mi,
    "nn-table": cmd_nn_table,
    "topk": cmd_topk,
    "dynamics": cmd_dynamics,
    "grid": cmd_grid,
}


def parse_args(argv):
    parser = _Parser(prog="repinv", allow_abbrev=False, description="Train classifiers and inversion models; estimate information per layer.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="flat 'key = value' config file")
    parser.add_argument("--seed", type=int, default=0, help="global seed (non-negative)")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    args, rest = parser.parse_known_args(argv)
    if args.seed < 0:
        raise UsageError("--seed must be non-negative")
    overrides = {}
    i = 0
    while i < len(rest):
        flag = rest[i]
        if not flag.startswith("--") or len(flag) == 2:
            raise UsageError(f"unexpected argument {flag!r}")
        key, eq, value = flag[2:].partition("=")
        if not eq:
            if i + 1 >= len(rest):
                raise UsageError(f"option {flag} needs a value")
            value = rest[i + 1]
            i += 1
        overrides[resolve_key(key.replace("-", "_"), COMMANDS[args.command])] = value
        i += 1
    return args, overrides


def run(argv):
    args, overrides = parse_args(argv)
    raw = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as f:
                raw = parse_config_text(f.read(), args.config)
        except OSError as exc:
            raise DataError(f"cannot read config {args.config!r}: {exc.strerror}") from exc
    raw.update(overrides)
    cfg = build_config(raw)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    os.makedirs(args.out, exist_ok=True)
    write_resolved(args.out, cfg, args.seed, args.command)
    HANDLERS[args.command](cfg, args.seed, args.out)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        run(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ArithmeticError, NonFiniteError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GraphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
