"""Experiment drivers and their file outputs (CSV tables, PGM/PPM grids)."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from repinv.data import atomic_write_bytes
from repinv.inverter import fit_inverter, InversionModel, sample
from repinv.mi import nce_bound

log = logging.getLogger(__name__)

NN_METHODS = ("1NN", "IM-S", "IM-NN")
MI_LAYERS = ("CONV1", "CONV2", "FC3")

# Full-scale MNIST values (28x28, 256 levels, 500 test images); reference only.
NN_REFERENCE_MNIST = {
    ("CONV1", "1NN"): 1.25e-2, ("CONV1", "IM-S"): 7.68e-4, ("CONV1", "IM-NN"): 6.29e-4,
    ("CONV2", "1NN"): 4.95e-2, ("CONV2", "IM-S"): 1.65e-2, ("CONV2", "IM-NN"): 1.40e-2,
    ("FC3", "1NN"): 1.22e-1, ("FC3", "IM-S"): 1.35e-1, ("FC3", "IM-NN"): 9.52e-2,
}


@dataclass(frozen=True)
class NnTableRow:
    dataset: str
    layer: str
    method: str
    mean_l1: float
    n: int


@dataclass(frozen=True)
class DynamicsRecord:
    step: int
    layer: str
    regime: str
    nce_nats: float
    val_nll_nats: float


@dataclass(frozen=True)
class LayerNce:
    layer: str
    nce_nats: float
    nce_rel_conv1: float
    stderr: float


@dataclass(frozen=True)
class MiRow:
    layer: str
    kind: str
    value_nats: float
    n: int
    stderr: float
    param: float

    @classmethod
    def from_estimate(cls, layer, est):
        param = {"binning": est.bins, "kraskov_entropy": est.k, "kde_upper_bound": est.sigma2}.get(est.kind, est.dims)
        stderr = est.stderr if est.stderr is not None else float("nan")
        return cls(layer, est.kind, est.value, est.n, stderr, float(param))


@dataclass(frozen=True)
class TopkRow:
    rank: int
    pixel_l1: float


@dataclass(frozen=True)
class CurveRow:
    step: int
    train_loss: float
    val_metric: float


# ---------------------------------------------------------------------------
# CSV and image files
# ---------------------------------------------------------------------------

_PARSERS = {"int": int, "float": float, "str": str}


def _format(value):
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def write_csv(path, records):
    """Atomically write dataclass ``records`` with a header row; floats use ``repr``."""
    if not records:
        raise ValueError("no records to write")
    names = [f.name for f in dataclasses.fields(records[0])]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(names)
    for rec in records:
        writer.writerow([_format(getattr(rec, n)) for n in names])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def read_csv(path, cls):
    """Read rows written by :func:`write_csv` back into ``cls`` instances."""
    fields = dataclasses.fields(cls)
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != [fl.name for fl in fields]:
            raise ValueError(f"{path}: header {header} does not match {cls.__name__}")
        return [cls(*(_PARSERS[fl.type](v) for fl, v in zip(fields, row))) for row in reader]


def tile(images, rows, cols):
    """Tile ``(N, H, W, C)`` images into a grid with 1-pixel zero separators."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise ValueError(f"expected (N, H, W, C) images, got shape {images.shape}")
    n, h, w, c = images.shape
    if rows * cols < n:
        raise ValueError(f"{rows}x{cols} grid cannot hold {n} images")
    canvas = np.zeros((rows * h + rows - 1, cols * w + cols - 1, c), dtype=np.uint8)
    for i, img in enumerate(images):
        r, q = divmod(i, cols)
        canvas[r * (h + 1):r * (h + 1) + h, q * (w + 1):q * (w + 1) + w] = img
    return canvas


def sample_grid(images, rows, cols, path, levels=256):
    """Write a PGM (1 channel) or PPM (3 channels) tile grid with maxval ``levels - 1``."""
    if len({np.shape(img) for img in images}) > 1:
        raise ValueError("images in a grid must share one shape")
    canvas = tile(np.stack([np.asarray(img) for img in images]) if len(images) else np.zeros((0, 1, 1, 1)), rows, cols)
    c = canvas.shape[2]
    if c not in (1, 3):
        raise ValueError(f"grids need 1 or 3 channels, got {c}")
    if canvas.size and int(canvas.max()) > levels - 1:
        raise ValueError(f"pixel value above maxval {levels - 1}")
    header = f"{'P5' if c == 1 else 'P6'}\n{canvas.shape[1]} {canvas.shape[0]}\n{levels - 1}\n".encode("ascii")
    atomic_write_bytes(path, header + canvas.tobytes())
    return canvas


def read_pnm(path):
    """Read a binary PGM/PPM written by :func:`sample_grid`; returns ``(H, W, C)`` uint8."""
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    w, h = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit images are not supported")
    c = 1 if parts[0] == b"P5" else 3
    if len(parts[3]) != h * w * c:
        raise ValueError(f"{path}: payload has {len(parts[3])} bytes, expected {h * w * c}")
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, c)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def _flat(a):
    return np.asarray(a, dtype=np.float64).reshape(len(a), -1)


def nn_table(classifier, inverters, data, layers=MI_LAYERS, subset=200, n_samples=10, seed=0, overlap=False, dataset="mnist"):
    """Mean representation-space L1 of test images to 1NN, IM-S and IM-NN.

    Args:
        classifier: the frozen classifier providing the taps.
        inverters: dict of layer name to trained :class:`InversionModel`.
        data: dataset with train and test splits.
        subset: number of query images drawn (seeded) from the test split.
        n_samples: inversion samples per query; IM-S is the first of them.
        overlap: draw queries from the train split instead (1NN then finds
            the query itself).

    Returns:
        List of :class:`NnTableRow`, three per layer.
    """
    missing = [layer for layer in layers if layer not in inverters]
    if missing:
        raise KeyError(f"no inverter for layer(s) {missing}")
    train = data.subset("train")
    pool = train if overlap else data.subset("test")
    rng = np.random.default_rng([seed, 8])
    idx = np.sort(rng.choice(len(pool), size=min(subset, len(pool)), replace=False))
    queries = pool.images[idx]
    rows = []
    for li, layer in enumerate(layers):
        h = classifier.extract(queries, layer)
        nn = cdist(_flat(h), _flat(classifier.extract(train.images, layer)), "cityblock").min(axis=1)
        draws = sample(inverters[layer], np.repeat(h, n_samples, axis=0), seed=int(rng.integers(2**31)) + li)
        h_draws = _flat(classifier.extract(draws, layer)).reshape(len(queries), n_samples, -1)
        d = np.abs(h_draws - _flat(h)[:, None, :]).sum(axis=2)
        for method, values in (("1NN", nn), ("IM-S", d[:, 0]), ("IM-NN", d.min(axis=1))):
            rows.append(NnTableRow(dataset, layer, method, float(values.mean()), len(queries)))
    return rows


def nn_reference(rows):
    """Non-gating full-scale reference values matching ``rows``."""
    return {
        f"{r.layer}/{r.method}": NN_REFERENCE_MNIST.get((r.layer, r.method))
        for r in rows
        if (r.layer, r.method) in NN_REFERENCE_MNIST
    }


def write_nn_table(path, rows):
    """Write the table CSV plus a ``.reference.json`` sidecar with full-scale values."""
    write_csv(path, rows)
    meta = {
        "note": "full-scale MNIST reference (28x28, 256 levels, 500 test images); not comparable to desk scale",
        "values": nn_reference(rows),
    }
    atomic_write_bytes(f"{path}.reference.json", json.dumps(meta, indent=2, sort_keys=True).encode("utf-8"))


def topk_samples(inverter, x, h, pool=256, k=8, seed=0):
    """The ``k`` of ``pool`` samples from p(. | h) closest to ``x`` in pixel L1.

    Returns ``(images, distances)`` sorted by distance, ties broken by draw index.
    """
    if k > pool:
        raise ValueError(f"k={k} exceeds the pool of {pool} samples")
    h = np.asarray(h, dtype=np.float64)
    draws = sample(inverter, np.repeat(h.reshape((1,) + inverter.rep_shape), pool, axis=0), seed=seed)
    dist = np.abs(draws.reshape(pool, -1) - np.asarray(x, dtype=np.int64).reshape(1, -1)).sum(axis=1).astype(np.float64)
    order = np.argsort(dist, kind="stable")[:k]
    return draws[order], dist[order]


def mi_by_layer(classifier, inverters, test, layers=MI_LAYERS):
    """NCE per layer, absolute and relative to the CONV1 value."""
    missing = [layer for layer in layers if layer not in inverters]
    if missing or "CONV1" not in layers:
        raise KeyError(f"mi_by_layer needs CONV1 and inverters for every layer; missing {missing or ['CONV1']}")
    est = {layer: nce_bound(inverters[layer], classifier, layer, test) for layer in layers}
    ref = est["CONV1"].value
    return [LayerNce(layer, e.value, e.value / ref, e.stderr) for layer, e in est.items()]


def _dynamics_job(job):
    regime, step, layer, classifier, config, data = job
    train, val, test = (data.subset(s) for s in ("train", "val", "test"))
    h_train = classifier.extract(train.images, layer)
    model = InversionModel(config, data.shape, h_train.shape[1:], layer)
    model, curve = fit_inverter(model, train.images, h_train, val.images, classifier.extract(val.images, layer))
    nce = nce_bound(model, classifier, layer, test)
    val_nll = min(p.val_nll for p in curve.points)
    log.info("dynamics %s step %d %s: nce %.3f (se %.3f)", regime, step, layer, nce.value, nce.stderr)
    return DynamicsRecord(step, layer, regime, nce.value, val_nll), nce.stderr


def dynamics_sweep(checkpoints, layers, config, data, workers=1, with_stderr=False):
    """Fresh inverter per (regime, checkpoint step, layer); NCE on the test split.

    Args:
        checkpoints: dict of regime name to dict of step to classifier.
        layers: taps to invert.
        config: :class:`~repinv.inverter.InversionConfig` for every inverter.
        data: dataset whose train/val split trains the inverters and whose
            test split scores them.
        workers: process pool size for independent trainings.
        with_stderr: also return the NCE standard errors keyed like the records.

    Returns:
        Records sorted by (regime, layer, step).
    """
    jobs = []
    for regime, by_step in checkpoints.items():
        if not by_step:
            raise KeyError(f"regime {regime!r} has no checkpoints")
        for step, clf in by_step.items():
            if clf is None:
                raise KeyError(f"missing checkpoint for regime {regime!r} step {step}")
            for layer in layers:
                jobs.append((regime, int(step), layer, clf, config, data))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_dynamics_job, jobs))
    else:
        results = [_dynamics_job(job) for job in jobs]
    pairs = sorted(results, key=lambda r: (r[0].regime, r[0].layer, r[0].step))
    records = [r for r, _ in pairs]
    if with_stderr:
        return records, {(r.regime, r.layer, r.step): se for r, se in pairs}
    return records


def curve_rows(curve):
    """Generic CSV rows for a classifier, inverter or decoder training curve."""
    out = []
    for p in curve.points:
        values = dataclasses.astuple(p)
        out.append(CurveRow(int(values[0]), float(values[1]), float(values[2])))
    return out
