"""Desk-scale experiment recipes and an on-disk cache for their results.

Each recipe writes its CSVs and checkpoints into an output directory and
returns a JSON-serialisable summary. :func:`cached` keys a run by the recipe
name, its parameters and a digest of the package source, so a result is
reused only while the code that produced it is unchanged.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import shutil
from pathlib import Path

import numpy as np

from repinv import classifier as clf
from repinv import harness
from repinv.data import ImageDataset, atomic_write_bytes, desk_affine, desk_mnist
from repinv.inverter import InversionConfig, InversionModel, save_checkpoint, train_inverter
from repinv.inverter import load_checkpoint as load_inverter
from repinv.mi import binning_mi, kde_noise_bound, kraskov_entropy, nce_bound

log = logging.getLogger(__name__)

ARTIFACTS_ENV = "REPINV_ARTIFACTS"
RECOMPUTE_ENV = "REPINV_RECOMPUTE"
# the CLI only wires these modules together, so editing it keeps cached results
_UNHASHED = {"cli.py", "__main__.py"}


def source_digest():
    """sha256 over every package module except the CLI front end."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for path in sorted(root.rglob("*.py")):
        if path.name in _UNHASHED:
            continue
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def _jsonable(value):
    if dataclasses.is_dataclass(value):
        return {"__type__": type(value).__name__, **{k: _jsonable(v) for k, v in dataclasses.asdict(value).items()}}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    return value


def cache_key(name, params):
    blob = json.dumps({"name": name, "params": _jsonable(params), "source": source_digest()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def cached(name, params, compute, root=None):
    """Run ``compute(out_dir, **params)`` once per (name, params, source) and memoise its summary.

    Set ``REPINV_RECOMPUTE=1`` to ignore stored results.

    Returns:
        ``(summary, out_dir)``.
    """
    root = Path(root or os.environ.get(ARTIFACTS_ENV) or Path.cwd() / "artifacts")
    out = root / f"{name}-{cache_key(name, params)}"
    done = out / "summary.json"
    if done.exists() and os.environ.get(RECOMPUTE_ENV) != "1":
        return json.loads(done.read_text()), out
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    log.info("running %s into %s", name, out)
    summary = compute(out, **params)
    atomic_write_bytes(done, json.dumps(summary, indent=2, sort_keys=True).encode())
    return summary, out


def _train_classifier(config, data, out):
    os.makedirs(out, exist_ok=True)
    model, curve, snaps = clf.train_classifier(config, data)
    clf.save_checkpoint(model, os.path.join(out, "classifier.ckpt"))
    harness.write_csv(os.path.join(out, "train_curve.csv"), harness.curve_rows(curve))
    return model, curve, snaps


# ---------------------------------------------------------------------------
# Recipes
# ---------------------------------------------------------------------------


class _ConstantTaps:
    def extract(self, images, layer):
        return np.zeros((len(images), 1))


def analytic_nce_rows():
    """NCE of a zero-weight inverter on every 2x2 binary image (uniform model)."""
    model = InversionModel(InversionConfig(levels=2, layers=1, filters=4), (2, 2, 1), (1,), "FC3").zero_params()
    codes = np.arange(16)
    images = ((codes[:, None] >> np.arange(3, -1, -1)) & 1).reshape(16, 2, 2, 1)
    test = ImageDataset(images.astype(np.uint8), np.zeros(16, dtype=np.int64), levels=2)
    est = nce_bound(model, _ConstantTaps(), "FC3", test)
    return [harness.MiRow.from_estimate("uniform", est)]


def calibration_rows(seed=0, n=10_000):
    """Estimator checks with known answers: Gaussian entropy, a 2x2 joint, constant activations."""
    rng = np.random.default_rng([seed, 5])
    rows = [harness.MiRow.from_estimate("gaussian", kraskov_entropy(rng.normal(size=(n, 1)), 3))]
    counts = [[3, 1], [2, 6]]
    xs, hs = [], []
    for (i, j), c in np.ndenumerate(np.asarray(counts)):
        xs += [i] * c
        hs += [float(j)] * c
    rows.append(harness.MiRow.from_estimate("joint2x2", binning_mi(np.array(xs), np.array(hs)[:, None], 2)))
    rows.append(harness.MiRow.from_estimate("constant", kde_noise_bound(np.full((n, 1), 2.5), 1.0, seed=seed)))
    return rows


def joint2x2_mi():
    """Closed-form MI of the 2x2 table used by :func:`calibration_rows`."""
    p = np.array([[3, 1], [2, 6]], dtype=np.float64) / 12
    px, py = p.sum(axis=1), p.sum(axis=0)
    return float(sum(p[i, j] * math.log(p[i, j] / (px[i] * py[j])) for i in range(2) for j in range(2)))


def layer_ordering(out, seed=0, classifier=None, inverter=None):
    """Train a desk MNIST classifier, then one inverter per conv/FC tap; NCE per layer."""
    classifier = dataclasses.replace(classifier or clf.ClassifierConfig(), seed=seed)
    inverter = dataclasses.replace(inverter or InversionConfig(), seed=seed)
    data = desk_mnist()
    model, curve, _ = _train_classifier(classifier, data, out)
    inverters = {}
    for layer in harness.MI_LAYERS:
        inv, inv_curve = train_inverter(model, layer, data, inverter)
        save_checkpoint(inv, os.path.join(out, f"inverter_{layer}.ckpt"))
        harness.write_csv(os.path.join(out, f"inverter_{layer}_curve.csv"), harness.curve_rows(inv_curve))
        inverters[layer] = inv
    rows = harness.mi_by_layer(model, inverters, data.subset("test"))
    harness.write_csv(os.path.join(out, "mi_by_layer.csv"), rows)
    return {
        "test_accuracy": model.accuracy(data.subset("test")),
        "last_step": curve.points[-1].step,
        "rows": [dataclasses.asdict(r) for r in rows],
    }


def reproducible_bundle(out, seed=0, classifier=None, inverter=None):
    """Analytic NCE, estimator calibration and layer ordering, each to its own CSV."""
    harness.write_csv(os.path.join(out, "analytic_nce.csv"), analytic_nce_rows())
    harness.write_csv(os.path.join(out, "calibration.csv"), calibration_rows(seed))
    summary = layer_ordering(os.path.join(out, "ordering"), seed, classifier, inverter)
    summary["csv"] = ["analytic_nce.csv", "calibration.csv", "ordering/mi_by_layer.csv", "ordering/train_curve.csv"]
    return summary


def nn_structure(out, ordering_dir, subset=50, n_samples=10, seed=0):
    """Nearest-neighbour table from a finished :func:`layer_ordering` run."""
    model = clf.load_checkpoint(os.path.join(ordering_dir, "classifier.ckpt"))
    inverters = {layer: load_inverter(os.path.join(ordering_dir, f"inverter_{layer}.ckpt")) for layer in harness.MI_LAYERS}
    rows = harness.nn_table(model, inverters, desk_mnist(), subset=subset, n_samples=n_samples, seed=seed)
    harness.write_nn_table(os.path.join(out, "nn_table.csv"), rows)
    return {"rows": [dataclasses.asdict(r) for r in rows], "reference": harness.nn_reference(rows)}


def _shift_pairs(images, pairs, stride, max_shift, rng, max_tries=100_000):
    """Pick images and nonzero shifts (multiples of ``stride``) that keep every ink pixel on the canvas."""
    h, w = images.shape[1:3]
    steps = np.array([s for s in range(-max_shift, max_shift + 1) if s % stride == 0])
    out = []
    for _ in range(max_tries):
        if len(out) == pairs:
            return out
        i = int(rng.integers(len(images)))
        rows, cols = np.nonzero(images[i, :, :, 0])
        dy, dx = (int(v) for v in rng.choice(steps, 2))
        if rows.size == 0 or (dy, dx) == (0, 0):
            continue
        if rows.min() + dy < 0 or rows.max() + dy >= h or cols.min() + dx < 0 or cols.max() + dx >= w:
            continue
        out.append((i, dy, dx))
    raise ValueError(f"found only {len(out)} of {pairs} translatable images")


def translate(image, dy, dx):
    """Integer translation with zero fill."""
    moved = np.zeros_like(image)
    h, w = image.shape[:2]
    src = image[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
    moved[max(0, dy):max(0, dy) + src.shape[0], max(0, dx):max(0, dx) + src.shape[1]] = src
    return moved


def pooling_invariance(out, seed=0, pairs=200, stride=4, max_shift=4, free_shift=3, classifier=None, inverter=None):
    """Baseline vs global-pool classifiers on affine digits: FC3 translation L1 and FC3 NCE.

    The gated distance uses shifts that are multiples of the total pooling
    stride. Unrestricted shifts up to ``free_shift`` are measured too, for
    reference.
    """
    base_cfg = dataclasses.replace(classifier or clf.ClassifierConfig(), seed=seed)
    inverter = dataclasses.replace(inverter or InversionConfig(), seed=seed)
    data = desk_affine()
    test = data.subset("test")
    rng = np.random.default_rng([seed, 7])
    shifts = {
        "median_l1": _shift_pairs(test.images, pairs, stride, max_shift, rng),
        "median_l1_any_shift": _shift_pairs(test.images, pairs, 1, free_shift, rng),
    }
    summary = {"pairs": pairs, "stride": stride}
    for variant in ("baseline", "global_pool"):
        sub = os.path.join(out, variant)
        model, _, _ = _train_classifier(dataclasses.replace(base_cfg, variant=variant), data, sub)
        distances = {}
        for key, picks in shifts.items():
            originals = test.images[[i for i, _, _ in picks]]
            moved = np.stack([translate(test.images[i], dy, dx) for i, dy, dx in picks])
            distances[key] = float(np.median(np.abs(model.extract(originals, "FC3") - model.extract(moved, "FC3")).sum(axis=1)))
        inv, inv_curve = train_inverter(model, "FC3", data, inverter)
        save_checkpoint(inv, os.path.join(sub, "inverter_FC3.ckpt"))
        harness.write_csv(os.path.join(sub, "inverter_FC3_curve.csv"), harness.curve_rows(inv_curve))
        est = nce_bound(inv, model, "FC3", test)
        summary[variant] = {
            "test_accuracy": model.accuracy(test),
            **distances,
            "nce": est.value,
            "stderr": est.stderr,
        }
    return summary


def dynamics_seed(out, seed=0, regimes=("regular",), overfit_subset=100, classifier=None, inverter=None, layers=("FC3",)):
    """Checkpointed classifier training per regime, then a fresh inverter per checkpoint."""
    base = dataclasses.replace(classifier or clf.ClassifierConfig(), seed=seed, patience=0)
    inverter = dataclasses.replace(inverter or InversionConfig(), seed=seed)
    data = desk_mnist()
    checkpoints = {}
    for regime in regimes:
        config = base
        if regime == "overfit":
            config = dataclasses.replace(base, train_subset=overfit_subset, dropout=False)
        _, _, snaps = _train_classifier(config, data, os.path.join(out, regime))
        checkpoints[regime] = snaps
    records, stderr = harness.dynamics_sweep(checkpoints, layers, inverter, data, with_stderr=True)
    harness.write_csv(os.path.join(out, "dynamics.csv"), records)
    return {
        "records": [dataclasses.asdict(r) for r in records],
        "stderr": [{"regime": k[0], "layer": k[1], "step": k[2], "stderr": v} for k, v in sorted(stderr.items())],
    }
