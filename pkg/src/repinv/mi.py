"""Information estimates in nats: NCE lower bound, binning, kNN entropy, KDE bound."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln, logsumexp

from repinv.inverter import log_prob

KINDS = ("nce_lower_bound", "binning", "kraskov_entropy", "kde_upper_bound")
_AUX = {
    "nce_lower_bound": ("dims",),
    "binning": ("bins",),
    "kraskov_entropy": ("k", "dims"),
    "kde_upper_bound": ("sigma2", "dims"),
}
KRASKOV_EPS = 1e-10


@dataclass(frozen=True)
class MIEstimate:
    """An information quantity with the estimator that produced it.

    ``nce_lower_bound`` values are mean held-out log-likelihoods (the MI lower
    bound up to the unknown constant H(x)), not absolute mutual information.
    """

    value: float
    kind: str
    n: int
    stderr: float | None = None
    bins: int | None = None
    k: int | None = None
    sigma2: float | None = None
    dims: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown estimate kind {self.kind!r}")
        if self.n <= 0:
            raise ValueError("an estimate needs at least one sample")
        for name in ("bins", "k", "sigma2", "dims"):
            present = getattr(self, name) is not None
            if present != (name in _AUX[self.kind]):
                raise ValueError(f"field {name!r} {'not applicable to' if present else 'required for'} {self.kind}")

    @property
    def bits_per_dim(self):
        if self.kind != "nce_lower_bound":
            raise AttributeError("bits/dim is only defined for NCE estimates")
        return -self.value / (self.dims * math.log(2))


def nce_from_log_probs(log_probs, dims):
    """NCE estimate from per-example held-out log-likelihoods."""
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.size == 0:
        raise ValueError("NCE needs a non-empty held-out set")
    stderr = float(lp.std(ddof=1) / math.sqrt(lp.size)) if lp.size > 1 else None
    return MIEstimate(float(lp.mean()), "nce_lower_bound", int(lp.size), stderr=stderr, dims=int(dims))


def nce_bound(inverter, classifier, layer, test):
    """Mean log p(x | h) over the held-out images ``test`` (an ImageDataset)."""
    if len(test) == 0:
        raise ValueError("NCE needs a non-empty held-out set")
    if layer != inverter.layer and inverter.layer:
        raise ValueError(f"inverter was trained on {inverter.layer}, not {layer}")
    h = classifier.extract(test.images, layer)
    return nce_from_log_probs(log_prob(inverter, test.images, h), inverter.dims)


def bin_activations(activations, bins):
    """Equal-width bin index per dimension over the empirical [min, max].

    Constant dimensions collapse to a single bin.
    """
    a = np.asarray(activations, dtype=np.float64)
    a = a.reshape(len(a), -1)
    lo, hi = a.min(axis=0), a.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    idx = np.floor((a - lo) / span * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def _row_ids(rows):
    return np.unique(rows, axis=0, return_inverse=True)[1].reshape(-1)


def empirical_entropy(ids):
    """Plug-in entropy (nats) of integer labels."""
    counts = np.bincount(ids).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def binning_mi(x_ids, activations, bins=30):
    """Exact MI of the empirical joint of ``(x_id, binned activation vector)``."""
    x_ids = np.asarray(x_ids).reshape(-1)
    n = len(x_ids)
    if n < 1 or bins < 1:
        raise ValueError("binning needs at least one sample and one bin")
    if len(activations) != n:
        raise ValueError(f"{n} ids but {len(activations)} activation rows")
    xi = _row_ids(x_ids[:, None])
    hi = _row_ids(bin_activations(activations, bins))
    stride = int(hi.max()) + 1
    keys, cj = np.unique(xi * stride + hi, return_counts=True)
    cx = np.bincount(xi)[keys // stride].astype(np.float64)
    ch = np.bincount(hi)[keys % stride].astype(np.float64)
    cj = cj.astype(np.float64)
    value = float(np.sum(cj / n * np.log(cj * n / (cx * ch))))
    return MIEstimate(max(value, 0.0), "binning", n, bins=int(bins))


def knn_distances(samples, k, chunk=1024):
    """Euclidean distance from each row to its k-th nearest other row (exact)."""
    x = np.asarray(samples, dtype=np.float64)
    x = x.reshape(len(x), -1)
    n = len(x)
    sq = np.einsum("ij,ij->i", x, x)
    out = np.empty(n)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * x[start:stop] @ x.T
        d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        kth = np.partition(d2, k - 1, axis=1)[:, k - 1]
        out[start:stop] = np.sqrt(np.maximum(kth, 0.0))
    return out


def kraskov_entropy(samples, k=3):
    """kNN differential entropy estimate in nats."""
    x = np.asarray(samples, dtype=np.float64)
    x = x.reshape(len(x), -1)
    n, d = x.shape
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < N, got k={k}, N={n}")
    r = knn_distances(x, k)
    value = d * np.mean(np.log(r + KRASKOV_EPS)) + d / 2 * math.log(math.pi) - gammaln(d / 2 + 1) + digamma(n) - digamma(k)
    return MIEstimate(float(value), "kraskov_entropy", n, k=int(k), dims=int(d))


def kde_noise_bound(activations, sigma2, held_out=0.5, seed=0, chunk=512):
    """Upper bound on I(x; h + noise) for Gaussian noise of variance ``sigma2``.

    A Gaussian mixture with bandwidth^2 = ``sigma2`` centred on one split
    scores freshly noised activations from the other split; the noise
    entropy (D/2) ln(2 pi e sigma2) is subtracted from that cross entropy.
    """
    a = np.asarray(activations, dtype=np.float64)
    a = a.reshape(len(a), -1)
    n, d = a.shape
    if sigma2 <= 0:
        raise ValueError("noise variance must be positive")
    if n < 2:
        raise ValueError("the KDE bound needs at least two samples")
    rng = np.random.default_rng([seed, 7])
    order = rng.permutation(n)
    n_eval = int(round(n * held_out))
    if n_eval < 1 or n_eval >= n:
        raise ValueError(f"held-out fraction {held_out} leaves an empty split of {n} samples")
    centres, scored = a[order[n_eval:]], a[order[:n_eval]]
    y = scored + math.sqrt(sigma2) * rng.standard_normal(scored.shape)
    c_sq = np.einsum("ij,ij->i", centres, centres)
    norm = -0.5 * d * math.log(2 * math.pi * sigma2) - math.log(len(centres))
    logp = np.empty(n_eval)
    for start in range(0, n_eval, chunk):
        yb = y[start:start + chunk]
        d2 = np.einsum("ij,ij->i", yb, yb)[:, None] + c_sq[None, :] - 2.0 * yb @ centres.T
        logp[start:start + chunk] = logsumexp(-0.5 * np.maximum(d2, 0.0) / sigma2, axis=1) + norm
    noise_entropy = 0.5 * d * math.log(2 * math.pi * math.e * sigma2)
    nll = -logp
    return MIEstimate(
        float(nll.mean() - noise_entropy),
        "kde_upper_bound",
        n,
        stderr=float(nll.std(ddof=1) / math.sqrt(n_eval)) if n_eval > 1 else None,
        sigma2=float(sigma2),
        dims=int(d),
    )


def relative_to(values, reference):
    """Each value divided by ``reference`` (CONV1-relative NCE)."""
    return {key: v / reference for key, v in values.items()}
