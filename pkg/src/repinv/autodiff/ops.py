"""Primitive operations for the computation graph.

Every op is a pair of functions registered in ``OPS``:

* ``forward(ctx, attrs, *inputs) -> (output, cache)``
* ``backward(attrs, cache, grad_output, need) -> tuple of input gradients``

``need`` flags which parents want a gradient; ops may skip the others.

A ``None`` entry in the returned tuple means "no gradient flows to this
parent" (integer targets, reference tensors). Spatial tensors use NHWC
layout throughout; convolution weights are ``(k, k, C_in, C_out)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class OpDef:
    forward: Callable
    backward: Callable
    differentiable: bool = True


OPS: dict[str, OpDef] = {}


def register(name, differentiable=True):
    def wrap(cls):
        OPS[name] = OpDef(cls.forward, cls.backward, differentiable)
        return cls

    return wrap


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------


def causal_mask(kernel_size, c_in, c_out, kind, groups=1):
    """Raster-order mask for a ``(k, k, c_in, c_out)`` convolution kernel.

    Taps strictly above the centre row, or left of centre on the centre row,
    are always open. At the centre tap, channels are split into ``groups``
    contiguous colour groups (R, G, B for ``groups=3``): output group ``g``
    sees input groups ``< g`` for mask ``A`` and ``<= g`` for mask ``B``.
    """
    if kind not in ("A", "B"):
        raise ValueError(f"unknown mask kind {kind!r}; expected 'A' or 'B'")
    if kernel_size % 2 == 0 or kernel_size < 1:
        raise ValueError(f"masked convolution needs an odd kernel size, got {kernel_size}")
    if c_in % groups or c_out % groups:
        raise ValueError(f"channels ({c_in}, {c_out}) not divisible into {groups} groups")
    k = kernel_size
    c = k // 2
    mask = np.zeros((k, k, c_in, c_out))
    mask[:c, :, :, :] = 1.0
    mask[c, :c, :, :] = 1.0
    gin = np.arange(c_in) * groups // c_in
    gout = np.arange(c_out) * groups // c_out
    if kind == "A":
        centre = gin[:, None] < gout[None, :]
    else:
        centre = gin[:, None] <= gout[None, :]
    mask[c, c] = centre.astype(np.float64)
    return mask


# ---------------------------------------------------------------------------
# Leaves
# ---------------------------------------------------------------------------


@register("input")
class _Input:
    @staticmethod
    def forward(ctx, attrs):
        raise AssertionError("leaf nodes are bound by the evaluator")

    @staticmethod
    def backward(attrs, cache, g, need=None):
        return ()


OPS["param"] = OPS["input"]


# ---------------------------------------------------------------------------
# Dense / elementwise
# ---------------------------------------------------------------------------


@register("dense")
class _Dense:
    @staticmethod
    def forward(ctx, attrs, x, w, b):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
            raise ValueError(f"dense shapes x{x.shape} w{w.shape} b{b.shape}")
        return x @ w + b, (x, w)

    @staticmethod
    def backward(attrs, cache, g, need=None):
        x, w = cache
        return g @ w.T, x.T @ g, g.sum(axis=0)


@register("add")
class _Add:
    @staticmethod
    def forward(ctx, attrs, a, b):
        out = a + b
        if out.shape != a.shape:
            raise ValueError(f"add would broadcast the left operand {a.shape} to {out.shape}")
        return out, (a.shape, b.shape)

    @staticmethod
    def backward(attrs, cache, g, need=None):
        sa, sb = cache
        return unbroadcast(g, sa), unbroadcast(g, sb)


@register("add_cropped")
class _AddCropped:
    """``x + b[..., :H, :W, :]``: a spatial bias map that may be larger than ``x``.

    Lets a model built for full-size images run on a top-rows crop.
    """

    @staticmethod
    def forward(ctx, attrs, x, b):
        if x.ndim != 4 or b.ndim not in (3, 4):
            raise ValueError(f"add_cropped expects NHWC x and HWC/NHWC bias, got {x.shape}, {b.shape}")
        h, w = x.shape[1:3]
        if b.shape[-3] < h or b.shape[-2] < w or b.shape[-1] != x.shape[-1]:
            raise ValueError(f"bias map {b.shape} cannot cover {x.shape}")
        crop = b[..., :h, :w, :]
        return x + crop, b.shape

    @staticmethod
    def backward(attrs, cache, g, need=None):
        bshape = cache
        h, w = g.shape[1:3]
        gb = np.zeros(bshape)
        if len(bshape) == 3:
            gb[:h, :w, :] = g.sum(axis=0)
        else:
            gb[:, :h, :w, :] = unbroadcast(g, (bshape[0], h, w, bshape[3]))
        return g, gb


@register("scale")
class _Scale:
    @staticmethod
    def forward(ctx, attrs, x):
        return x * attrs["factor"], None

    @staticmethod
    def backward(attrs, cache, g, need=None):
        return (g * attrs["factor"],)


@register("relu")
class _Relu:
    @staticmethod
    def forward(ctx, attrs, x):
        active = x > 0
        return np.where(active, x, 0.0), active

    @staticmethod
    def backward(attrs, cache, g, need=None):
        # subgradient at exactly 0 is 0
        return (np.where(cache, g, 0.0),)


@register("dropout")
class _Dropout:
    @staticmethod
    def forward(ctx, attrs, x):
        rate = attrs["rate"]
        if ctx.mode != "train" or rate == 0.0:
            return x, None
        keep = ctx.rng().random(x.shape) >= rate
        scale = keep / (1.0 - rate)
        return x * scale, scale

    @staticmethod
    def backward(attrs, cache, g, need=None):
        if cache is None:
            return (g,)
        return (g * cache,)


@register("reshape")
class _Reshape:
    @staticmethod
    def forward(ctx, attrs, x):
        return x.reshape((x.shape[0],) + tuple(attrs["shape"])), x.shape

    @staticmethod
    def backward(attrs, cache, g, need=None):
        return (g.reshape(cache),)


# ---------------------------------------------------------------------------
# Convolution and pooling
# ---------------------------------------------------------------------------


def tap_blocks(mask, k):
    """Rectangular tap blocks ``(r0, r1, c0, c1)`` covering every unmasked tap.

    A raster mask splits into the full rows above the centre plus the left
    part of the centre row, so masked kernels skip the zero taps entirely.
    """
    if mask is None:
        return [(0, k, 0, k)]
    open_taps = mask.any(axis=(2, 3))
    blocks = []
    rows = [r for r in range(k) if open_taps[r].all()]
    if rows:
        if rows != list(range(len(rows))):
            raise ValueError("mask rows are not a raster prefix")
        blocks.append((0, len(rows), 0, k))
    for r in range(len(rows), k):
        cols = np.flatnonzero(open_taps[r])
        if len(cols) == 0:
            continue
        if list(cols) != list(range(len(cols))):
            raise ValueError("mask row is not a raster prefix")
        blocks.append((r, r + 1, 0, len(cols)))
    return blocks


def _windows(xp, block, out_hw):
    """im2col for one tap block: ``(N*Ho*Wo, C*bh*bw)`` copy of the windows."""
    r0, r1, c0, c1 = block
    ho, wo = out_hw
    bh, bw = r1 - r0, c1 - c0
    sub = xp[:, r0:r0 + ho + bh - 1, c0:c0 + wo + bw - 1, :]
    view = np.lib.stride_tricks.sliding_window_view(sub, (bh, bw), axis=(1, 2))
    return view.reshape(xp.shape[0] * ho * wo, -1)


def _block_weights(w, block):
    r0, r1, c0, c1 = block
    wb = w[r0:r1, c0:c1]
    return wb.transpose(2, 0, 1, 3).reshape(-1, w.shape[3])


def _correlate(xp, w, blocks, keep_cols=False):
    """Valid cross-correlation of NHWC ``xp`` with ``w`` restricted to ``blocks``."""
    k = w.shape[0]
    n = xp.shape[0]
    ho, wo = xp.shape[1] - k + 1, xp.shape[2] - k + 1
    out = None
    cols = []
    for block in blocks:
        c = _windows(xp, block, (ho, wo))
        part = c @ _block_weights(w, block)
        out = part if out is None else out + part
        if keep_cols:
            cols.append(c)
    return out.reshape(n, ho, wo, w.shape[3]), cols


@register("conv2d")
class _Conv2d:
    @staticmethod
    def forward(ctx, attrs, x, w):
        if x.ndim != 4 or w.ndim != 4:
            raise ValueError(f"conv2d expects NHWC input and (k,k,Cin,Cout) kernel, got {x.shape}, {w.shape}")
        k = w.shape[0]
        if w.shape[1] != k:
            raise ValueError(f"non-square kernel {w.shape[:2]}")
        if x.shape[3] != w.shape[2]:
            raise ValueError(f"input has {x.shape[3]} channels, kernel expects {w.shape[2]}")
        padding = attrs["padding"]
        if padding == "same":
            if k % 2 == 0:
                raise ValueError(f"'same' padding needs an odd kernel, got {k}")
            pad = k // 2
        elif padding == "valid":
            pad = 0
        else:
            raise ValueError(f"unknown padding {padding!r}")
        mask = attrs.get("mask")
        if mask is not None:
            w = w * mask
        n, h, wd, c = x.shape
        if pad:
            xp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c))
            xp[:, pad:pad + h, pad:pad + wd, :] = x
        else:
            xp = x
        if xp.shape[1] < k or xp.shape[2] < k:
            raise ValueError(f"kernel {k} larger than padded input {xp.shape[1:3]}")
        blocks = tap_blocks(mask, k)
        out, cols = _correlate(xp, w, blocks, keep_cols=True)
        return out, (cols, blocks, w, pad, x.shape)

    @staticmethod
    def backward(attrs, cache, g, need=None):
        cols, blocks, w, pad, xshape = cache
        k, _, c, f = w.shape
        g2 = g.reshape(-1, f)
        dw = np.zeros(w.shape)
        for block, col in zip(blocks, cols):
            r0, r1, c0, c1 = block
            dw[r0:r1, c0:c1] = (col.T @ g2).reshape(c, r1 - r0, c1 - c0, f).transpose(1, 2, 0, 3)
        mask = attrs.get("mask")
        if mask is not None:
            dw *= mask
        if need is not None and not need[0]:
            return None, dw
        # input gradient: correlate g, padded by k-1-pad, with the flipped kernel
        n, ho, wo, _ = g.shape
        q = k - 1 - pad
        gp = np.zeros((n, ho + 2 * q, wo + 2 * q, f))
        gp[:, q:q + ho, q:q + wo, :] = g
        wf = w[::-1, ::-1].transpose(0, 1, 3, 2)
        flipped = [(k - r1, k - r0, k - c1, k - c0) for r0, r1, c0, c1 in blocks]
        dx, _ = _correlate(gp, wf, flipped)
        return dx, dw


@register("maxpool2")
class _MaxPool2:
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped."""

    @staticmethod
    def forward(ctx, attrs, x):
        n, h, w, c = x.shape
        h2, w2 = h // 2, w // 2
        if h2 == 0 or w2 == 0:
            raise ValueError(f"cannot 2x2-pool a {h}x{w} map")
        win = x[:, :2 * h2, :2 * w2, :].reshape(n, h2, 2, w2, 2, c)
        win = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, (idx, x.shape)

    @staticmethod
    def backward(attrs, cache, g, need=None):
        idx, shape = cache
        n, h, w, c = shape
        h2, w2 = h // 2, w // 2
        onehot = np.zeros(idx.shape + (4,))
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        onehot = onehot.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        dx = np.zeros(shape)
        dx[:, :2 * h2, :2 * w2, :] = onehot.reshape(n, 2 * h2, 2 * w2, c)
        return (dx,)


@register("global_maxpool")
class _GlobalMaxPool:
    @staticmethod
    def forward(ctx, attrs, x):
        n, h, w, c = x.shape
        flat = x.reshape(n, h * w, c)
        idx = flat.argmax(axis=1)
        out = np.take_along_axis(flat, idx[:, None, :], axis=1)[:, 0, :]
        return out, (idx, x.shape)

    @staticmethod
    def backward(attrs, cache, g, need=None):
        idx, shape = cache
        n, h, w, c = shape
        dflat = np.zeros((n, h * w, c))
        np.put_along_axis(dflat, idx[:, None, :], g[:, None, :], axis=1)
        return (dflat.reshape(shape),)


def nearest_index(n_in, n_out):
    return (np.arange(n_out) * n_in) // n_out


@register("resize_nearest")
class _ResizeNearest:
    @staticmethod
    def forward(ctx, attrs, x):
        ho, wo = attrs["size"]
        n, h, w, c = x.shape
        ri, ci = nearest_index(h, ho), nearest_index(w, wo)
        return x[:, ri][:, :, ci], (ri, ci, x.shape)

    @staticmethod
    def backward(attrs, cache, g, need=None):
        ri, ci, shape = cache
        # one-hot selection matrices: exact, and summation order is fixed
        rsel = np.zeros((len(ri), shape[1]))
        rsel[np.arange(len(ri)), ri] = 1.0
        csel = np.zeros((len(ci), shape[2]))
        csel[np.arange(len(ci)), ci] = 1.0
        dx = np.einsum("ah,nabc->nhbc", rsel, g)
        dx = np.einsum("bw,nhbc->nhwc", csel, dx)
        return (dx,)


# ---------------------------------------------------------------------------
# Losses and reductions
# ---------------------------------------------------------------------------


def log_softmax(x, axis=-1):
    shift = x - x.max(axis=axis, keepdims=True)
    return shift - np.log(np.exp(shift).sum(axis=axis, keepdims=True))


@register("log_softmax")
class _LogSoftmax:
    @staticmethod
    def forward(ctx, attrs, x):
        out = log_softmax(x, axis=-1)
        return out, out

    @staticmethod
    def backward(attrs, cache, g, need=None):
        return (g - np.exp(cache) * g.sum(axis=-1, keepdims=True),)


@register("softmax_xent")
class _SoftmaxXent:
    """Mean softmax cross entropy of ``(N, K)`` logits against integer labels."""

    @staticmethod
    def forward(ctx, attrs, logits, labels):
        labels = labels.astype(np.int64)
        if logits.ndim != 2 or labels.shape != (logits.shape[0],):
            raise ValueError(f"softmax_xent shapes {logits.shape} vs labels {labels.shape}")
        if labels.min() < 0 or labels.max() >= logits.shape[1]:
            raise ValueError("label out of range")
        lp = log_softmax(logits)
        n = logits.shape[0]
        loss = -lp[np.arange(n), labels].mean()
        return np.asarray(loss), (lp, labels)

    @staticmethod
    def backward(attrs, cache, g, need=None):
        lp, labels = cache
        n = lp.shape[0]
        d = np.exp(lp)
        d[np.arange(n), labels] -= 1.0
        return d * (g / n), None


@register("categorical_nll")
class _CategoricalNll:
    """Per-example negative log-likelihood of integer images.

    ``logits`` is ``(N, H, W, C*L)`` with the ``L`` logits of channel ``c``
    at ``[..., c*L:(c+1)*L]``; ``targets`` is ``(N, H, W, C)``. Output is the
    ``(N,)`` vector of nats summed over every pixel and channel.
    """

    @staticmethod
    def forward(ctx, attrs, logits, targets):
        levels = attrs["levels"]
        n, h, w, cl = logits.shape
        if targets.shape[:3] != (n, h, w) or cl != targets.shape[3] * levels:
            raise ValueError(f"categorical_nll shapes {logits.shape} vs targets {targets.shape}, L={levels}")
        t = targets.astype(np.int64)
        if t.min() < 0 or t.max() >= levels:
            raise ValueError(f"target value outside [0, {levels - 1}]")
        lp = log_softmax(logits.reshape(n, h, w, targets.shape[3], levels))
        picked = np.take_along_axis(lp, t[..., None], axis=-1)[..., 0]
        return -picked.reshape(n, -1).sum(axis=1), (lp, t, logits.shape)

    @staticmethod
    def backward(attrs, cache, g, need=None):
        lp, t, shape = cache
        d = np.exp(lp)
        np.put_along_axis(d, t[..., None], np.take_along_axis(d, t[..., None], axis=-1) - 1.0, axis=-1)
        d *= g[:, None, None, None, None]
        return d.reshape(shape), None


@register("mse")
class _Mse:
    """Mean squared error over every element."""

    @staticmethod
    def forward(ctx, attrs, pred, target):
        if pred.shape != target.shape:
            raise ValueError(f"mse shapes {pred.shape} vs {target.shape}")
        diff = pred - target
        return np.asarray(np.mean(diff * diff)), diff

    @staticmethod
    def backward(attrs, cache, g, need=None):
        d = cache * (2.0 * g / cache.size)
        return d, -d


@register("mean")
class _Mean:
    @staticmethod
    def forward(ctx, attrs, x):
        return np.asarray(x.mean()), x.shape

    @staticmethod
    def backward(attrs, cache, g, need=None):
        size = int(np.prod(cache))
        return (np.full(cache, g / size),)


@register("sum")
class _Sum:
    @staticmethod
    def forward(ctx, attrs, x):
        return np.asarray(x.sum()), x.shape

    @staticmethod
    def backward(attrs, cache, g, need=None):
        return (np.full(cache, g * 1.0),)


@register("square")
class _Square:
    @staticmethod
    def forward(ctx, attrs, x):
        return x * x, x

    @staticmethod
    def backward(attrs, cache, g, need=None):
        return (2.0 * cache * g,)


# ---------------------------------------------------------------------------
# Sampling (not differentiable)
# ---------------------------------------------------------------------------


@register("sample_categorical", differentiable=False)
class _SampleCategorical:
    """Draw one index per row of the last axis from softmax(logits)."""

    @staticmethod
    def forward(ctx, attrs, logits):
        p = np.exp(log_softmax(logits))
        cdf = np.cumsum(p, axis=-1)
        u = ctx.rng().random(logits.shape[:-1] + (1,))
        idx = (u > cdf).sum(axis=-1)
        return np.minimum(idx, logits.shape[-1] - 1).astype(np.float64), None

    @staticmethod
    def backward(attrs, cache, g, need=None):
        raise AssertionError("unreachable: guarded by the evaluator")
