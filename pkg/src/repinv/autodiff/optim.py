"""Adam optimizer and parameter initialisers."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam update.

    Args:
        params: arrays keyed by slot name.
        grads: gradients with the same keys and shapes.
        state: moments after ``state.t`` completed steps; missing moment
            entries are treated as zeros.

    Returns:
        ``(new_params, new_state)``. Inputs are not modified.
    """
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, dataclasses.replace(state, t=t, m=new_m, v=new_v)


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def conv_init(rng, k, c_in, c_out):
    return glorot_uniform(rng, (k, k, c_in, c_out), k * k * c_in, k * k * c_out)


def dense_init(rng, d_in, d_out):
    return glorot_uniform(rng, (d_in, d_out), d_in, d_out)
