"""Adam with bias correction, operating in place on named parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError, ShapeError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params, grads, state: AdamState):
    """One Adam update of ``params`` (name -> Tensor or ndarray), in place.

    Missing gradients count as zero. Returns ``params`` for chaining.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            bad = int(np.flatnonzero(~np.isfinite(g).ravel())[0])
            raise NumericError(f"adam_step: non-finite gradient for parameter {name!r} (flat index {bad})")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        arr = p.data if hasattr(p, "data") and not isinstance(p, np.ndarray) else p
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(arr)
        elif g.shape != arr.shape:
            raise ShapeError(f"adam_step: gradient for {name!r} has shape {g.shape}, parameter {arr.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        arr -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
