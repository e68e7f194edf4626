"""Adam with bias correction, functional style."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class AdamError(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, inplace: bool = False) -> tuple[dict[str, np.ndarray], AdamState]:
    """Return updated parameters and a new state.

    By default the inputs are left untouched.  With ``inplace=True`` the
    parameter arrays and the moment buffers of ``state`` are overwritten,
    which saves the allocations of a large model's worth of arrays per step.
    """
    bad = [k for k in params if not np.isfinite(np.sum(grads[k]))]
    if bad:
        raise AdamError(f"non-finite gradient for: {', '.join(sorted(bad))}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        m, v = state.m.get(k), state.v.get(k)
        if m is None or not inplace:
            m = np.zeros(p.shape) if m is None else m.copy()
            v = np.zeros(p.shape) if v is None else v.copy()
        tmp = np.multiply(g, 1.0 - b1, out=np.empty(p.shape))
        m *= b1
        m += tmp
        np.square(g, out=tmp)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        np.sqrt(v, out=tmp)
        tmp *= 1.0 / np.sqrt(c2)
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= state.lr / c1
        if inplace and isinstance(p, np.ndarray) and p.dtype == np.float64 and p.flags.writeable:
            p -= tmp
            new_p[k] = p
        else:
            new_p[k] = np.subtract(p, tmp, out=tmp)
        new_m[k] = m
        new_v[k] = v
    new_state = AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)
    return new_p, new_state
