"""AdamW with decoupled weight decay on the numpy substrate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamWState:
    """Optimizer hyperparameters plus per-parameter moment buffers.

    Buffers are keyed by parameter name and allocated on first use, so one
    state object can serve a parameter dict that never changes shape.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], state: AdamWState) -> None:
    """Apply one AdamW update in place to every parameter with a gradient.

    Weight decay is decoupled: each touched parameter is first shrunk by
    ``lr * weight_decay`` and only then moved along the bias-corrected
    Adam direction. Parameters whose grad is None are skipped entirely
    (no decay, no moment update). A non-finite gradient anywhere aborts
    the whole step before any parameter changes.
    """
    live = [(name, p) for name, p in params.items() if p.grad is not None]
    for name, p in live:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in live:
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        m, v = state.m[name], state.v[name]
        p.values *= 1.0 - state.lr * state.weight_decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.values -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
