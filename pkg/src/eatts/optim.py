"""Adam optimiser over named :class:`~eatts.autodiff.Tensor` parameters."""

from __future__ import annotations

import numpy as np

from .exceptions import DimensionError, NumericFaultError


class AdamState:
    """First/second moments and step count for a fixed parameter set."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(params, grads, state):
    """Apply one bias-corrected Adam update in place.

    ``params`` maps names to tensors, ``grads`` names to arrays (a missing
    entry counts as a zero gradient).  Non-finite gradients raise before any
    parameter is touched.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericFaultError(f"non-finite gradient for parameter {name!r}", name=name)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        p.data -= update.astype(p.data.dtype, copy=False)
    return params, state


class Adam:
    """Convenience wrapper pairing a parameter dict with its :class:`AdamState`."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.state = AdamState(params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {k: p.grad for k, p in self.params.items()}
        adam_step(self.params, grads, self.state)
