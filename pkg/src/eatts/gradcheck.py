"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    rel_errors: dict
    analytic: dict
    numeric: dict
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance

    def __bool__(self):
        return self.passed


def relative_error(a, b, floor=1e-8):
    """Elementwise ``|a-b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(f, point, h=1e-6, tolerance=1e-6, floor=1e-8):
    """Compare the tape gradient of scalar ``f`` with central differences.

    ``point`` is a dict of name -> array (or a single array).  ``f`` receives
    a dict of float64 tensors with the same keys (or a single tensor) and
    must return a scalar tensor.  The report is always produced; callers
    read ``report.passed``.
    """
    single = not isinstance(point, dict)
    values = {"x": point} if single else point
    values = {k: np.array(v, dtype=np.float64) for k, v in values.items()}

    def call(vals, track):
        tensors = {k: Tensor(v.copy(), requires_grad=track) for k, v in vals.items()}
        out = f(tensors["x"] if single else tensors)
        return out, tensors

    loss, tensors = call(values, True)
    analytic = backward(loss, params=tensors)

    numeric = {}
    for name, v in values.items():
        num = np.zeros_like(v)
        flat = num.reshape(-1)
        for idx in range(v.size):
            plus = {k: a.copy() for k, a in values.items()}
            minus = {k: a.copy() for k, a in values.items()}
            plus[name].reshape(-1)[idx] += h
            minus[name].reshape(-1)[idx] -= h
            fp = float(call(plus, False)[0].data)
            fm = float(call(minus, False)[0].data)
            flat[idx] = (fp - fm) / (2.0 * h)
        numeric[name] = num

    rel = {k: relative_error(analytic[k], numeric[k], floor) for k in values}
    worst = max((float(r.max()) if r.size else 0.0) for r in rel.values())
    return GradCheckReport(worst, rel, analytic, numeric, tolerance)
