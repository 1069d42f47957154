"""Parameter containers and layers built on the autodiff primitives."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def uniform_init(rng, shape, fan_in, dtype=np.float32):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_lstm(params, rng, prefix, d_in, d_h, dtype=np.float32):
    """Gates ordered (i, f, g, o); the forget-gate bias starts at +1."""
    params[prefix + "W"] = Tensor(uniform_init(rng, (d_in, 4 * d_h), d_in, dtype), requires_grad=True)
    params[prefix + "U"] = Tensor(uniform_init(rng, (d_h, 4 * d_h), d_h, dtype), requires_grad=True)
    b = uniform_init(rng, (4 * d_h,), d_h, dtype)
    b[d_h:2 * d_h] = 1.0
    params[prefix + "b"] = Tensor(b, requires_grad=True)
    for k in ("W", "U", "b"):
        params[prefix + k].name = prefix + k


def init_linear(params, rng, prefix, d_in, d_out, dtype=np.float32):
    params[prefix + "W"] = Tensor(uniform_init(rng, (d_in, d_out), d_in, dtype), requires_grad=True, name=prefix + "W")
    params[prefix + "b"] = Tensor(uniform_init(rng, (d_out,), d_in, dtype), requires_grad=True, name=prefix + "b")


def linear(x, params, prefix):
    return ad.matmul(x, params[prefix + "W"]) + params[prefix + "b"]


def lstm_sequence(xs, params, prefix, h0=None, c0=None):
    """Run one LSTM layer over a list of ``(B, d_in)`` inputs.

    Returns the list of hidden states and the final cell state.
    """
    W, U, b = params[prefix + "W"], params[prefix + "U"], params[prefix + "b"]
    d_h = U.shape[0]
    batch = xs[0].shape[0]
    dtype = W.dtype
    h = h0 if h0 is not None else Tensor(np.zeros((batch, d_h), dtype=dtype))
    c = c0 if c0 is not None else Tensor(np.zeros((batch, d_h), dtype=dtype))
    hs = []
    for x in xs:
        h, c = ad.lstm_cell(x, h, c, W, U, b)
        hs.append(h)
    return hs, c


def trainable(params):
    return {k: p for k, p in params.items() if p.requires_grad}


def to_arrays(params):
    return {k: np.array(p.data, copy=True) for k, p in params.items()}


def from_arrays(arrays, requires_grad=True):
    return {k: Tensor(np.array(v, copy=True), requires_grad=requires_grad, name=k) for k, v in arrays.items()}


def freeze(params):
    for p in params.values():
        p.requires_grad = False
        p.grad = None
