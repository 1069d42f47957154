"""Generalised end-to-end loss over grouped embeddings.

Embeddings arrive as a ``(g * u, d)`` matrix whose rows are grouped
contiguously: rows ``i*u .. i*u+u-1`` belong to group ``i`` (a speaker or an
environment).  Each row is scored against every group centroid with a
scaled cosine; against its own group the centroid leaves the row out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import EPS_NORM, Tensor, as_tensor
from .exceptions import DegenerateVectorError, DimensionError, ParameterError

W_INIT = 10.0
B_INIT = -5.0
W_MIN = 1e-4


@dataclass
class Ge2eScale:
    """Trainable affine map ``w * cos + b`` applied to cosine similarities."""

    w: Tensor
    b: Tensor

    @classmethod
    def create(cls, w=W_INIT, b=B_INIT, dtype=np.float32):
        return cls(
            Tensor(np.array([w], dtype=dtype), requires_grad=True, name="ge2e_w"),
            Tensor(np.array([b], dtype=dtype), requires_grad=True, name="ge2e_b"),
        )

    def clamp(self):
        np.maximum(self.w.data, W_MIN, out=self.w.data)


@dataclass
class EmbeddingBatch:
    embeddings: np.ndarray
    n_groups: int

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings)
        _check_layout(self.embeddings.shape, self.n_groups)
        norms = np.linalg.norm(self.embeddings, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-5):
            raise ParameterError("embedding rows must be unit-norm")

    @property
    def n_utts(self):
        return self.embeddings.shape[0] // self.n_groups


def _check_layout(shape, n_groups):
    if len(shape) != 2:
        raise DimensionError(f"embeddings must be (g*u, d), got shape {shape}")
    if n_groups < 1 or shape[0] % n_groups:
        raise DimensionError(f"{shape[0]} rows cannot be split into {n_groups} equal groups")
    u = shape[0] // n_groups
    if u < 2:
        raise ParameterError("leave-one-out centroids need at least two utterances per group")
    return u


def _rows(embeddings):
    return embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings)


def centroid_full(embeddings, n_groups, i):
    """Mean of group ``i``'s rows (not renormalised)."""
    e = _rows(embeddings)
    u = _check_layout(e.shape, n_groups)
    if not 0 <= i < n_groups:
        raise IndexError(f"group index {i} out of range for {n_groups} groups")
    return e[i * u:(i + 1) * u].mean(axis=0)


def centroid_loo(embeddings, n_groups, i, j):
    """Mean of group ``i`` with its ``j``-th row excluded."""
    e = _rows(embeddings)
    u = _check_layout(e.shape, n_groups)
    if not 0 <= i < n_groups or not 0 <= j < u:
        raise IndexError(f"(group, utterance) = ({i}, {j}) out of range for {n_groups} x {u}")
    block = e[i * u:(i + 1) * u]
    return (block.sum(axis=0) - block[j]) / (u - 1)


def _norm(x, axis):
    return ad.power(ad.tsum(x * x, axis=axis, keepdims=True), 0.5)


def similarity_matrix(embeddings, n_groups, w, b):
    """``(g*u, g)`` matrix of ``w * cos(E_ij, C_k) + b``.

    For ``k == i`` the leave-one-out centroid of group ``i`` is used.
    Cosines divide by ``(|a| + eps)(|b| + eps)``; a centroid that is exactly
    zero raises :class:`DegenerateVectorError`.
    """
    e = as_tensor(embeddings)
    w = as_tensor(w, dtype=e.dtype)
    b = as_tensor(b, dtype=e.dtype)
    if np.any(w.data <= 0):
        raise ParameterError("similarity scale w must be positive")
    n, d = e.shape
    u = _check_layout(e.shape, n_groups)
    g = n_groups

    e3 = ad.reshape(e, (g, u, d))
    group_sum = ad.tsum(e3, axis=1, keepdims=True)  # (g, 1, d)
    centroids = ad.reshape(group_sum, (g, d)) * (1.0 / u)
    loo = (group_sum - e3) * (1.0 / (u - 1))  # (g, u, d)
    if np.any(np.linalg.norm(centroids.data, axis=1) <= EPS_NORM) or np.any(
        np.linalg.norm(loo.data, axis=2) <= EPS_NORM
    ):
        raise DegenerateVectorError("a group centroid has zero norm")

    e_norm = _norm(e, axis=1) + EPS_NORM  # (n, 1)
    c_norm = _norm(centroids, axis=1) + EPS_NORM  # (g, 1)
    cos_all = ad.matmul(e / e_norm, ad.transpose(centroids / c_norm))  # (n, g)

    own_dot = ad.tsum(e3 * loo, axis=2)  # (g, u)
    loo_norm = ad.reshape(_norm(loo, axis=2), (g, u)) + EPS_NORM
    own_den = ad.reshape(e_norm, (g, u)) * loo_norm
    cos_own = ad.reshape(own_dot / own_den, (n, 1))

    mask = np.zeros((n, g), dtype=e.dtype)
    mask[np.arange(n), np.arange(n) // u] = 1.0
    cos = cos_all * (1.0 - mask) + cos_own * mask
    return cos * w + b


def ge2e_loss(embeddings, n_groups, w, b, reduction="sum"):
    """Softmax GE2E loss: ``sum_ij -log softmax_k(S_ij,k)[i]``.

    ``reduction="mean"`` divides by ``g*u`` (the trainer's scale-free form);
    the reported loss is the sum.
    """
    s = similarity_matrix(embeddings, n_groups, w, b)
    n = s.shape[0]
    u = n // n_groups
    target = np.arange(n) // u
    return ad.softmax_cross_entropy(s, target, reduction=reduction)


def ge2e_loss_value(embeddings, n_groups, w=W_INIT, b=B_INIT):
    """Float loss for plain arrays, evaluated in float64 without a graph."""
    with ad.no_grad():
        e = Tensor(np.asarray(_rows(embeddings), dtype=np.float64))
        return float(ge2e_loss(e, n_groups, float(w), float(b)).data)
