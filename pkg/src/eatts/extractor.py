"""LSTM embedding extractor trained with the GE2E loss.

The same architecture serves as speaker and as environment extractor; only
the grouping of the training data differs.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import autodiff as ad
from . import checkpoint, nn
from .autodiff import Tensor
from .corpus import _group_of, sample_group_crops
from .exceptions import DimensionError, NumericFaultError
from .ge2e import Ge2eScale, ge2e_loss
from .optim import Adam
from .utils import stable_seed
from .validation import check_labels, check_mel, check_mel_list, require_fitted

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExtractorConfig:
    n_lstm_layers: int = 2
    hidden_dim: int = 64
    embed_dim: int = 32
    crop_frames: int = 80
    s_groups: int = 8
    u_per_group: int = 4
    crop_norm: bool = False

    @classmethod
    def paper(cls):
        return cls(n_lstm_layers=3, hidden_dim=256, embed_dim=256, crop_frames=80, s_groups=64, u_per_group=10)


class EmbeddingExtractor(TransformerMixin, BaseEstimator):
    """Maps log-mel spectrograms to unit-norm embeddings.

    Parameters
    ----------
    n_lstm_layers, hidden_dim, embed_dim : int
        Unidirectional LSTM stack followed by one linear layer.
    crop_frames : int
        Frames per training crop and per inference window.
    s_groups, u_per_group : int
        Groups and utterances per group in each GE2E batch.
    n_steps : int
        Optimiser steps taken by :meth:`fit`.
    learning_rate : float
        Adam step size.
    crop_norm : bool
        Subtract each crop's time average per mel channel before the
        network sees it.  This removes static colouring (the room's
        frequency response and most of the speaker's timbre) and leaves the
        temporal smearing that reverberation adds.
    random_state : int
        Seeds parameter initialisation and batch sampling.
    """

    def __init__(self, n_lstm_layers=2, hidden_dim=64, embed_dim=32, crop_frames=80, s_groups=8,
                 u_per_group=4, n_steps=300, learning_rate=1e-3, n_mels=80, crop_norm=False, random_state=0):
        self.n_lstm_layers = n_lstm_layers
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.crop_frames = crop_frames
        self.s_groups = s_groups
        self.u_per_group = u_per_group
        self.n_steps = n_steps
        self.learning_rate = learning_rate
        self.n_mels = n_mels
        self.crop_norm = crop_norm
        self.random_state = random_state

    @classmethod
    def from_config(cls, config, **kw):
        return cls(**asdict(config), **kw)

    # -- parameters ---------------------------------------------------------------
    def initialize(self, mel_mean=None, mel_std=None):
        """Fresh parameters; normalisation statistics default to identity."""
        rng = np.random.default_rng(stable_seed("extractor-init", self.random_state))
        params = {}
        d_in = self.n_mels
        for layer in range(self.n_lstm_layers):
            nn.init_lstm(params, rng, f"lstm{layer}_", d_in, self.hidden_dim)
            d_in = self.hidden_dim
        nn.init_linear(params, rng, "proj_", self.hidden_dim, self.embed_dim)
        self.params_ = params
        self.scale_ = Ge2eScale.create()
        self.mel_mean_ = np.zeros(self.n_mels, np.float32) if mel_mean is None else np.asarray(mel_mean, np.float32)
        self.mel_std_ = np.ones(self.n_mels, np.float32) if mel_std is None else np.asarray(mel_std, np.float32)
        self.loss_trace_ = []
        return self

    def all_params(self):
        require_fitted(self, "params_")
        out = dict(self.params_)
        out["ge2e_w"] = self.scale_.w
        out["ge2e_b"] = self.scale_.b
        return out

    def set_trainable(self, flag):
        for p in self.all_params().values():
            p.requires_grad = flag
            p.grad = None

    # -- forward -------------------------------------------------------------------
    def _normalise(self, crops):
        if self.crop_norm:
            crops = crops - crops.mean(axis=1, keepdims=True)
        return (crops - self.mel_mean_) / self.mel_std_

    def embed_crops(self, crops):
        """Tape-tracked embeddings of a ``(B, crop_frames, n_mels)`` batch."""
        crops = np.asarray(crops, dtype=np.float32)
        if crops.ndim != 3 or crops.shape[1] != self.crop_frames or crops.shape[2] != self.n_mels:
            raise DimensionError(
                f"crops must have shape (B, {self.crop_frames}, {self.n_mels}), got {crops.shape}"
            )
        x = self._normalise(crops)
        xs = [Tensor(x[:, t, :]) for t in range(x.shape[1])]
        for layer in range(self.n_lstm_layers):
            xs, _ = nn.lstm_sequence(xs, self.params_, f"lstm{layer}_")
        pre = nn.linear(xs[-1], self.params_, "proj_")
        return ad.l2_normalize(pre, axis=-1)

    def forward_crop(self, crop):
        """Embedding of one ``(crop_frames, n_mels)`` segment."""
        require_fitted(self, "params_")
        crop = check_mel(crop, self.n_mels, name="crop")
        if crop.shape[0] != self.crop_frames:
            raise DimensionError(f"crop must have exactly {self.crop_frames} frames, got {crop.shape[0]}")
        with ad.no_grad():
            return self.embed_crops(crop[None])[0].data.copy()

    def window_starts(self, n_frames):
        """Window offsets used for utterance-level embeddings (50 % overlap)."""
        if n_frames < self.crop_frames:
            raise DimensionError(f"utterance has {n_frames} frames, needs at least {self.crop_frames}")
        hop = max(1, self.crop_frames // 2)
        starts = list(range(0, n_frames - self.crop_frames + 1, hop))
        if starts[-1] != n_frames - self.crop_frames:
            starts.append(n_frames - self.crop_frames)
        return starts

    def embed_utterances(self, mels):
        """Tape-tracked utterance embeddings: window average, renormalised."""
        windows, owner = [], []
        for k, mel in enumerate(mels):
            for s in self.window_starts(mel.shape[0]):
                windows.append(mel[s:s + self.crop_frames])
                owner.append(k)
        emb = self.embed_crops(np.stack(windows))
        avg = np.zeros((len(mels), len(windows)), dtype=emb.dtype)
        owner = np.asarray(owner)
        counts = np.bincount(owner, minlength=len(mels))
        avg[owner, np.arange(len(windows))] = 1.0 / counts[owner]
        return ad.l2_normalize(ad.matmul(Tensor(avg), emb), axis=-1)

    def infer_utterance(self, mel):
        require_fitted(self, "params_")
        mel = check_mel(mel, self.n_mels, self.crop_frames)
        with ad.no_grad():
            return self.embed_utterances([mel]).data[0].copy()

    def transform(self, X, batch_size=64):
        """Utterance-level embeddings, shape ``(n, embed_dim)``."""
        require_fitted(self, "params_")
        mels = check_mel_list(X, self.n_mels, self.crop_frames)
        out = []
        with ad.no_grad():
            for k in range(0, len(mels), batch_size):
                out.append(self.embed_utterances(mels[k:k + batch_size]).data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.embed_dim), np.float32)

    # -- training ------------------------------------------------------------------
    def fit(self, X, y):
        """Train on utterances ``X`` (log-mels) grouped by labels ``y``."""
        mels = check_mel_list(X, self.n_mels)
        labels = check_labels(y, len(mels))
        frames = np.concatenate([m - m.mean(axis=0) for m in mels] if self.crop_norm else mels, axis=0)
        self.initialize(frames.mean(axis=0), frames.std(axis=0) + 1e-3)
        members = {}
        for k, (mel, lab) in enumerate(zip(mels, labels)):
            members.setdefault(lab, []).append((k, mel))
        self.groups_ = sorted(members)
        # a corpus with fewer groups than s_groups uses every group per batch
        self.batch_groups_ = min(self.s_groups, len(self.groups_))
        self._train(members, self.n_steps)
        return self

    def _train(self, members, n_steps):
        rng = np.random.default_rng(stable_seed("extractor-batches", self.random_state))
        params = self.all_params()
        opt = Adam(params, lr=self.learning_rate)
        for step in range(n_steps):
            crops, _ = sample_group_crops(members, self.batch_groups_, self.u_per_group, self.crop_frames, rng,
                                          what="label")
            opt.zero_grad()
            emb = self.embed_crops(crops)
            loss = ge2e_loss(emb, self.batch_groups_, self.scale_.w, self.scale_.b)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericFaultError(f"GE2E loss became {value} at step {step}", step=step)
            ad.backward(loss)
            try:
                opt.step()
            except NumericFaultError as exc:
                exc.step = step
                raise
            self.scale_.clamp()
            self.loss_trace_.append(value)
            if step % 50 == 0:
                log.debug("extractor step %d loss %.4f w=%.3f", step, value, float(self.scale_.w.data[0]))
        return self

    # -- persistence ---------------------------------------------------------------
    def to_arrays(self):
        arrays = nn.to_arrays(self.all_params())
        arrays["mel_mean"] = self.mel_mean_
        arrays["mel_std"] = self.mel_std_
        arrays["loss_trace"] = np.asarray(self.loss_trace_, dtype=np.float64)
        return arrays

    @classmethod
    def from_arrays(cls, arrays, config):
        est = cls(**config)
        est.initialize(arrays["mel_mean"], arrays["mel_std"])
        for k, t in est.all_params().items():
            t.data[...] = arrays[k]
        est.loss_trace_ = [float(v) for v in arrays.get("loss_trace", [])]
        return est

    def save(self, path):
        checkpoint.save(path, self.to_arrays(), {"kind": "extractor", "params": self.get_params()})

    @classmethod
    def load(cls, path):
        arrays, meta = checkpoint.load(path)
        return cls.from_arrays(arrays, meta["params"])


def train_extractor(manifest, features, group_by, config=ExtractorConfig(), n_steps=300, seed=0,
                    learning_rate=1e-3):
    """Train an extractor on the training split of ``manifest``.

    Returns ``(model, loss_trace)``.
    """
    train = [r for r in manifest if r.split == "train"]
    model = EmbeddingExtractor.from_config(config, n_steps=n_steps, learning_rate=learning_rate,
                                           random_state=seed)
    model.fit([features[r.utt_id] for r in train], [_group_of(r, group_by) for r in train])
    return model, list(model.loss_trace_)
