"""Conditional mel synthesiser: symbol encoder, length regulator, and an
autoregressive decoder conditioned on speaker and environment embeddings.

Two training objectives are supported.  ``proposed`` adds the GE2E losses of
the two extractors to the reconstruction loss; ``baseline`` trains fresh
extractors jointly with classification heads on the speaker and environment
labels.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint, nn
from .autodiff import Tensor
from .corpus import SYMBOLS, symbol_ids
from .dsp import DEFAULT_CONFIG
from .exceptions import ConfigurationError, DimensionError, EmptyInputError, NumericFaultError, ParameterError
from .extractor import EmbeddingExtractor
from .ge2e import ge2e_loss
from .optim import Adam
from .utils import stable_seed
from .validation import check_mel

log = logging.getLogger(__name__)

MODES = ("proposed", "baseline")
LOG_FLOOR = DEFAULT_CONFIG.log_floor


@dataclass(frozen=True)
class SynthConfig:
    d_enc: int = 32
    prenet_dim: int = 32
    decoder_dim: int = 64
    spk_dim: int = 32
    env_dim: int = 32
    n_mels: int = 80
    vocab_size: int = len(SYMBOLS)
    prenet_dropout: float = 0.5

    @classmethod
    def paper(cls):
        return cls(d_enc=256, prenet_dim=256, decoder_dim=256, spk_dim=256, env_dim=256)

    @property
    def cond_dim(self):
        return self.d_enc + self.spk_dim + self.env_dim


@dataclass
class LossBreakdown:
    l_recon: float
    l_spk: float
    l_env: float
    total: float


# -- building blocks ---------------------------------------------------------------
def regulate_index(durations, n_frames=None):
    """Frame-to-symbol index: symbol ``n`` repeated ``durations[n]`` times."""
    durations = np.asarray(durations, dtype=np.intp)
    if durations.ndim != 1 or np.any(durations < 1):
        raise ParameterError("durations must be a 1-D sequence of positive frame counts")
    idx = np.repeat(np.arange(len(durations)), durations)
    if n_frames is not None:
        idx = np.concatenate([idx, np.zeros(n_frames - len(idx), dtype=np.intp)])
    return idx


def length_regulate(encoded, durations):
    """Repeat row ``n`` of ``encoded`` (``N x d``) ``durations[n]`` times."""
    encoded = ad.as_tensor(encoded)
    if encoded.ndim != 2 or encoded.shape[0] != len(durations):
        raise DimensionError(
            f"{len(durations)} durations for encoded sequence of shape {encoded.shape}"
        )
    return ad.gather_rows(encoded, regulate_index(durations), axis=0)


def condition_concat(regulated, spk, env):
    """Append the (time-constant) speaker and environment embeddings to every frame.

    ``regulated`` is ``(T, d)`` with 1-D embeddings, or ``(B, T, d)`` with
    ``(B, d_s)`` / ``(B, d_e)`` embeddings.
    """
    regulated, spk, env = ad.as_tensor(regulated), ad.as_tensor(spk), ad.as_tensor(env)
    if regulated.ndim == 2:
        if spk.ndim != 1 or env.ndim != 1:
            raise DimensionError("unbatched conditioning needs 1-D embeddings")
        t = regulated.shape[0]
        return ad.concat([regulated, ad.broadcast_to(spk, (t, spk.shape[0])),
                          ad.broadcast_to(env, (t, env.shape[0]))], axis=-1)
    if regulated.ndim != 3 or spk.ndim != 2 or env.ndim != 2:
        raise DimensionError(f"cannot condition {regulated.shape} on {spk.shape} / {env.shape}")
    b, t, _ = regulated.shape
    s3 = ad.broadcast_to(ad.reshape(spk, (b, 1, spk.shape[1])), (b, t, spk.shape[1]))
    e3 = ad.broadcast_to(ad.reshape(env, (b, 1, env.shape[1])), (b, t, env.shape[1]))
    return ad.concat([regulated, s3, e3], axis=-1)


def recon_loss(pred, target, mask=None):
    """Mean squared error over all entries (or over the rows where ``mask`` is 1)."""
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    sq = diff * diff
    if mask is None:
        return ad.tmean(sq)
    mask = np.asarray(mask, dtype=pred.dtype)
    count = float(mask.sum()) * pred.shape[-1]
    if count == 0:
        raise EmptyInputError("mask selects no frames")
    return ad.tsum(sq * mask[..., None]) * (1.0 / count)


# -- the model ---------------------------------------------------------------------
@dataclass
class SynthModel:
    config: SynthConfig = field(default_factory=SynthConfig)
    mode: str = "proposed"
    params: dict = field(default_factory=dict)
    mel_mean: np.ndarray = None
    mel_std: np.ndarray = None
    speakers: list = field(default_factory=list)
    environments: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        n = self.config.n_mels
        if self.mel_mean is None:
            self.mel_mean = np.full(n, LOG_FLOOR, np.float32)
        if self.mel_std is None:
            self.mel_std = np.ones(n, np.float32)

    @classmethod
    def create(cls, config=SynthConfig(), mode="proposed", seed=0, mel_mean=None, mel_std=None,
               speakers=(), environments=()):
        rng = np.random.default_rng(stable_seed("synth-init", seed))
        cfg = config
        p = {}
        p["sym_emb"] = Tensor(rng.normal(0.0, 0.3, (cfg.vocab_size, cfg.d_enc)).astype(np.float32),
                              requires_grad=True, name="sym_emb")
        nn.init_lstm(p, rng, "enc_", cfg.d_enc, cfg.d_enc)
        nn.init_linear(p, rng, "pre1_", cfg.n_mels, cfg.prenet_dim)
        nn.init_linear(p, rng, "pre2_", cfg.prenet_dim, cfg.prenet_dim)
        nn.init_lstm(p, rng, "dec_", cfg.prenet_dim + cfg.cond_dim, cfg.decoder_dim)
        nn.init_linear(p, rng, "out_", cfg.decoder_dim + cfg.cond_dim, cfg.n_mels)
        model = cls(cfg, mode, p, mel_mean, mel_std, list(speakers), list(environments))
        p["out_W"].data *= 0.1
        p["out_b"].data[...] = model.mel_mean
        if mode == "baseline":
            nn.init_linear(p, rng, "cls_spk_", cfg.spk_dim, max(len(speakers), 2))
            nn.init_linear(p, rng, "cls_env_", cfg.env_dim, max(len(environments), 2))
        return model

    # encoder ---------------------------------------------------------------------
    def encode(self, symbol_batch):
        """``(B, N)`` integer ids -> ``(B, N, d_enc)`` encoder states."""
        ids = np.asarray(symbol_batch, dtype=np.intp)
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise EmptyInputError("symbol batch must be a non-empty (B, N) array")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ParameterError(f"symbol ids must lie in [0, {self.config.vocab_size})")
        emb = ad.gather_rows(self.params["sym_emb"], ids, axis=0)  # (B, N, d)
        steps = ad.unstack(emb, axis=1)
        hs, _ = nn.lstm_sequence(steps, self.params, "enc_")
        return ad.stack(hs, axis=1)

    def _prenet(self, frames_norm, dropout_rng=None):
        # seeded inverted dropout during teacher-forced training only
        x = frames_norm
        for layer in ("pre1_", "pre2_"):
            x = ad.relu(nn.linear(x, self.params, layer))
            if dropout_rng is not None and self.config.prenet_dropout > 0:
                keep = 1.0 - self.config.prenet_dropout
                mask = (dropout_rng.random(x.shape) < keep).astype(np.float32) / keep
                x = x * mask
        return x

    def _normalise(self, frames):
        return (frames - self.mel_mean) / self.mel_std

    def go_frame(self, batch):
        return np.full((batch, self.config.n_mels), LOG_FLOOR, dtype=np.float32)

    # decoder ---------------------------------------------------------------------
    def decode(self, cond, target=None, dropout_rng=None):
        """Decode ``(B, T, w)`` conditioning to ``(B, T, n_mels)`` log-mels.

        With ``target`` the previous ground-truth frame is fed back (teacher
        forcing); without it the previous prediction is.
        """
        cond = ad.as_tensor(cond)
        if cond.ndim != 3 or cond.shape[1] == 0:
            raise EmptyInputError(f"conditioning must be (B, T>0, w), got {cond.shape}")
        b, t, w = cond.shape
        if w != self.config.cond_dim:
            raise DimensionError(f"conditioning width {w} != {self.config.cond_dim}")
        p = self.params
        if target is not None:
            target = np.asarray(target, dtype=np.float32)
            prev = np.concatenate([self.go_frame(b)[:, None], target[:, :-1]], axis=1)
            pre = self._prenet(Tensor(self._normalise(prev).astype(np.float32)), dropout_rng)
            inputs = ad.unstack(ad.concat([pre, cond], axis=-1), axis=1)
            hs, _ = nn.lstm_sequence(inputs, p, "dec_")
            h_all = ad.stack(hs, axis=1)
            return nn.linear(ad.concat([h_all, cond], axis=-1), p, "out_")
        conds = ad.unstack(cond, axis=1)
        h = Tensor(np.zeros((b, self.config.decoder_dim), np.float32))
        c = Tensor(np.zeros((b, self.config.decoder_dim), np.float32))
        prev = Tensor(self.go_frame(b))
        outs = []
        for ct in conds:
            pre = self._prenet((prev - self.mel_mean) * (1.0 / self.mel_std))
            h, c = ad.lstm_cell(ad.concat([pre, ct], axis=-1), h, c, p["dec_W"], p["dec_U"], p["dec_b"])
            prev = nn.linear(ad.concat([h, ct], axis=-1), p, "out_")
            outs.append(prev)
        return ad.stack(outs, axis=1)

    def decode_mel(self, conditioned, target=None):
        """Unbatched decode: ``(T, w)`` conditioning -> ``(T, n_mels)``."""
        conditioned = ad.as_tensor(conditioned)
        if conditioned.ndim != 2 or conditioned.shape[0] == 0:
            raise EmptyInputError(f"conditioning must be (T>0, w), got {conditioned.shape}")
        tgt = None if target is None else np.asarray(target)[None]
        out = self.decode(ad.reshape(conditioned, (1,) + conditioned.shape), tgt)
        return ad.reshape(out, out.shape[1:])

    def condition(self, symbol_batch, durations_batch, spk, env):
        """Encoder states regulated to frame rate and concatenated with embeddings.

        Returns ``(cond, mask)``; rows past an utterance's length are padding.
        """
        lengths = [int(np.sum(d)) for d in durations_batch]
        t = max(lengths)
        enc = self.encode(symbol_batch)
        index = np.stack([regulate_index(d, t) for d in durations_batch])
        regulated = ad.gather_rows(enc, index, axis=1)
        mask = (np.arange(t)[None, :] < np.asarray(lengths)[:, None]).astype(np.float32)
        return condition_concat(regulated, spk, env), mask

    # persistence -------------------------------------------------------------------
    def to_arrays(self):
        arrays = nn.to_arrays(self.params)
        arrays["mel_mean"] = self.mel_mean
        arrays["mel_std"] = self.mel_std
        return arrays

    def meta(self):
        return {"kind": "synth", "mode": self.mode, "config": asdict(self.config),
                "speakers": self.speakers, "environments": self.environments}

    @classmethod
    def from_arrays(cls, arrays, meta):
        arrays = dict(arrays)
        mean, std = arrays.pop("mel_mean"), arrays.pop("mel_std")
        params = nn.from_arrays({k: v for k, v in arrays.items() if not k.startswith("ext_")})
        return cls(SynthConfig(**meta["config"]), meta["mode"], params, mean, std,
                   list(meta.get("speakers", [])), list(meta.get("environments", [])))


def _pad_symbols(seqs):
    n = max(len(s) for s in seqs)
    out = np.zeros((len(seqs), n), dtype=np.intp)
    for k, s in enumerate(seqs):
        out[k, :len(s)] = symbol_ids(s)
    return out


def _pad_mels(mels, t):
    out = np.full((len(mels), t, mels[0].shape[1]), LOG_FLOOR, dtype=np.float32)
    for k, m in enumerate(mels):
        out[k, :len(m)] = m
    return out


@dataclass
class TrainedSystem:
    """A synthesiser together with the extractors that condition it."""

    model: SynthModel
    spk_extractor: EmbeddingExtractor
    env_extractor: EmbeddingExtractor
    trace: list = field(default_factory=list)

    def embed(self, spk_ref, env_ref):
        return (self.spk_extractor.infer_utterance(spk_ref), self.env_extractor.infer_utterance(env_ref))

    def synthesize(self, symbols, durations, spk_ref, env_ref):
        """Free-running log-mel with ``sum(durations)`` frames."""
        spk_ref = check_mel(spk_ref, name="spk_ref")
        env_ref = check_mel(env_ref, name="env_ref")
        s, e = self.embed(spk_ref, env_ref)
        return self.synthesize_from_embeddings(symbols, durations, s, e)

    def synthesize_from_embeddings(self, symbols, durations, spk, env):
        if len(symbols) == 0:
            raise EmptyInputError("cannot synthesise an empty symbol sequence")
        if len(symbols) != len(durations):
            raise DimensionError(f"{len(symbols)} symbols but {len(durations)} durations")
        with ad.no_grad():
            cond, _ = self.model.condition(_pad_symbols([symbols]), [list(durations)],
                                           Tensor(np.asarray(spk, np.float32)[None]),
                                           Tensor(np.asarray(env, np.float32)[None]))
            return self.model.decode(cond).data[0].copy()

    def save(self, path):
        arrays = self.model.to_arrays()
        for prefix, ext in (("ext_spk.", self.spk_extractor), ("ext_env.", self.env_extractor)):
            for k, v in ext.to_arrays().items():
                arrays[prefix + k] = v
        meta = self.model.meta()
        meta["spk_extractor"] = self.spk_extractor.get_params()
        meta["env_extractor"] = self.env_extractor.get_params()
        meta["trace"] = [asdict(t) for t in self.trace]
        checkpoint.save(path, arrays, meta)

    @classmethod
    def load(cls, path):
        arrays, meta = checkpoint.load(path)

        def sub(prefix):
            return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

        model = SynthModel.from_arrays({k: v for k, v in arrays.items() if not k.startswith("ext_")}, meta)
        spk = EmbeddingExtractor.from_arrays(sub("ext_spk."), meta["spk_extractor"])
        env = EmbeddingExtractor.from_arrays(sub("ext_env."), meta["env_extractor"])
        trace = [LossBreakdown(**t) for t in meta.get("trace", [])]
        return cls(model, spk, env, trace)


# -- training ----------------------------------------------------------------------
def _clone_extractor(ext):
    return EmbeddingExtractor.from_arrays(ext.to_arrays(), ext.get_params())


def train_tts(manifest, features, spk_extractor=None, env_extractor=None, mode="proposed",
              freeze_extractors=True, n_steps=500, seed=0, config=SynthConfig(), batch_pairs=8,
              utts_per_pair=2, learning_rate=2e-3, weights=(1.0, 1.0, 1.0)):
    """Train a synthesiser on the ``train`` split of an entangled corpus.

    In ``proposed`` mode the extractors must be pretrained; they are copied
    and, unless ``freeze_extractors`` is false, kept fixed.  In ``baseline``
    mode fresh extractors are created and trained from the classification
    losses only.  Each utterance is its own speaker and environment
    reference.  Returns a :class:`TrainedSystem` whose ``trace`` holds one
    :class:`LossBreakdown` per step.
    """
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}, got {mode!r}")
    w_spk, w_env, w_rec = weights
    train = [r for r in manifest if r.split == "train"]
    if not train:
        raise ConfigurationError("manifest has no training utterances")
    mels = {r.utt_id: check_mel(features[r.utt_id], config.n_mels, name=r.utt_id)[: r.n_frames] for r in train}
    frames = np.concatenate(list(mels.values()), axis=0)
    mel_mean, mel_std = frames.mean(axis=0), frames.std(axis=0) + 1e-3
    speakers = sorted({r.speaker_id for r in train})
    environments = sorted({r.env_id for r in train})

    if mode == "proposed":
        if spk_extractor is None or env_extractor is None:
            raise ConfigurationError("proposed mode needs pretrained speaker and environment extractors")
        spk_ext, env_ext = _clone_extractor(spk_extractor), _clone_extractor(env_extractor)
        joint = not freeze_extractors
    else:
        ext_kw = dict(embed_dim=config.spk_dim, random_state=stable_seed("baseline-spk", seed))
        spk_ext = EmbeddingExtractor(**ext_kw).initialize(mel_mean, mel_std)
        ext_kw["embed_dim"], ext_kw["random_state"] = config.env_dim, stable_seed("baseline-env", seed)
        env_ext = EmbeddingExtractor(**ext_kw).initialize(mel_mean, mel_std)
        joint = True
    if spk_ext.embed_dim != config.spk_dim or env_ext.embed_dim != config.env_dim:
        raise DimensionError(
            f"extractor widths ({spk_ext.embed_dim}, {env_ext.embed_dim}) do not match "
            f"the synthesiser config ({config.spk_dim}, {config.env_dim})"
        )
    spk_ext.set_trainable(joint)
    env_ext.set_trainable(joint)

    model = SynthModel.create(config, mode, stable_seed("synth", seed), mel_mean, mel_std, speakers, environments)
    params = dict(model.params)
    if joint:
        params.update({"spk." + k: v for k, v in spk_ext.all_params().items()})
        params.update({"env." + k: v for k, v in env_ext.all_params().items()})
    opt = Adam(params, lr=learning_rate)

    cached = {}
    if not joint:
        ids = sorted(mels)
        for name, ext in (("spk", spk_ext), ("env", env_ext)):
            emb = ext.transform([mels[u] for u in ids])
            cached[name] = dict(zip(ids, emb))

    by_pair = {}
    for r in train:
        by_pair.setdefault((r.speaker_id, r.env_id), []).append(r)
    pairs = sorted(p for p, rs in by_pair.items() if len(rs) >= utts_per_pair)
    g = min(batch_pairs, len(pairs))
    if g < 2:
        raise ConfigurationError("need at least two speaker/environment pairs with enough utterances")
    rng = np.random.default_rng(stable_seed("synth-batches", seed))
    dropout_rng = np.random.default_rng(stable_seed("synth-dropout", seed))
    spk_index = {s: k for k, s in enumerate(speakers)}
    env_index = {e: k for k, e in enumerate(environments)}
    trace = []
    for step in range(n_steps):
        chosen = [pairs[k] for k in sorted(rng.choice(len(pairs), size=g, replace=False))]
        batch = []
        for pair in chosen:
            rs = by_pair[pair]
            batch.extend(rs[k] for k in rng.choice(len(rs), size=utts_per_pair, replace=False))
        opt.zero_grad()
        if joint:
            e_spk = spk_ext.embed_utterances([mels[r.utt_id] for r in batch])
            e_env = env_ext.embed_utterances([mels[r.utt_id] for r in batch])
        else:
            e_spk = Tensor(np.stack([cached["spk"][r.utt_id] for r in batch]))
            e_env = Tensor(np.stack([cached["env"][r.utt_id] for r in batch]))

        if mode == "proposed":
            l_spk = ge2e_loss(e_spk, g, spk_ext.scale_.w, spk_ext.scale_.b)
            l_env = ge2e_loss(e_env, g, env_ext.scale_.w, env_ext.scale_.b)
        else:
            y_spk = np.array([spk_index[r.speaker_id] for r in batch])
            y_env = np.array([env_index[r.env_id] for r in batch])
            l_spk = ad.softmax_cross_entropy(nn.linear(e_spk, model.params, "cls_spk_"), y_spk)
            l_env = ad.softmax_cross_entropy(nn.linear(e_env, model.params, "cls_env_"), y_env)

        cond, mask = model.condition(_pad_symbols([r.symbols for r in batch]),
                                     [r.durations for r in batch], e_spk, e_env)
        target = _pad_mels([mels[r.utt_id] for r in batch], cond.shape[1])
        pred = model.decode(cond, target, dropout_rng)
        l_rec = recon_loss(pred, target, mask)
        total = l_spk * w_spk + l_env * w_env + l_rec * w_rec
        parts = (float(l_rec.data), float(l_spk.data), float(l_env.data))
        # recorded in double so the breakdown sums exactly
        value = w_rec * parts[0] + w_spk * parts[1] + w_env * parts[2]
        if not np.isfinite(value):
            raise NumericFaultError(f"TTS loss became {value} at step {step}", step=step)
        ad.backward(total)
        try:
            opt.step()
        except NumericFaultError as exc:
            exc.step = step
            raise
        if joint:
            spk_ext.scale_.clamp()
            env_ext.scale_.clamp()
        trace.append(LossBreakdown(*parts, value))
        if step % 50 == 0:
            log.debug("tts[%s] step %d recon %.4f spk %.4f env %.4f", mode, step,
                      trace[-1].l_recon, trace[-1].l_spk, trace[-1].l_env)
    spk_ext.set_trainable(False)
    env_ext.set_trainable(False)
    return TrainedSystem(model, spk_ext, env_ext, trace)
