"""Synthetic corpora: toy speech, the extractor corpus, the entangled TTS
corpus, manifests, feature caches and GE2E batch sampling.

A corpus directory holds::

    manifest.tsv     one row per utterance
    corpus.cfg       voices, room specs and the speaker/environment pairing
    wavs/*.wav       rendered audio (float32, 22,050 Hz, mono)
    features.eatts   log-mel spectrogram per utterance (EATTS1 container)
"""

from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .dsp import DEFAULT_CONFIG, SAMPLE_RATE, Waveform, mel_spectrogram, read_wav, write_wav
from .exceptions import ConfigurationError, LookupFailure, ParameterError, SamplingError
from .rir import RirSpec, apply_rir, synth_rir
from .utils import stable_seed

CLEAN = "clean"
SPLITS = ("train", "heldout")

# Vowel formants (F1, F2, F3) in Hz for an average adult voice.
VOWELS = {
    "iy": (270.0, 2290.0, 3010.0),
    "ih": (390.0, 1990.0, 2550.0),
    "eh": (530.0, 1840.0, 2480.0),
    "ae": (660.0, 1720.0, 2410.0),
    "aa": (730.0, 1090.0, 2440.0),
    "ao": (570.0, 840.0, 2410.0),
    "uh": (440.0, 1020.0, 2240.0),
    "uw": (300.0, 870.0, 2240.0),
    "ah": (640.0, 1190.0, 2390.0),
    "er": (490.0, 1350.0, 1690.0),
}
PAUSE = "sil"  # silence between words; reverberation decays into it
SYMBOLS = tuple(VOWELS) + (PAUSE,)
SYMBOL_INDEX = {s: i for i, s in enumerate(SYMBOLS)}
NEUTRAL_FORMANTS = (500.0, 1500.0, 2500.0)
_FORMANT_GAINS = (1.0, 0.6, 0.35)
_FORMANT_BANDWIDTHS = (90.0, 120.0, 170.0)
MANIFEST_COLUMNS = ("utt_id", "speaker_id", "env_id", "split", "wav_path", "symbols", "durations")


# -- voices and toy speech ---------------------------------------------------------

@dataclass(frozen=True)
class SpeakerVoiceSpec:
    f0: float
    formant_centers: tuple = NEUTRAL_FORMANTS
    spectral_tilt: float = -6.0
    seed: int = 0

    def __post_init__(self):
        if not 80.0 <= self.f0 <= 400.0:
            raise ParameterError(f"f0 must lie in [80, 400] Hz, got {self.f0}")
        if sum(1 for f in self.formant_centers if 0 < f < 8000.0) < 2:
            raise ParameterError("a voice needs at least two formants below 8 kHz")


def symbol_ids(symbols):
    try:
        return [s if isinstance(s, (int, np.integer)) else SYMBOL_INDEX[s] for s in symbols]
    except KeyError as exc:
        raise ParameterError(f"unknown symbol {exc.args[0]!r}; vocabulary is {SYMBOLS}") from None


def _harmonic_amplitudes(voice, sym, freqs):
    ratios = np.array(VOWELS[SYMBOLS[sym]]) / np.array(NEUTRAL_FORMANTS)
    env = np.full_like(freqs, 0.02)
    for k, centre in enumerate(voice.formant_centers[:3]):
        fk = centre * ratios[k]
        env += _FORMANT_GAINS[k] / (1.0 + ((freqs - fk) / _FORMANT_BANDWIDTHS[k]) ** 2)
    tilt = 10.0 ** (voice.spectral_tilt * np.log2(np.maximum(freqs, 1.0) / 100.0) / 20.0)
    return env * tilt


def text_seed(symbols, durations):
    """Prosody seed shared by every rendering of the same text."""
    return stable_seed("text", " ".join(map(str, symbol_ids(symbols))), ",".join(map(str, durations)))


def synth_toy_utterance(voice, symbols, durations, cfg=DEFAULT_CONFIG, prosody_seed=None):
    """Render a symbol sequence as harmonic "vowel" syllables.

    Each symbol is one syllable lasting ``durations[n]`` frames of
    ``cfg.hop_length`` samples, shaped by a rising-falling envelope.  The
    source is a harmonic series at the speaker's f0 (with an utterance-level
    contour drawn from ``prosody_seed``) coloured by the speaker's tilt and
    by the symbol's formant pattern scaled to the speaker's formants.
    """
    ids = symbol_ids(symbols)
    durations = [int(d) for d in durations]
    if not ids:
        raise ParameterError("cannot synthesise an empty symbol sequence")
    if len(ids) != len(durations):
        raise ParameterError(f"{len(ids)} symbols but {len(durations)} durations")
    if min(durations) < 1:
        raise ParameterError("every symbol needs a duration of at least one frame")
    if prosody_seed is None:
        prosody_seed = text_seed(ids, durations)

    hop = cfg.hop_length
    n = sum(durations) * hop
    rng = np.random.default_rng(prosody_seed)
    t = np.arange(n) / SAMPLE_RATE
    # contour depends only on the text so f0 ratios between voices are exact
    level = 1.0 + rng.uniform(-0.02, 0.02)
    decline = rng.uniform(0.02, 0.05)
    f0 = voice.f0 * level * (1.0 - decline * t / max(t[-1], 1e-9))
    phase = 2.0 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    n_harm = max(1, int(8500.0 // f0.max()))
    harm = np.arange(1, n_harm + 1)
    harm_phase = rng.uniform(0, 2 * np.pi, n_harm)

    out = np.zeros(n)
    start = 0
    for sym, d in zip(ids, durations):
        length = d * hop
        seg = slice(start, start + length)
        if SYMBOLS[sym] == PAUSE:
            start += length
            continue
        amps = _harmonic_amplitudes(voice, sym, harm * f0[seg].mean())
        u = (np.arange(length) + 0.5) / length
        bump = np.sin(np.pi * u) ** 0.6
        out[seg] = bump * (amps @ np.sin(np.outer(harm, phase[seg]) + harm_phase[:, None]))
        start += length
    noise_rng = np.random.default_rng(stable_seed("noise", voice.seed, prosody_seed))
    out += 1e-3 * noise_rng.standard_normal(n) * np.sqrt(np.mean(out * out))
    out *= 0.1 / np.sqrt(np.mean(out * out))
    return Waveform(out, SAMPLE_RATE)


def sample_text(rng, min_frames=96, dur_range=(6, 14), word_len=(2, 4), pause_range=(4, 10)):
    """Words of 2-4 vowel syllables, each followed by a pause."""
    symbols, durations = [], []
    while sum(durations) < min_frames:
        for _ in range(int(rng.integers(word_len[0], word_len[1] + 1))):
            symbols.append(SYMBOLS[rng.integers(len(VOWELS))])
            durations.append(int(rng.integers(dur_range[0], dur_range[1] + 1)))
        symbols.append(PAUSE)
        durations.append(int(rng.integers(pause_range[0], pause_range[1] + 1)))
    return symbols, durations


def _stratified(rng, n, lo, hi, log=False):
    """``n`` values spread over [lo, hi] in random order with small jitter."""
    a, b = (np.log(lo), np.log(hi)) if log else (lo, hi)
    grid = (np.arange(n) + rng.uniform(0.25, 0.75, n)) / n
    vals = a + (b - a) * grid
    vals = np.exp(vals) if log else vals
    return rng.permutation(vals)


ROOM_RT60_RANGE = (0.12, 0.9)
ROOM_DRR_RANGE = (-2.0, 10.0)


def draw_voices(ids, seed):
    rng = np.random.default_rng(stable_seed("voices", seed))
    n = len(ids)
    f0s = _stratified(rng, n, 95.0, 250.0, log=True)
    scales = _stratified(rng, n, 0.85, 1.18)
    tilts = _stratified(rng, n, -9.0, -3.0)
    voices = {}
    for k, sid in enumerate(ids):
        jitter = rng.uniform(0.95, 1.05, 3)
        centres = tuple(float(round(c * scales[k] * j, 2)) for c, j in zip(NEUTRAL_FORMANTS, jitter))
        voices[sid] = SpeakerVoiceSpec(
            f0=float(round(f0s[k], 2)),
            formant_centers=centres,
            spectral_tilt=float(round(tilts[k], 3)),
            seed=stable_seed("voice", seed, sid),
        )
    return voices


def draw_rooms(ids, seed):
    rng = np.random.default_rng(stable_seed("rooms", seed))
    n = len(ids)
    rt60s = _stratified(rng, n, *ROOM_RT60_RANGE, log=True)
    drrs = _stratified(rng, n, *ROOM_DRR_RANGE)
    return {
        eid: RirSpec(
            rt60=float(round(rt60s[k], 4)),
            direct_delay=int(rng.integers(0, 64)),
            drr_db=float(round(drrs[k], 3)),
            seed=stable_seed("rir", seed, eid),
        )
        for k, eid in enumerate(ids)
    }


# -- manifest --------------------------------------------------------------------

@dataclass
class UtteranceRecord:
    utt_id: str
    speaker_id: str
    env_id: str
    split: str
    wav_path: str
    symbols: tuple
    durations: tuple

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ParameterError(f"split must be one of {SPLITS}, got {self.split!r}")
        self.symbols = tuple(self.symbols)
        self.durations = tuple(int(d) for d in self.durations)
        if len(self.symbols) != len(self.durations):
            raise ParameterError(f"{self.utt_id}: symbol / duration count mismatch")

    @property
    def n_frames(self):
        return sum(self.durations)


class Manifest(list):
    """List of :class:`UtteranceRecord` with TSV (de)serialisation."""

    def to_tsv(self):
        lines = ["\t".join(MANIFEST_COLUMNS)]
        for r in self:
            lines.append("\t".join([
                r.utt_id, r.speaker_id, r.env_id, r.split, r.wav_path,
                " ".join(r.symbols), ",".join(map(str, r.durations)),
            ]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text):
        rows = list(csv.reader(text.splitlines(), delimiter="\t"))
        if not rows or tuple(rows[0]) != MANIFEST_COLUMNS:
            raise ConfigurationError(f"manifest header must be {MANIFEST_COLUMNS}")
        out = cls()
        for row in rows[1:]:
            if not row:
                continue
            utt, spk, env, split, wav, syms, durs = row
            out.append(UtteranceRecord(utt, spk, env, split, wav, syms.split(), [int(d) for d in durs.split(",")]))
        return out

    def write(self, path):
        Path(path).write_text(self.to_tsv(), encoding="utf-8")

    @classmethod
    def read(cls, path):
        return cls.from_tsv(Path(path).read_text(encoding="utf-8"))

    def where(self, **conds):
        return Manifest(r for r in self if all(getattr(r, k) == v for k, v in conds.items()))

    def group_ids(self, group_by):
        return sorted({_group_of(r, group_by) for r in self})

    def by_id(self):
        return {r.utt_id: r for r in self}


def _group_of(record, group_by):
    if group_by in ("speaker", "speaker_id"):
        return record.speaker_id
    if group_by in ("environment", "env", "env_id"):
        return record.env_id
    raise ParameterError(f"group_by must be 'speaker' or 'environment', got {group_by!r}")


@dataclass
class PairingPlan:
    pairs: list
    heldout: set = field(default_factory=set)

    def speaker_to_env(self):
        return dict(self.pairs)

    def is_bijection(self):
        spk = [s for s, _ in self.pairs]
        env = [e for _, e in self.pairs]
        return len(set(spk)) == len(spk) == len(set(env)) == len(env)

    @property
    def seen(self):
        return [p for p in self.pairs if p not in self.heldout]


# -- corpus on disk ----------------------------------------------------------------

@dataclass
class Corpus:
    """A rendered corpus: manifest, generator parameters and features."""

    root: Path
    kind: str
    seed: int
    manifest: Manifest
    voices: dict
    rooms: dict
    plan: PairingPlan | None = None
    _features: dict | None = None
    _rirs: dict = field(default_factory=dict)

    # generator-side rendering -------------------------------------------------------
    def rir(self, env_id):
        if env_id == CLEAN:
            return None
        if env_id not in self.rooms:
            raise LookupFailure(f"unknown environment {env_id!r}")
        if env_id not in self._rirs:
            self._rirs[env_id] = synth_rir(self.rooms[env_id], env_id)
        return self._rirs[env_id]

    def clean_audio(self, speaker_id, symbols, durations):
        if speaker_id not in self.voices:
            raise LookupFailure(f"unknown speaker {speaker_id!r}")
        return synth_toy_utterance(self.voices[speaker_id], symbols, durations)

    def render(self, speaker_id, env_id, symbols, durations):
        """Speech of ``speaker_id`` saying the text inside ``env_id``."""
        return apply_rir(self.clean_audio(speaker_id, symbols, durations), self.rir(env_id))

    def render_mel(self, speaker_id, env_id, symbols, durations):
        mel = mel_spectrogram(self.render(speaker_id, env_id, symbols, durations))
        return mel[: sum(durations)].astype(np.float32)

    # features ----------------------------------------------------------------------
    @property
    def features(self):
        if self._features is None:
            path = self.root / "features.eatts"
            if path.exists():
                self._features, _ = checkpoint.load(path)
            else:
                self._features = compute_features(self)
        return self._features

    def mel(self, utt_id):
        try:
            return self.features[utt_id]
        except KeyError:
            raise LookupFailure(f"no features for utterance {utt_id!r}") from None

    def wav(self, record):
        return read_wav(self.root / record.wav_path)

    @classmethod
    def load(cls, root):
        root = Path(root)
        manifest = Manifest.read(root / "manifest.tsv")
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp.read(root / "corpus.cfg", encoding="utf-8")
        voices, rooms, pairs, heldout = {}, {}, [], set()
        for section in cp.sections():
            kind, _, ident = section.partition(" ")
            sec = cp[section]
            if kind == "speaker":
                voices[ident] = SpeakerVoiceSpec(
                    f0=float(sec["f0"]),
                    formant_centers=tuple(float(x) for x in sec["formant_centers"].split(",")),
                    spectral_tilt=float(sec["spectral_tilt"]),
                    seed=int(sec["seed"]),
                )
            elif kind == "env" and ident != CLEAN:
                rooms[ident] = RirSpec.from_text("\n".join(f"{k}={v}" for k, v in sec.items()))
            elif kind == "pair":
                spk, env = ident.split("|")
                pairs.append((spk, env))
                if sec.get("status") == "heldout":
                    heldout.add((spk, env))
        meta = cp["corpus"]
        plan = PairingPlan(pairs, heldout) if pairs else None
        return cls(root, meta["kind"], int(meta["seed"]), manifest, voices, rooms, plan)

    def save_config(self):
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["corpus"] = {"kind": self.kind, "seed": str(self.seed)}
        for sid, v in sorted(self.voices.items()):
            cp[f"speaker {sid}"] = {
                "f0": repr(v.f0),
                "formant_centers": ",".join(repr(c) for c in v.formant_centers),
                "spectral_tilt": repr(v.spectral_tilt),
                "seed": str(v.seed),
            }
        for eid, spec in sorted(self.rooms.items()):
            cp[f"env {eid}"] = dict(line.split("=", 1) for line in spec.to_text().splitlines())
        if self.plan is not None:
            for spk, env in self.plan.pairs:
                status = "heldout" if (spk, env) in self.plan.heldout else "train"
                cp[f"pair {spk}|{env}"] = {"status": status}
            if any(e == CLEAN for _, e in self.plan.pairs):
                cp[f"env {CLEAN}"] = {"convolution": "none"}
        with open(self.root / "corpus.cfg", "w", encoding="utf-8") as fh:
            cp.write(fh)


def compute_features(corpus, records=None):
    feats = {}
    for r in records if records is not None else corpus.manifest:
        mel = mel_spectrogram(corpus.wav(r))
        feats[r.utt_id] = mel[: r.n_frames].astype(np.float32)
    return feats


def render_corpus(corpus, write_features=True):
    """Render every manifest row to WAV and (optionally) cache log-mels."""
    (corpus.root / "wavs").mkdir(parents=True, exist_ok=True)
    feats = {}
    for r in corpus.manifest:
        audio = corpus.render(r.speaker_id, r.env_id, r.symbols, r.durations)
        try:
            write_wav(corpus.root / r.wav_path, audio)
        except OSError as exc:
            raise OSError(f"cannot write {corpus.root / r.wav_path}: {exc}") from exc
        # features come from the stored (float32) audio so they match a re-read
        stored = Waveform(audio.samples.astype(np.float32).astype(np.float64))
        feats[r.utt_id] = mel_spectrogram(stored)[: r.n_frames].astype(np.float32)
    if write_features:
        checkpoint.save(corpus.root / "features.eatts", feats, {"stft_mel": DEFAULT_CONFIG.config_hash()})
    corpus._features = feats
    return corpus


def _heldout_count(n, frac):
    return max(1, int(math.ceil(frac * n - 1e-9)))


def build_extractor_corpus(n_envs=8, n_speakers_per_env=4, n_utts=10, out_dir=None, n_speakers=None,
                           seed=0, heldout_frac=0.2, render=True):
    """Each environment rendered with several speakers.

    With ``n_speakers`` left at its default every speaker is recorded in
    every environment (fully crossed); a larger pool assigns speakers to
    environments cyclically so that each speaker still visits several rooms.
    """
    if n_speakers_per_env < 2:
        raise ConfigurationError("each environment needs at least two speakers")
    n_speakers = n_speakers or n_speakers_per_env
    if n_speakers < n_speakers_per_env:
        raise ConfigurationError("speaker pool smaller than speakers per environment")
    if out_dir is None:
        raise ConfigurationError("out_dir is required")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    spk_ids = [f"xs{k:02d}" for k in range(n_speakers)]
    env_ids = [f"xe{k:02d}" for k in range(n_envs)]
    voices = draw_voices(spk_ids, stable_seed("extractor", seed))
    rooms = draw_rooms(env_ids, stable_seed("extractor", seed))
    rng = np.random.default_rng(stable_seed("extractor-texts", seed))
    n_held = _heldout_count(n_utts, heldout_frac) if heldout_frac > 0 else 0
    manifest = Manifest()
    for e, env in enumerate(env_ids):
        members = [spk_ids[(e * n_speakers_per_env + k) % n_speakers] for k in range(n_speakers_per_env)]
        for spk in members:
            held = set(rng.choice(n_utts, size=n_held, replace=False).tolist()) if n_held else set()
            for k in range(n_utts):
                symbols, durations = sample_text(rng)
                utt = f"{spk}_{env}_{k:03d}"
                manifest.append(UtteranceRecord(
                    utt, spk, env, "heldout" if k in held else "train",
                    f"wavs/{utt}.wav", symbols, durations,
                ))
    corpus = Corpus(root, "extractor", seed, manifest, voices, rooms)
    manifest.write(root / "manifest.tsv")
    corpus.save_config()
    if render:
        render_corpus(corpus)
    return corpus


def build_tts_corpus(n_pairs=12, n_utts_per_pair=40, heldout_pair_frac=0.05, heldout_utt_frac=0.05,
                     out_dir=None, seed=0, render=True):
    """Fully entangled corpus: every speaker is heard in exactly one room.

    One pair uses the ``clean`` environment (no convolution).  At least one
    pair (never the clean one) is held out entirely, and at least one
    utterance of every remaining pair is held out.
    """
    if n_pairs < 4:
        raise ConfigurationError(f"need at least 4 speaker/environment pairs, got {n_pairs}")
    for name, frac in (("heldout_pair_frac", heldout_pair_frac), ("heldout_utt_frac", heldout_utt_frac)):
        if not 0.0 < frac < 1.0:
            raise ConfigurationError(f"{name} must lie in (0, 1), got {frac}")
    n_held_pairs = _heldout_count(n_pairs, heldout_pair_frac)
    n_held_utts = _heldout_count(n_utts_per_pair, heldout_utt_frac)
    if n_held_pairs >= n_pairs - 1 or n_held_utts >= n_utts_per_pair:
        raise ConfigurationError("split leaves no training data")
    if out_dir is None:
        raise ConfigurationError("out_dir is required")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(stable_seed("tts", seed))
    spk_ids = [f"ts{k:03d}" for k in range(n_pairs)]
    env_ids = [CLEAN] + [f"te{k:03d}" for k in range(1, n_pairs)]
    voices = draw_voices(spk_ids, stable_seed("tts", seed))
    rooms = draw_rooms(env_ids[1:], stable_seed("tts", seed))
    perm = rng.permutation(n_pairs)
    pairs = [(spk_ids[k], env_ids[perm[k]]) for k in range(n_pairs)]
    candidates = [p for p in pairs if p[1] != CLEAN]
    held_idx = rng.choice(len(candidates), size=n_held_pairs, replace=False)
    plan = PairingPlan(pairs, {candidates[k] for k in sorted(held_idx)})

    texts = np.random.default_rng(stable_seed("tts-texts", seed))
    manifest = Manifest()
    for spk, env in pairs:
        pair_held = (spk, env) in plan.heldout
        held = set(texts.choice(n_utts_per_pair, size=n_held_utts, replace=False).tolist())
        for k in range(n_utts_per_pair):
            symbols, durations = sample_text(texts)
            utt = f"{spk}_{env}_{k:03d}"
            split = "heldout" if pair_held or k in held else "train"
            manifest.append(UtteranceRecord(utt, spk, env, split, f"wavs/{utt}.wav", symbols, durations))
    corpus = Corpus(root, "tts", seed, manifest, voices, rooms, plan)
    manifest.write(root / "manifest.tsv")
    corpus.save_config()
    if render:
        render_corpus(corpus)
    return corpus


# -- batch sampling ------------------------------------------------------------------

def sample_ge2e_batch(manifest, features, group_by, s_groups, u_per_group, crop_frames, rng):
    """Draw ``s_groups`` groups x ``u_per_group`` utterances, one random crop each.

    Returns ``(crops, labels)`` with crops of shape
    ``(s_groups * u_per_group, crop_frames, n_mels)``, grouped contiguously.
    """
    members = {}
    for r in manifest:
        members.setdefault(_group_of(r, group_by), []).append((r.utt_id, features[r.utt_id]))
    return sample_group_crops(members, s_groups, u_per_group, crop_frames, rng, what=group_by)


def sample_group_crops(members, s_groups, u_per_group, crop_frames, rng, what="group"):
    """Core sampler over ``{group_id: [(utt_id, mel), ...]}``."""
    if len(members) < s_groups:
        raise SamplingError(f"need {s_groups} {what} groups, data has {len(members)}")
    eligible = {}
    for gid, utts in sorted(members.items()):
        long_enough = [mel for _, mel in utts if mel.shape[0] >= crop_frames]
        if len(long_enough) < u_per_group:
            short = [uid for uid, mel in utts if mel.shape[0] < crop_frames]
            detail = f"; too short: {short[:3]}" if short else ""
            raise SamplingError(
                f"{what} {gid!r} has {len(long_enough)} utterances of >= {crop_frames} frames, "
                f"needs {u_per_group}{detail}"
            )
        eligible[gid] = long_enough
    group_ids = sorted(eligible)
    chosen = [group_ids[k] for k in sorted(rng.choice(len(group_ids), size=s_groups, replace=False))]
    crops, labels = [], []
    for gid in chosen:
        mels = eligible[gid]
        for k in rng.choice(len(mels), size=u_per_group, replace=False):
            mel = mels[k]
            start = int(rng.integers(0, mel.shape[0] - crop_frames + 1))
            crops.append(mel[start:start + crop_frames])
            labels.append(gid)
    return np.stack(crops).astype(np.float32), labels
