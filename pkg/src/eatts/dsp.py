"""Signal processing: WAV I/O, STFT / log-mel analysis, FFT convolution,
Griffin-Lim reconstruction, mel-cepstra and mel-cepstral distortion.

All pipeline audio is mono at 22,050 Hz.  Other rates are rejected, never
resampled.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
import scipy.fft
from scipy.io import wavfile

from .exceptions import DimensionError, EmptyInputError, ParameterError, SampleRateError

SAMPLE_RATE = 22050
N_CEPSTRA = 14
MCD_CONST = 10.0 / np.log(10.0)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DimensionError(f"waveform must be mono (1-D), got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ParameterError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


def as_samples(w, sample_rate=SAMPLE_RATE):
    """Return the sample array of ``w`` after checking its rate."""
    if isinstance(w, Waveform):
        if w.sample_rate != sample_rate:
            raise SampleRateError(f"expected {sample_rate} Hz audio, got {w.sample_rate} Hz")
        return w.samples
    arr = np.asarray(w, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"waveform must be mono (1-D), got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class StftMelConfig:
    sample_rate: int = SAMPLE_RATE
    win_length: int = 1102
    hop_length: int = 275
    fft_size: int = 2048
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    floor: float = 1e-10

    def __post_init__(self):
        if self.fft_size < self.win_length or self.fft_size & (self.fft_size - 1):
            raise ParameterError(
                f"fft_size must be a power of two >= win_length, got {self.fft_size} / {self.win_length}"
            )
        if self.hop_length < 1 or self.n_mels < 1:
            raise ParameterError("hop_length and n_mels must be positive")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ParameterError(f"invalid mel band [{self.fmin}, {self.fmax}] Hz")

    @classmethod
    def from_durations(cls, win_ms=50.0, hop_ms=12.5, sample_rate=SAMPLE_RATE, **kw):
        win = int(np.floor(win_ms * 1e-3 * sample_rate))
        hop = int(np.floor(hop_ms * 1e-3 * sample_rate))
        fft = 1 << int(np.ceil(np.log2(win)))
        return cls(sample_rate=sample_rate, win_length=win, hop_length=hop, fft_size=fft, **kw)

    @property
    def pad(self):
        return self.win_length // 2

    @property
    def log_floor(self):
        return float(np.log(self.floor))

    def config_hash(self):
        text = ",".join(f"{k}={v}" for k, v in sorted(asdict(self).items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def n_frames(self, n_samples):
        padded = n_samples + 2 * self.pad
        return 1 + (padded - self.win_length) // self.hop_length


DEFAULT_CONFIG = StftMelConfig()


# -- WAV I/O -------------------------------------------------------------------

def read_wav(path, sample_rate=SAMPLE_RATE):
    """Read a mono PCM16 or float32 WAV file into a :class:`Waveform`."""
    rate, data = wavfile.read(str(path))
    if rate != sample_rate:
        raise SampleRateError(f"{path}: expected {sample_rate} Hz, found {rate} Hz")
    if data.ndim != 1:
        raise DimensionError(f"{path}: expected mono audio, found {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = data.astype(np.float64)
    else:
        raise ParameterError(f"{path}: unsupported WAV sample type {data.dtype}")
    return Waveform(samples, rate)


def write_wav(path, w, sample_rate=SAMPLE_RATE, pcm16=False):
    samples = as_samples(w, sample_rate)
    if pcm16:
        data = np.clip(np.round(samples * 32767.0), -32768, 32767).astype(np.int16)
    else:
        data = samples.astype(np.float32)
    wavfile.write(str(path), sample_rate, data)


# -- analysis ------------------------------------------------------------------

@lru_cache(maxsize=8)
def _hann(n):
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _frames(padded, cfg):
    n_frames = 1 + (len(padded) - cfg.win_length) // cfg.hop_length
    idx = np.arange(cfg.win_length)[None, :] + cfg.hop_length * np.arange(n_frames)[:, None]
    return padded[idx]


def _pad_signal(x, cfg):
    pad = cfg.pad
    if len(x) > pad:
        return np.pad(x, pad, mode="reflect")
    # reflection needs more than ``pad`` samples; tile symmetrically instead
    return np.pad(x, pad, mode="symmetric")


def stft(w, cfg=DEFAULT_CONFIG):
    """Centre-framed STFT: complex array of shape ``(T, fft_size // 2 + 1)``."""
    x = as_samples(w, cfg.sample_rate)
    if len(x) == 0:
        raise EmptyInputError("cannot take the STFT of an empty waveform")
    frames = _frames(_pad_signal(x, cfg), cfg) * _hann(cfg.win_length)
    return np.fft.rfft(frames, n=cfg.fft_size, axis=1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(cfg=DEFAULT_CONFIG):
    """HTK-scale triangular filters, each row scaled to a peak of one.

    Shape ``(n_mels, fft_size // 2 + 1)``.
    """
    n_bins = cfg.fft_size // 2 + 1
    freqs = np.arange(n_bins) * cfg.sample_rate / cfg.fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    fb = np.zeros((cfg.n_mels, n_bins))
    for m in range(cfg.n_mels):
        lo, centre, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (freqs - lo) / (centre - lo)
        falling = (hi - freqs) / (hi - centre)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
        peak = fb[m].max()
        if peak <= 0:
            raise ParameterError(f"mel channel {m} contains no FFT bin; raise fft_size")
        fb[m] /= peak
    fb.setflags(write=False)
    return fb


def mel_centres(cfg=DEFAULT_CONFIG):
    return mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))[1:-1]


def mel_from_magnitude(mag, cfg=DEFAULT_CONFIG):
    energies = mag @ mel_filterbank(cfg).T
    return np.log(np.maximum(energies, cfg.floor))


def mel_spectrogram(w, cfg=DEFAULT_CONFIG):
    """Log-compressed magnitude mel spectrogram, shape ``(T, n_mels)``."""
    return mel_from_magnitude(np.abs(stft(w, cfg)), cfg)


# -- convolution ---------------------------------------------------------------

def fft_convolve(x, h, sample_rate=SAMPLE_RATE):
    """Full linear convolution through a zero-padded real FFT.

    Accepts :class:`Waveform` / :class:`~eatts.rir.Rir` objects or arrays;
    the output length is ``len(x) + len(h) - 1``.
    """
    hx = getattr(h, "taps", h)
    if getattr(h, "sample_rate", sample_rate) != sample_rate:
        raise SampleRateError(f"RIR at {h.sample_rate} Hz, expected {sample_rate} Hz")
    xs = as_samples(x, sample_rate)
    hs = np.asarray(hx, dtype=np.float64)
    if len(xs) == 0 or len(hs) == 0:
        raise EmptyInputError("convolution operands must be non-empty")
    n_out = len(xs) + len(hs) - 1
    n_fft = scipy.fft.next_fast_len(n_out, real=True)
    y = np.fft.irfft(np.fft.rfft(xs, n_fft) * np.fft.rfft(hs, n_fft), n_fft)[:n_out]
    return Waveform(y, sample_rate) if isinstance(x, Waveform) else y


def direct_convolve(x, h):
    """O(N*M) reference convolution (test oracle)."""
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    out = np.zeros(len(x) + len(h) - 1)
    for k, hk in enumerate(h):
        out[k:k + len(x)] += hk * x
    return out


# -- reconstruction --------------------------------------------------------------

@lru_cache(maxsize=8)
def _mel_pinv(cfg):
    return np.linalg.pinv(mel_filterbank(cfg))


def mel_to_magnitude(mel, cfg=DEFAULT_CONFIG):
    """Non-negative least-squares-ish inverse of the mel projection."""
    energies = np.exp(np.asarray(mel, dtype=np.float64))
    energies[mel <= cfg.log_floor + 1e-9] = 0.0
    return np.maximum(energies @ _mel_pinv(cfg).T, 0.0)


def _spectral_weights(cfg):
    # full-spectrum energy weights of the one-sided rfft bins
    w = np.full(cfg.fft_size // 2 + 1, 2.0)
    w[0] = 1.0
    w[-1] = 1.0
    return w


def _istft_padded(spec, cfg):
    """Least-squares inverse of the framing operator, in the padded domain."""
    n_frames = spec.shape[0]
    win = _hann(cfg.win_length)
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=1)[:, :cfg.win_length] * win
    length = (n_frames - 1) * cfg.hop_length + cfg.win_length
    y = np.zeros(length)
    norm = np.zeros(length)
    for t in range(n_frames):
        s = t * cfg.hop_length
        y[s:s + cfg.win_length] += frames[t]
        norm[s:s + cfg.win_length] += win * win
    nz = norm > 1e-12
    y[nz] /= norm[nz]
    y[~nz] = 0.0
    return y


def griffin_lim(mel, cfg=DEFAULT_CONFIG, n_iter=32, return_errors=False):
    """Reconstruct a waveform from a log-mel spectrogram.

    The mel is mapped back to a magnitude spectrogram with the filterbank
    pseudo-inverse, then phase is refined by alternating projections starting
    from zero phase.  The spectral-convergence error
    ``|| |S(y)| - M ||_F / ||M||_F`` is recorded after every iteration; it is
    non-increasing because each projection is an exact least-squares step.
    """
    if n_iter < 1:
        raise ParameterError(f"n_iter must be >= 1, got {n_iter}")
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[1] != cfg.n_mels:
        raise DimensionError(f"mel must be (T, {cfg.n_mels}), got {mel.shape}")
    mag = mel_to_magnitude(mel, cfg)
    weights = _spectral_weights(cfg)
    ref = np.sqrt(np.sum(weights * mag * mag))
    phase = np.ones_like(mag, dtype=np.complex128)
    errors = []
    y = np.zeros((mel.shape[0] - 1) * cfg.hop_length + cfg.win_length)
    for _ in range(n_iter):
        y = _istft_padded(mag * phase, cfg)
        spec = np.fft.rfft(_frames(y, cfg) * _hann(cfg.win_length), n=cfg.fft_size, axis=1)
        amp = np.abs(spec)
        diff = amp - mag
        errors.append(float(np.sqrt(np.sum(weights * diff * diff)) / ref) if ref > 0 else 0.0)
        phase = np.where(amp > 1e-12, spec / np.maximum(amp, 1e-12), 1.0)
    samples = y[cfg.pad:len(y) - cfg.pad]
    out = Waveform(samples, cfg.sample_rate)
    return (out, errors) if return_errors else out


# -- cepstra / distortion --------------------------------------------------------

def mel_cepstrum(mel, n_coeffs=N_CEPSTRA):
    """Orthonormal DCT-II of each log-mel frame, orders ``0..n_coeffs-1``."""
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2:
        raise DimensionError(f"mel must be 2-D (T, n_mels), got {mel.shape}")
    if mel.shape[1] < n_coeffs:
        raise DimensionError(f"need at least {n_coeffs} mel channels, got {mel.shape[1]}")
    return scipy.fft.dct(mel, type=2, norm="ortho", axis=1)[:, :n_coeffs]


def mcd(a, b):
    """Mel-cepstral distortion in dB between two cepstral sequences.

    Frames are truncated to the shorter sequence; order 0 (energy) is
    excluded.  Returns the mean of ``(10/ln 10) * sqrt(2 * sum_d diff_d^2)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0 or len(a) == 0 or len(b) == 0:
        raise EmptyInputError("MCD needs two non-empty cepstral sequences")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"cepstral orders differ: {a.shape[1]} vs {b.shape[1]}")
    n = min(len(a), len(b))
    diff = a[:n, 1:] - b[:n, 1:]
    return float(np.mean(MCD_CONST * np.sqrt(2.0 * np.sum(diff * diff, axis=1))))


def mel_mcd(mel_a, mel_b):
    """MCD between two log-mel spectrograms."""
    return mcd(mel_cepstrum(mel_a), mel_cepstrum(mel_b))
