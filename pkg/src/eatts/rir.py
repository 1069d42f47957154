"""Room impulse responses: parametric synthesis, loading, RT60 estimation."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .dsp import SAMPLE_RATE, Waveform, read_wav
from .exceptions import DegenerateVectorError, EmptyInputError, EstimationError, ParameterError

DECAY_60DB = 3.0 * np.log(10.0)  # ln(1000): amplitude e-folds over a 60 dB decay


@dataclass(frozen=True)
class RirSpec:
    rt60: float
    direct_delay: int = 0
    drr_db: float = 0.0
    length: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.05 <= self.rt60 <= 2.0:
            raise ParameterError(f"rt60 must lie in [0.05, 2.0] s, got {self.rt60}")
        if self.direct_delay < 0:
            raise ParameterError("direct_delay must be non-negative")
        if self.length is not None and self.length < self.direct_delay + 1:
            raise ParameterError(f"length {self.length} leaves no room for the direct path")

    @property
    def n_taps(self):
        if self.length is not None:
            return self.length
        return self.direct_delay + 1 + int(np.ceil(self.rt60 * SAMPLE_RATE))

    def to_text(self):
        """``key=value`` lines, the on-disk form used in corpus configs."""
        return "\n".join(f"{f.name}={getattr(self, f.name)}" for f in fields(self))

    @classmethod
    def from_text(cls, text):
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        unknown = set(kv) - {f.name for f in fields(cls)}
        if unknown:
            raise ParameterError(f"unknown RirSpec keys: {sorted(unknown)}")
        return cls(
            rt60=float(kv["rt60"]),
            direct_delay=int(kv.get("direct_delay", 0)),
            drr_db=float(kv.get("drr_db", 0.0)),
            length=None if kv.get("length", "None") == "None" else int(kv["length"]),
            seed=int(kv.get("seed", 0)),
        )


@dataclass
class Rir:
    taps: np.ndarray
    spec: RirSpec | None = None
    id: str = ""
    sample_rate: int = SAMPLE_RATE

    def __len__(self):
        return len(self.taps)


def synth_rir(spec, env_id=""):
    """Direct impulse followed by exponentially decaying Gaussian noise.

    The tail amplitude envelope is ``exp(-ln(1000) t / rt60)`` (60 dB energy
    decay over rt60) and is scaled so that direct / tail energy equals
    ``drr_db`` exactly.  The result is unit-energy.
    """
    if not isinstance(spec, RirSpec):
        raise ParameterError("synth_rir expects a RirSpec")
    n = spec.n_taps
    if n - spec.direct_delay - 1 < 2:
        raise ParameterError("RIR length leaves no reverberant tail")
    rng = np.random.default_rng(spec.seed)
    tail_len = n - spec.direct_delay - 1
    t = np.arange(1, tail_len + 1) / SAMPLE_RATE
    tail = rng.standard_normal(tail_len) * np.exp(-DECAY_60DB * t / spec.rt60)
    direct_energy = 1.0
    target_tail = direct_energy * 10.0 ** (-spec.drr_db / 10.0)
    tail *= np.sqrt(target_tail / np.sum(tail * tail))
    taps = np.zeros(n)
    taps[spec.direct_delay] = 1.0
    taps[spec.direct_delay + 1:] = tail
    if np.max(np.abs(tail)) >= 1.0:
        raise ParameterError(
            f"drr_db={spec.drr_db} lets a tail tap exceed the direct path; raise drr_db or rt60"
        )
    return normalize_rir(Rir(taps, spec, env_id))


def direct_to_reverberant_db(r):
    taps = np.asarray(r.taps, dtype=np.float64)
    k = int(np.argmax(np.abs(taps)))
    return 10.0 * np.log10(taps[k] ** 2 / np.sum(taps[k + 1:] ** 2))


def normalize_rir(r):
    taps = np.asarray(r.taps, dtype=np.float64)
    energy = float(np.sum(taps * taps))
    if energy <= 0.0:
        raise DegenerateVectorError(f"RIR {r.id!r} has zero energy")
    return Rir(taps / np.sqrt(energy), r.spec, r.id, r.sample_rate)


def load_rir(path, env_id=None):
    w = read_wav(path)
    return normalize_rir(Rir(w.samples, None, env_id or str(path), w.sample_rate))


def schroeder_curve(taps):
    """Backward-integrated energy decay curve in dB, 0 dB at the start."""
    energy = np.cumsum((np.asarray(taps, dtype=np.float64) ** 2)[::-1])[::-1]
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(energy / energy[0])


def estimate_rt60(r, fs=SAMPLE_RATE, fit_start_db=-5.0, fit_stop_db=-25.0, min_points=10):
    """RT60 by Schroeder backward integration of the reverberant tail.

    The direct path (maximum-magnitude tap and the following millisecond) is
    excluded, the decay between ``fit_start_db`` and ``fit_stop_db`` is fit
    by least squares and extrapolated to -60 dB.
    """
    taps = np.asarray(getattr(r, "taps", r), dtype=np.float64)
    if taps.size == 0:
        raise EmptyInputError("cannot estimate RT60 of an empty RIR")
    start = int(np.argmax(np.abs(taps))) + max(1, int(round(1e-3 * fs)))
    tail = taps[start:]
    if tail.size == 0 or not np.any(tail):
        raise EstimationError("RIR has no reverberant tail after the direct path")
    nz = np.nonzero(tail)[0]
    tail = tail[: nz[-1] + 1]
    edc = schroeder_curve(tail)
    seg = np.nonzero((edc <= fit_start_db) & (edc >= fit_stop_db))[0]
    if seg.size < min_points:
        raise EstimationError(
            f"decay segment between {fit_start_db} and {fit_stop_db} dB has {seg.size} samples (< {min_points})"
        )
    t = seg / fs
    slope, _ = np.polyfit(t, edc[seg], 1)
    if slope >= 0:
        raise EstimationError("energy decay curve is not decaying")
    return float(-60.0 / slope)


def apply_rir(w, r):
    """Render ``w`` through ``r``; ``r is None`` is the clean environment.

    The output keeps the input length (the convolution tail is cut) so that
    frame bookkeeping is identical for clean and reverberant renderings.
    """
    from .dsp import fft_convolve, as_samples

    x = as_samples(w)
    if r is None:
        return Waveform(x.copy()) if isinstance(w, Waveform) else x.copy()
    y = fft_convolve(x, r)[: len(x)]
    return Waveform(y) if isinstance(w, Waveform) else y
