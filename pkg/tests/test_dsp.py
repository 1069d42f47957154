import numpy as np
import pytest

from eatts import dsp
from eatts.dsp import DEFAULT_CONFIG as CFG
from eatts.dsp import Waveform
from eatts.exceptions import DimensionError, EmptyInputError, ParameterError, SampleRateError

FS = 22050


def test_default_config_from_durations():
    cfg = dsp.StftMelConfig.from_durations(50.0, 12.5)
    assert (cfg.win_length, cfg.hop_length, cfg.fft_size) == (1102, 275, 2048)
    assert cfg == CFG


def test_config_rejects_bad_fft_size():
    with pytest.raises(ParameterError):
        dsp.StftMelConfig(fft_size=1000)
    with pytest.raises(ParameterError):
        dsp.StftMelConfig(fft_size=1024)  # smaller than the window


# -- stft --------------------------------------------------------------------------------
def test_one_second_has_81_frames():
    assert dsp.stft(Waveform(np.zeros(FS))).shape == (81, 1025)


def test_frame_count_formula_random_lengths():
    r = np.random.default_rng(0)
    for n in r.integers(600, 30000, size=100):
        padded = n + 2 * 551
        expected = 1 + (padded - 1102) // 275
        assert dsp.stft(Waveform(r.normal(size=n) * 0.1)).shape[0] == expected


def _sine_band_fraction(cfg, k, half):
    t = np.arange(FS) / FS
    spec = np.abs(dsp.stft(Waveform(np.sin(2 * np.pi * k * FS / cfg.fft_size * t)), cfg)) ** 2
    return (spec[:, k - half:k + half + 1].sum(axis=1) / spec.sum(axis=1))[4:-4]


def test_bin_centred_sine_energy_in_mainlobe():
    # a full-length Hann window puts the whole line in bins k-1..k+1
    full = dsp.StftMelConfig(win_length=2048)
    assert _sine_band_fraction(full, 93, 1).min() >= 0.9
    # the 1102-sample window is zero padded, so its mainlobe is 2*2048/1102 bins wide each side
    assert _sine_band_fraction(dsp.DEFAULT_CONFIG, 93, 4).min() >= 0.9


def test_stft_frame_matches_direct_dft():
    r = np.random.default_rng(1)
    x = r.normal(size=3000)
    spec = dsp.stft(Waveform(x))
    padded = np.pad(x, 551, mode="reflect")
    j = 4
    frame = padded[j * 275:j * 275 + 1102] * (0.5 - 0.5 * np.cos(2 * np.pi * np.arange(1102) / 1102))
    n = np.arange(1102)
    for k in (0, 17, 500, 1024):
        ref = np.sum(frame * np.exp(-2j * np.pi * k * n / 2048))
        assert abs(spec[j, k] - ref) < 1e-8 * max(1.0, abs(ref))


def test_zero_input_zero_magnitude():
    assert np.all(np.abs(dsp.stft(Waveform(np.zeros(4000)))) == 0.0)


def test_empty_input_rejected():
    with pytest.raises(EmptyInputError):
        dsp.stft(Waveform(np.zeros(0)))


# -- mel ---------------------------------------------------------------------------------
def test_zero_signal_mel_is_floor():
    mel = dsp.mel_spectrogram(Waveform(np.zeros(5000)))
    assert mel.shape[1] == 80
    assert np.all(mel == np.log(1e-10))


def test_white_noise_mel_finite():
    mel = dsp.mel_spectrogram(Waveform(np.random.default_rng(2).normal(size=FS)))
    assert np.all(np.isfinite(mel))
    assert np.all(np.exp(mel).sum(axis=0) >= 0)


def test_filterbank_rows_peak_one_and_centres_monotone():
    fb = dsp.mel_filterbank()
    assert fb.shape == (80, 1025)
    np.testing.assert_allclose(fb.max(axis=1), 1.0)
    freqs = np.arange(1025) * FS / 2048
    peaks = freqs[fb.argmax(axis=1)]
    assert np.all(np.diff(peaks) >= 0)
    # centres follow 2595 log10(1 + f/700), equally spaced in mel from 0 to 8000 Hz
    mel_top = 2595 * np.log10(1 + 8000 / 700)
    centres = 700 * (10 ** (np.linspace(0, mel_top, 82)[1:-1] / 2595) - 1)
    np.testing.assert_allclose(dsp.mel_centres(), centres, rtol=1e-12)
    assert np.all(np.abs(peaks - centres) <= FS / 2048)
    # nothing above fmax
    assert np.all(fb[:, freqs > 8000 + FS / 2048] == 0)


def test_flat_spectrum_positive_in_all_channels():
    assert np.all(np.ones(1025) @ dsp.mel_filterbank().T > 0)


# -- convolution -------------------------------------------------------------------------
def test_fft_convolve_equals_direct_100_cases():
    r = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        x = r.normal(size=r.integers(1, 2049))
        h = r.normal(size=r.integers(1, 2049))
        ref = np.convolve(x, h)
        out = dsp.fft_convolve(x, h)
        assert out.shape == ref.shape
        worst = max(worst, np.max(np.abs(out - ref)) / max(1.0, np.max(np.abs(ref))))
    assert worst < 1e-6


def test_fft_convolve_1000_by_64():
    r = np.random.default_rng(4)
    x, h = r.normal(size=1000), r.normal(size=64)
    assert np.max(np.abs(dsp.fft_convolve(x, h) - np.convolve(x, h))) < 1e-6


def test_unit_impulse_is_identity():
    x = np.random.default_rng(5).normal(size=777)
    out = dsp.fft_convolve(Waveform(x), np.array([1.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.samples[:777], x, atol=1e-12)


def test_scaled_delay():
    x = np.random.default_rng(6).normal(size=500)
    h = np.zeros(40)
    h[17] = 0.5
    out = dsp.fft_convolve(x, h)
    np.testing.assert_allclose(out[17:517], 0.5 * x, atol=1e-12)
    np.testing.assert_allclose(out[:17], 0.0, atol=1e-12)


def test_convolve_rate_mismatch():
    with pytest.raises(SampleRateError):
        dsp.fft_convolve(Waveform(np.ones(10), 16000), np.ones(3))


# -- wav ---------------------------------------------------------------------------------
def test_wav_round_trip_float32(tmp_path):
    x = np.random.default_rng(7).uniform(-0.9, 0.9, size=1234).astype(np.float32)
    dsp.write_wav(tmp_path / "a.wav", Waveform(x.astype(np.float64)))
    back = dsp.read_wav(tmp_path / "a.wav")
    assert back.sample_rate == FS
    np.testing.assert_array_equal(back.samples, x.astype(np.float64))


def test_wav_wrong_rate_rejected(tmp_path):
    from scipy.io import wavfile

    wavfile.write(tmp_path / "b.wav", 16000, np.zeros(100, np.float32))
    with pytest.raises(SampleRateError):
        dsp.read_wav(tmp_path / "b.wav")


def test_waveform_rejects_stereo_and_nan():
    with pytest.raises(DimensionError):
        Waveform(np.zeros((10, 2)))
    with pytest.raises(ParameterError):
        Waveform(np.array([0.0, np.nan]))


# -- griffin-lim -------------------------------------------------------------------------
def test_griffin_lim_tone_peak():
    t = np.arange(FS // 2) / FS
    mel = dsp.mel_spectrogram(Waveform(0.5 * np.sin(2 * np.pi * 1000 * t)))
    y = dsp.griffin_lim(mel, n_iter=32)
    spec = np.abs(np.fft.rfft(y.samples * np.hanning(len(y.samples))))
    peak_hz = np.argmax(spec) * FS / len(y.samples)
    bin_hz = FS / 2048
    assert abs(peak_hz - 1000) <= bin_hz


def test_griffin_lim_silence():
    mel = np.full((20, 80), np.log(1e-10))
    y = dsp.griffin_lim(mel, n_iter=4)
    assert np.sqrt(np.mean(y.samples ** 2)) < 1e-3


def test_griffin_lim_error_non_increasing():
    x = np.random.default_rng(8).normal(size=8000) * 0.1
    _, errs = dsp.griffin_lim(dsp.mel_spectrogram(Waveform(x)), n_iter=32, return_errors=True)
    assert errs[-1] <= errs[0]
    assert all(b <= a + 1e-6 for a, b in zip(errs, errs[1:]))


def test_griffin_lim_rejects_zero_iterations():
    with pytest.raises(ParameterError):
        dsp.griffin_lim(np.zeros((3, 80)), n_iter=0)


# -- cepstra and MCD -----------------------------------------------------------------------
def test_constant_frame_only_order_zero():
    cep = dsp.mel_cepstrum(np.full((3, 80), 2.5))
    assert abs(cep[0, 0] - 2.5 * np.sqrt(80)) < 1e-10
    np.testing.assert_allclose(cep[:, 1:], 0.0, atol=1e-12)


@pytest.mark.parametrize("k", [1, 5, 13])
def test_dct_basis_vector(k):
    m = np.arange(80)
    frame = np.sqrt(2 / 80) * np.cos(np.pi * (2 * m + 1) * k / 160)
    cep = dsp.mel_cepstrum(frame[None, :])[0]
    expected = np.zeros(14)
    expected[k] = 1.0
    np.testing.assert_allclose(cep, expected, atol=1e-12)


def test_cepstrum_linear():
    r = np.random.default_rng(9)
    a, b = r.normal(size=(4, 80)), r.normal(size=(4, 80))
    np.testing.assert_allclose(dsp.mel_cepstrum(a + b), dsp.mel_cepstrum(a) + dsp.mel_cepstrum(b), atol=1e-12)


def test_mcd_self_zero_and_symmetric():
    r = np.random.default_rng(10)
    a, b = r.normal(size=(6, 14)), r.normal(size=(6, 14))
    assert dsp.mcd(a, a) == 0.0
    assert dsp.mcd(a, b) == dsp.mcd(b, a)


def test_mcd_unit_delta_closed_form():
    a = np.random.default_rng(11).normal(size=(9, 14))
    b = a.copy()
    b[:, 1] += 1.0
    assert abs(dsp.mcd(a, b) - 10 / np.log(10) * np.sqrt(2)) < 1e-6
    assert abs(dsp.mcd(a, b) - 6.1419) < 1e-4


def test_mcd_order_zero_ignored_and_linear_scaling():
    r = np.random.default_rng(12)
    a = r.normal(size=(5, 14))
    d = r.normal(size=(5, 14))
    d[:, 0] = 0.0
    one = dsp.mcd(a, a + d)
    e = np.zeros_like(d)
    e[:, 0] = 100.0
    assert dsp.mcd(a, a + e) == 0.0
    # per-frame distances scale linearly
    assert abs(dsp.mcd(a, a + 3 * d) - 3 * one) < 1e-9


def test_mcd_truncates_to_shorter():
    r = np.random.default_rng(13)
    a = r.normal(size=(10, 14))
    assert dsp.mcd(a, a[:4]) == 0.0


def test_mcd_empty_rejected():
    with pytest.raises(EmptyInputError):
        dsp.mcd(np.zeros((0, 14)), np.zeros((3, 14)))
