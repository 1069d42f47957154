import numpy as np
import pytest

from eatts import dsp, rir
from eatts.exceptions import DegenerateVectorError, EstimationError, ParameterError
from eatts.rir import Rir, RirSpec

FS = 22050


def independent_rt60(taps, skip):
    """Schroeder EDC with a plain loop-free formula and a two-point slope."""
    e = np.asarray(taps[skip:], dtype=np.float64) ** 2
    edc = 10 * np.log10(np.flip(np.cumsum(np.flip(e))) / e.sum())
    i5 = np.argmax(edc <= -5.0)
    i25 = np.argmax(edc <= -25.0)
    return 3.0 * (i25 - i5) / FS  # 20 dB span scaled to 60 dB


@pytest.mark.parametrize("rt60", [0.1, 0.3, 0.6, 1.0])
def test_rt60_grid_within_20_percent(rt60):
    r = rir.synth_rir(RirSpec(rt60=rt60, direct_delay=40, drr_db=0.0, seed=7))
    est = rir.estimate_rt60(r)
    assert 0.8 * rt60 <= est <= 1.2 * rt60
    # estimator agrees with an independent two-point Schroeder reading
    assert abs(est - independent_rt60(r.taps, 41 + 22)) <= 0.1 * rt60


def test_short_rt60_with_strong_direct_path():
    r = rir.synth_rir(RirSpec(rt60=0.05, direct_delay=10, drr_db=30.0, seed=1))
    assert 0.04 <= rir.estimate_rt60(r) <= 0.06


def test_rt60_example_point():
    assert 0.24 <= rir.estimate_rt60(rir.synth_rir(RirSpec(rt60=0.3, drr_db=3.0, seed=4))) <= 0.36


def test_same_seed_bitwise_identical():
    spec = RirSpec(rt60=0.4, direct_delay=5, drr_db=2.0, seed=11)
    assert rir.synth_rir(spec).taps.tobytes() == rir.synth_rir(spec).taps.tobytes()
    assert rir.synth_rir(spec).taps.tobytes() != rir.synth_rir(RirSpec(0.4, 5, 2.0, seed=12)).taps.tobytes()


def test_direct_tap_is_maximum_and_energy_normalised():
    r = rir.synth_rir(RirSpec(rt60=0.8, direct_delay=33, drr_db=-3.0, seed=2))
    assert int(np.argmax(np.abs(r.taps))) == 33
    assert abs(np.sum(r.taps ** 2) - 1.0) < 1e-6


@pytest.mark.parametrize("drr", [-3.0, 0.0, 6.0, 12.0])
def test_drr_matches_spec(drr):
    r = rir.synth_rir(RirSpec(rt60=0.5, direct_delay=20, drr_db=drr, seed=3))
    k = 20
    measured = 10 * np.log10(r.taps[k] ** 2 / np.sum(r.taps[k + 1:] ** 2))
    assert abs(measured - drr) < 0.1


def test_high_drr_is_near_identity():
    d = 25
    r = rir.synth_rir(RirSpec(rt60=0.2, direct_delay=d, drr_db=60.0, seed=5))
    x = np.random.default_rng(0).uniform(-1, 1, size=3000)
    y = dsp.fft_convolve(x, r)
    assert np.max(np.abs(y[d:d + len(x)] - x)) < 1e-2


def test_delta_rir_identity_through_apply():
    x = np.random.default_rng(1).normal(size=2000)
    delta = Rir(np.array([1.0]))
    np.testing.assert_allclose(rir.apply_rir(x, delta), x, atol=1e-12)


def test_clean_environment_is_bit_exact():
    x = np.random.default_rng(2).normal(size=500)
    assert rir.apply_rir(x, None).tobytes() == x.tobytes()


def test_pure_impulse_has_no_decay():
    with pytest.raises(EstimationError):
        rir.estimate_rt60(Rir(np.r_[np.zeros(5), 1.0, np.zeros(100)]))


def test_rt60_scale_invariant():
    r = rir.synth_rir(RirSpec(rt60=0.3, drr_db=0.0, seed=6))
    assert rir.estimate_rt60(Rir(0.5 * r.taps)) == pytest.approx(rir.estimate_rt60(r), rel=1e-9)


def test_normalize_examples():
    np.testing.assert_array_equal(rir.normalize_rir(Rir(np.array([2.0, 0.0, 0.0]))).taps, [1.0, 0.0, 0.0])
    r = Rir(np.random.default_rng(3).normal(size=300))
    once = rir.normalize_rir(r)
    assert 1 - 1e-6 <= np.sum(once.taps ** 2) <= 1 + 1e-6
    np.testing.assert_allclose(rir.normalize_rir(once).taps, once.taps, atol=1e-15)
    np.testing.assert_allclose(once.taps / once.taps[0], r.taps / r.taps[0])


def test_normalize_zero_energy():
    with pytest.raises(DegenerateVectorError):
        rir.normalize_rir(Rir(np.zeros(4)))


@pytest.mark.parametrize("kw", [dict(rt60=0.01), dict(rt60=3.0), dict(rt60=0.3, direct_delay=-1),
                                dict(rt60=0.3, direct_delay=10, length=5)])
def test_invalid_specs(kw):
    with pytest.raises(ParameterError):
        RirSpec(**kw)


def test_spec_text_round_trip():
    spec = RirSpec(rt60=0.45, direct_delay=12, drr_db=-1.5, length=None, seed=99)
    assert RirSpec.from_text(spec.to_text()) == spec
    with pytest.raises(ParameterError):
        RirSpec.from_text("rt60=0.3\ncolour=blue")


def test_load_rir_from_wav(tmp_path):
    r = rir.synth_rir(RirSpec(rt60=0.3, seed=8))
    dsp.write_wav(tmp_path / "r.wav", dsp.Waveform(r.taps))
    back = rir.load_rir(tmp_path / "r.wav", "room")
    assert back.id == "room"
    np.testing.assert_allclose(back.taps, r.taps, atol=1e-6)
