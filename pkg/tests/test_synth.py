import numpy as np
import pytest

from eatts import corpus as C
from eatts.exceptions import ConfigurationError, DimensionError, EmptyInputError, ParameterError
from eatts.extractor import EmbeddingExtractor
from eatts.gradcheck import grad_check
from eatts.synth import (SynthConfig, SynthModel, TrainedSystem, condition_concat, length_regulate,
                         recon_loss, regulate_index, train_tts)

TINY = SynthConfig(d_enc=3, prenet_dim=4, decoder_dim=5, spk_dim=2, env_dim=2, n_mels=3)


# -- length regulator --------------------------------------------------------------------
def test_unit_durations_identity():
    e = np.arange(12.0).reshape(4, 3)
    np.testing.assert_array_equal(length_regulate(e, [1, 1, 1, 1]).data, e)


def test_two_rows_expand():
    e = np.array([[1.0, 0.0], [0.0, 1.0]])
    out = length_regulate(e, [2, 3]).data
    np.testing.assert_array_equal(out, [e[0], e[0], e[1], e[1], e[1]])


def test_regulated_length_is_sum_of_durations():
    r = np.random.default_rng(0)
    for _ in range(50):
        n = int(r.integers(1, 8))
        d = r.integers(1, 6, size=n)
        e = r.normal(size=(n, 4))
        out = length_regulate(e, d).data
        assert out.shape == (int(d.sum()), 4)
        row = 0
        for k in range(n):  # direct count of each block
            for _ in range(d[k]):
                np.testing.assert_array_equal(out[row], e[k])
                row += 1


def test_regulate_errors():
    with pytest.raises(DimensionError):
        length_regulate(np.ones((3, 2)), [1, 2])
    with pytest.raises(ParameterError):
        regulate_index([2, 0])


# -- conditioning ------------------------------------------------------------------------
def test_condition_single_frame():
    out = condition_concat(np.ones((1, 3)), np.array([0.6, 0.8]), np.array([1.0, 0.0]))
    np.testing.assert_array_equal(out.data, [[1, 1, 1, 0.6, 0.8, 1.0, 0.0]])


def test_condition_columns_constant_over_time():
    r = np.random.default_rng(1)
    reg = r.normal(size=(7, 4))
    s, e = r.normal(size=3), r.normal(size=2)
    out = condition_concat(reg, s, e).data
    np.testing.assert_array_equal(out[:, :4], reg)
    assert np.all(out[:, 4:7] == s) and np.all(out[:, 7:] == e)


def test_condition_swap_changes_iff_different():
    reg = np.zeros((2, 1))
    a, b = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    assert not np.array_equal(condition_concat(reg, a, b).data, condition_concat(reg, b, a).data)
    assert np.array_equal(condition_concat(reg, a, a).data, condition_concat(reg, a, a).data)


def test_condition_batched():
    out = condition_concat(np.zeros((2, 3, 1)), np.array([[1.0], [2.0]]), np.array([[3.0], [4.0]])).data
    assert out.shape == (2, 3, 3)
    np.testing.assert_array_equal(out[1, :, 1:], [[2, 4]] * 3)


# -- reconstruction loss -----------------------------------------------------------------
def test_recon_loss_examples():
    r = np.random.default_rng(2)
    t = r.normal(size=(6, 80))
    assert float(recon_loss(t, t).data) == 0.0
    assert float(recon_loss(t + 1.0, t).data) == pytest.approx(1.0, abs=1e-12)
    e = r.normal(size=t.shape)
    one = float(recon_loss(t + e, t).data)
    assert float(recon_loss(t + 2 * e, t).data) == pytest.approx(4 * one, rel=1e-12)


def test_recon_loss_mask_and_shape():
    t = np.zeros((1, 4, 2))
    p = np.ones((1, 4, 2))
    p[0, 2:] = 5.0
    assert float(recon_loss(p, t, np.array([[1, 1, 0, 0]])).data) == pytest.approx(1.0)
    with pytest.raises(DimensionError):
        recon_loss(np.ones((3, 2)), np.ones((2, 3)))


# -- decoder -----------------------------------------------------------------------------
def tiny_model(seed=0):
    return SynthModel.create(TINY, "proposed", seed=seed, mel_mean=np.zeros(3), mel_std=np.ones(3))


def test_decode_length_contract():
    m = tiny_model()
    cond = np.random.default_rng(3).normal(size=(5, TINY.cond_dim)).astype(np.float32)
    assert m.decode_mel(cond).shape == (5, 3)
    with pytest.raises(EmptyInputError):
        m.decode_mel(np.zeros((0, TINY.cond_dim)))


def test_zero_weights_give_bias():
    m = tiny_model()
    for k, t in m.params.items():
        if k != "out_b":
            t.data[...] = 0.0
    m.params["out_b"].data[...] = [0.5, -1.0, 2.0]
    out = m.decode_mel(np.zeros((4, TINY.cond_dim), np.float32)).data
    np.testing.assert_array_equal(out, np.tile([0.5, -1.0, 2.0], (4, 1)))


def test_first_frame_teacher_forced_equals_free_running():
    m = tiny_model(1)
    r = np.random.default_rng(4)
    cond = r.normal(size=(6, TINY.cond_dim)).astype(np.float32)
    target = r.normal(size=(6, 3)).astype(np.float32)
    tf = m.decode_mel(cond, target).data
    fr = m.decode_mel(cond).data
    np.testing.assert_array_equal(tf[0], fr[0])
    assert not np.array_equal(tf[1:], fr[1:])


@pytest.mark.parametrize("teacher", [True, False])
def test_decode_mel_recon_gradients(teacher):
    m = tiny_model(2)
    r = np.random.default_rng(5)
    cond = r.normal(size=(3, TINY.cond_dim))
    target = r.normal(size=(3, 3))
    names = ["dec_W", "dec_U", "dec_b", "out_W", "out_b", "pre1_W", "pre2_W"]
    point = {k: m.params[k].data.astype(np.float64) for k in names}
    point["cond"] = cond

    def f(t):
        for k in names:
            m.params[k] = t[k]
        return recon_loss(m.decode_mel(t["cond"], target if teacher else None), target)

    rep = grad_check(f, point, h=1e-5, tolerance=1e-4)
    assert rep.passed, rep.max_rel_error


def test_mode_validation():
    with pytest.raises(ParameterError):
        SynthModel.create(TINY, "joint")


# -- training ----------------------------------------------------------------------------
@pytest.fixture(scope="module")
def entangled(tmp_path_factory):
    tc = C.build_tts_corpus(4, 4, 0.05, 0.3, tmp_path_factory.mktemp("tc"), seed=21)
    return tc


@pytest.fixture(scope="module")
def extractors(entangled):
    def make(seed):
        return EmbeddingExtractor(embed_dim=4, hidden_dim=8, n_lstm_layers=1, random_state=seed).initialize()

    return make(1), make(2)


SMALL = SynthConfig(d_enc=8, prenet_dim=8, decoder_dim=16, spk_dim=4, env_dim=4)


def test_frozen_extractors_bitwise_unchanged(entangled, extractors):
    spk, env = extractors
    before = {k: v.copy() for k, v in spk.to_arrays().items()}
    sysm = train_tts(entangled.manifest, entangled.features, spk, env, "proposed", True, n_steps=3,
                     config=SMALL, batch_pairs=2)
    for k, v in sysm.spk_extractor.to_arrays().items():
        if k != "loss_trace":
            assert v.tobytes() == before[k].tobytes(), k
    assert all(v.tobytes() == before[k].tobytes() for k, v in spk.to_arrays().items())


def test_joint_mode_moves_extractors(entangled, extractors):
    spk, env = extractors
    sysm = train_tts(entangled.manifest, entangled.features, spk, env, "proposed", False, n_steps=2,
                     config=SMALL, batch_pairs=2)
    assert not np.array_equal(sysm.spk_extractor.params_["proj_W"].data, spk.params_["proj_W"].data)


def test_proposed_total_is_sum(entangled, extractors):
    sysm = train_tts(entangled.manifest, entangled.features, *extractors, n_steps=3, config=SMALL, batch_pairs=2)
    for t in sysm.trace:
        assert abs(t.total - (t.l_spk + t.l_env + t.l_recon)) < 1e-9


def test_baseline_heads_get_gradients(entangled):
    kw = dict(mode="baseline", config=SMALL, batch_pairs=2, seed=3)
    start = train_tts(entangled.manifest, entangled.features, n_steps=0, **kw)
    moved = train_tts(entangled.manifest, entangled.features, n_steps=2, **kw)
    for k in ("cls_spk_W", "cls_env_W"):
        assert not np.array_equal(start.model.params[k].data, moved.model.params[k].data)
    n_spk = len(moved.model.speakers)
    t = moved.trace[0]
    # cross-entropy of an untrained head sits near ln(n_classes)
    assert 0.5 * np.log(n_spk) < t.l_spk < 2 * np.log(n_spk)
    assert abs(t.total - (t.l_spk + t.l_env + t.l_recon)) < 1e-9


def test_proposed_needs_extractors(entangled):
    with pytest.raises(ConfigurationError):
        train_tts(entangled.manifest, entangled.features, mode="proposed", n_steps=1, config=SMALL)


def test_width_mismatch(entangled, extractors):
    with pytest.raises(DimensionError):
        train_tts(entangled.manifest, entangled.features, *extractors, n_steps=1,
                  config=SynthConfig(spk_dim=8, env_dim=4))


def test_training_deterministic_and_round_trip(entangled, extractors, tmp_path):
    a = train_tts(entangled.manifest, entangled.features, *extractors, n_steps=3, seed=4, config=SMALL, batch_pairs=2)
    b = train_tts(entangled.manifest, entangled.features, *extractors, n_steps=3, seed=4, config=SMALL, batch_pairs=2)
    assert [t.total for t in a.trace] == [t.total for t in b.trace]
    r = entangled.manifest[0]
    ref = entangled.features[r.utt_id]
    mel = a.synthesize(r.symbols, r.durations, ref, ref)
    assert mel.shape == (sum(r.durations), 80)
    assert mel.tobytes() == a.synthesize(r.symbols, r.durations, ref, ref).tobytes()
    a.save(tmp_path / "s.eatts")
    back = TrainedSystem.load(tmp_path / "s.eatts")
    assert back.synthesize(r.symbols, r.durations, ref, ref).tobytes() == mel.tobytes()
    assert [t.total for t in back.trace] == [t.total for t in a.trace]


def test_synthesize_errors(entangled, extractors):
    a = train_tts(entangled.manifest, entangled.features, *extractors, n_steps=1, config=SMALL, batch_pairs=2)
    ref = entangled.features[entangled.manifest[0].utt_id]
    with pytest.raises(EmptyInputError):
        a.synthesize([], [], ref, ref)
    with pytest.raises(DimensionError):
        a.synthesize(["aa", "iy"], [3], ref, ref)
    with pytest.raises(DimensionError):
        a.synthesize(["aa"], [3], ref[:40], ref)


def test_recon_converges_on_small_corpus(entangled, extractors):
    sysm = train_tts(entangled.manifest, entangled.features, *extractors, n_steps=120, config=SMALL,
                     batch_pairs=2)
    rec = [t.l_recon for t in sysm.trace]
    assert np.mean(rec[-50:]) < np.mean(rec[:10])
