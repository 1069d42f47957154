import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from eatts import corpus as C
from eatts.exceptions import DegenerateVectorError, DimensionError
from eatts.extractor import EmbeddingExtractor, ExtractorConfig, train_extractor

SMALL = dict(n_lstm_layers=1, hidden_dim=8, embed_dim=4, crop_frames=20, s_groups=2, u_per_group=2)


def small(**kw):
    args = dict(SMALL)
    args.update(kw)
    return EmbeddingExtractor(**args)


@pytest.fixture(scope="module")
def xc(tmp_path_factory):
    return C.build_extractor_corpus(3, 2, 4, tmp_path_factory.mktemp("xc"), seed=8)


def test_configs():
    assert ExtractorConfig() == ExtractorConfig(2, 64, 32, 80, 8, 4)
    p = ExtractorConfig.paper()
    assert (p.n_lstm_layers, p.hidden_dim, p.embed_dim, p.s_groups, p.u_per_group) == (3, 256, 256, 64, 10)


def test_forward_crop_unit_norm_and_deterministic():
    m = small().initialize()
    crop = np.random.default_rng(0).normal(size=(20, 80)).astype(np.float32)
    e = m.forward_crop(crop)
    assert abs(np.linalg.norm(e) - 1.0) < 1e-6
    assert e.tobytes() == m.forward_crop(crop).tobytes()


def test_zero_initialised_model_is_degenerate():
    m = small().initialize()
    for t in m.params_.values():
        t.data[...] = 0.0
    with pytest.raises(DegenerateVectorError):
        m.forward_crop(np.ones((20, 80), np.float32))


def test_crop_shape_errors():
    m = small().initialize()
    with pytest.raises(DimensionError):
        m.forward_crop(np.zeros((19, 80)))
    with pytest.raises(DimensionError):
        m.forward_crop(np.zeros((20, 40)))


def test_single_window_matches_forward_crop():
    m = small().initialize()
    crop = np.random.default_rng(1).normal(size=(20, 80)).astype(np.float32)
    np.testing.assert_allclose(m.infer_utterance(crop), m.forward_crop(crop), atol=1e-6)


def test_tiled_crop_matches_forward_crop():
    m = small().initialize()
    half = np.random.default_rng(2).normal(size=(10, 80)).astype(np.float32)
    # windows hop by half a crop, so a crop with that period makes every window identical
    crop = np.tile(half, (2, 1))
    utt = np.tile(crop, (4, 1))
    np.testing.assert_allclose(m.infer_utterance(utt), m.forward_crop(crop), atol=1e-6)


def test_constant_utterance_equals_forward_crop():
    m = small(crop_frames=10).initialize()
    row = np.random.default_rng(3).normal(size=(1, 80)).astype(np.float32)
    np.testing.assert_allclose(m.infer_utterance(np.tile(row, (47, 1))), m.forward_crop(np.tile(row, (10, 1))),
                               atol=1e-6)


def test_short_utterance_rejected():
    m = small().initialize()
    with pytest.raises(DimensionError):
        m.infer_utterance(np.zeros((19, 80)))


def test_window_starts_cover_tail():
    m = small()
    assert m.window_starts(20) == [0]
    assert m.window_starts(35) == [0, 10, 15]


def test_zero_steps_equals_initialisation(xc):
    model, trace = train_extractor(xc.manifest, xc.features, "speaker", ExtractorConfig(**SMALL), n_steps=0, seed=3)
    assert trace == []
    fresh = EmbeddingExtractor.from_config(ExtractorConfig(**SMALL), random_state=3).initialize(
        model.mel_mean_, model.mel_std_)
    for k, t in fresh.all_params().items():
        assert t.data.tobytes() == model.all_params()[k].data.tobytes()


def test_same_seed_identical_traces(xc):
    a = train_extractor(xc.manifest, xc.features, "environment", ExtractorConfig(**SMALL), 5, seed=4)[1]
    b = train_extractor(xc.manifest, xc.features, "environment", ExtractorConfig(**SMALL), 5, seed=4)[1]
    c = train_extractor(xc.manifest, xc.features, "environment", ExtractorConfig(**SMALL), 5, seed=5)[1]
    assert a == b and a != c


def test_w_stays_positive(xc):
    m = small(n_steps=30, learning_rate=0.5).fit(
        [xc.features[r.utt_id] for r in xc.manifest], [r.speaker_id for r in xc.manifest])
    assert m.scale_.w.data[0] > 0


def test_sklearn_contract(xc, tmp_path):
    est = small(n_steps=2)
    with pytest.raises(NotFittedError):
        est.transform([np.zeros((30, 80))])
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    X = [xc.features[r.utt_id] for r in xc.manifest]
    E = est.fit(X, [r.env_id for r in xc.manifest]).transform(X)
    assert E.shape == (len(X), 4)
    np.testing.assert_allclose(np.linalg.norm(E, axis=1), 1.0, atol=1e-6)
    est.save(tmp_path / "x.eatts")
    back = EmbeddingExtractor.load(tmp_path / "x.eatts")
    assert back.transform(X).tobytes() == E.tobytes()
    assert back.loss_trace_ == est.loss_trace_


def test_set_trainable_toggles_flags():
    m = small().initialize()
    m.set_trainable(False)
    assert not any(t.requires_grad for t in m.all_params().values())
    m.set_trainable(True)
    assert all(t.requires_grad for t in m.all_params().values())
