import pytest

from eatts.exceptions import ConfigurationError
from eatts.runconfig import DESK, PAPER, RunConfig


def test_presets():
    assert RunConfig()["tts.pairs"] == 12
    p = RunConfig("paper")
    assert p["tts.pairs"] == 108 and p["extractor.spk_embed_dim"] == 256
    assert set(PAPER) <= set(DESK)
    with pytest.raises(ConfigurationError):
        RunConfig("laptop")


def test_overrides_are_typed():
    c = RunConfig(overrides={"synth.steps": "20", "synth.freeze_extractors": "no", "synth.lr": "0.5"})
    assert c["synth.steps"] == 20 and c["synth.freeze_extractors"] is False and c["synth.lr"] == 0.5


@pytest.mark.parametrize("text", ["nope=1", "synth.steps=abc", "synth.freeze_extractors=maybe", "justtext"])
def test_bad_overrides(text):
    with pytest.raises(ConfigurationError):
        RunConfig().update_from_text(text)


def test_text_file_with_comments(tmp_path):
    f = tmp_path / "o.txt"
    f.write_text("# comment\nseed = 7  # trailing\n\nrepro.seeds=2\n")
    c = RunConfig().update_from_file(f)
    assert c["seed"] == 7 and c["repro.seeds"] == 2
    with pytest.raises(ConfigurationError):
        RunConfig().update_from_file(tmp_path / "missing.txt")


def test_echo_round_trip(tmp_path):
    c = RunConfig(overrides={"seed": 3})
    c.echo(tmp_path)
    text = (tmp_path / "effective_config.txt").read_text()
    assert text.startswith("# preset=desk\n")
    again = RunConfig().update_from_text(text)
    assert again.values == c.values


def test_unknown_key_lookup():
    with pytest.raises(ConfigurationError):
        RunConfig()["extractor.embed_dim"]
