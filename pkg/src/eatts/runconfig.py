"""Run configuration: typed defaults, presets, and ``key=value`` overrides."""

from __future__ import annotations

from pathlib import Path

from .exceptions import ConfigurationError

DESK = {
    "seed": 0,
    "repro.seeds": 5,
    "xc.envs": 8,
    "xc.speakers_per_env": 4,
    "xc.utts": 10,
    "xc.heldout_frac": 0.2,
    "tts.pairs": 12,
    "tts.utts": 40,
    "tts.heldout_pair_frac": 0.05,
    "tts.heldout_utt_frac": 0.05,
    "extractor.layers": 2,
    "extractor.hidden_dim": 64,
    "extractor.spk_embed_dim": 4,
    "extractor.env_embed_dim": 4,
    "extractor.crop_frames": 80,
    "extractor.s_groups": 8,
    "extractor.u_per_group": 4,
    "extractor.spk_steps": 300,
    "extractor.env_steps": 600,
    "extractor.env_crop_norm": False,
    "extractor.lr": 1e-3,
    "synth.d_enc": 32,
    "synth.prenet_dim": 32,
    "synth.decoder_dim": 64,
    "synth.steps": 500,
    "synth.lr": 2e-3,
    "synth.batch_pairs": 8,
    "synth.freeze_extractors": True,
    "synth.w_spk": 1.0,
    "synth.w_env": 1.0,
    "synth.w_recon": 1.0,
    "probe.epochs": 200,
    "probe.lr": 0.05,
    "eval.max_trials": 12,
}

PAPER = dict(DESK, **{
    "xc.envs": 64,
    "xc.speakers_per_env": 10,
    "tts.pairs": 108,
    "tts.utts": 100,
    "extractor.layers": 3,
    "extractor.hidden_dim": 256,
    "extractor.spk_embed_dim": 256,
    "extractor.env_embed_dim": 256,
    "extractor.s_groups": 64,
    "extractor.u_per_group": 10,
    "synth.d_enc": 256,
    "synth.prenet_dim": 256,
    "synth.decoder_dim": 256,
})

PRESETS = {"desk": DESK, "paper": PAPER}


def _parse_value(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return type(default)(text)
    except ValueError:
        raise ConfigurationError(
            f"config key {key!r}: cannot read {text!r} as {type(default).__name__}"
        ) from None


class RunConfig:
    """A preset plus overrides.  Unknown keys are errors."""

    def __init__(self, preset="desk", overrides=None):
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        self.preset = preset
        self.values = dict(PRESETS[preset])
        for key, value in (overrides or {}).items():
            self.set(key, value)

    def set(self, key, value):
        if key not in self.values:
            raise ConfigurationError(f"unknown config key {key!r}")
        default = self.values[key]
        self.values[key] = _parse_value(key, value, default) if isinstance(value, str) else type(default)(value)

    def __getitem__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise ConfigurationError(f"unknown config key {key!r}") from None

    def update_from_text(self, text, source="<text>"):
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{source}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            self.set(key.strip(), value)
        return self

    def update_from_file(self, path):
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
        return self.update_from_text(text, str(path))

    def to_text(self):
        lines = [f"# preset={self.preset}"]
        lines += [f"{k}={self.values[k]}" for k in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def echo(self, out_dir):
        """Write the effective configuration next to a stage's outputs."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "effective_config.txt").write_text(self.to_text())
