"""End-to-end desk-scale reproduction: corpora, extractors, both synthesisers,
MCD cases, environment selectivity, leakage and classification probes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .corpus import Corpus, build_extractor_corpus, build_tts_corpus
from .extractor import ExtractorConfig, train_extractor
from .synth import SynthConfig, train_tts
from .utils import stable_seed

log = logging.getLogger(__name__)

SUMMARY_HEADER = ("seed", "system", "metric", "value")


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and the cause."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class Stage:
    name: str

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def extractor_config(cfg, factor="speaker"):
    key = "extractor.spk_embed_dim" if factor == "speaker" else "extractor.env_embed_dim"
    return ExtractorConfig(
        n_lstm_layers=cfg["extractor.layers"],
        hidden_dim=cfg["extractor.hidden_dim"],
        embed_dim=cfg[key],
        crop_frames=cfg["extractor.crop_frames"],
        s_groups=cfg["extractor.s_groups"],
        u_per_group=cfg["extractor.u_per_group"],
        crop_norm=factor != "speaker" and cfg["extractor.env_crop_norm"],
    )


def synth_config(cfg):
    return SynthConfig(
        d_enc=cfg["synth.d_enc"],
        prenet_dim=cfg["synth.prenet_dim"],
        decoder_dim=cfg["synth.decoder_dim"],
        spk_dim=cfg["extractor.spk_embed_dim"],
        env_dim=cfg["extractor.env_embed_dim"],
    )


def build_corpora(cfg, out_dir):
    out = Path(out_dir)
    seed = cfg["seed"]
    with Stage("corpus-extractor"):
        xc = build_extractor_corpus(cfg["xc.envs"], cfg["xc.speakers_per_env"], cfg["xc.utts"],
                                    out / "extractor_corpus", seed=stable_seed("xc", seed),
                                    heldout_frac=cfg["xc.heldout_frac"])
    with Stage("corpus-tts"):
        tc = build_tts_corpus(cfg["tts.pairs"], cfg["tts.utts"], cfg["tts.heldout_pair_frac"],
                              cfg["tts.heldout_utt_frac"], out / "tts_corpus", seed=stable_seed("tts", seed))
    return xc, tc


class GroundTruth:
    """Memoised ground-truth renderer over a TTS corpus."""

    def __init__(self, corpus):
        self.corpus = corpus
        self._cache = {}

    def __call__(self, spk, env, symbols, durations):
        key = (spk, env, tuple(symbols), tuple(durations))
        if key not in self._cache:
            self._cache[key] = self.corpus.render_mel(spk, env, list(symbols), list(durations))
        return self._cache[key]


def _synth_fn(system, features):
    def run(trial):
        return system.synthesize(trial.symbols, trial.durations, features[trial.spk_ref], features[trial.env_ref])

    return run


def selectivity(pred, trial, alternatives, gt):
    """Whether ``pred`` is closer to the requested environment than to most others."""
    own = ev.mel_mcd(pred, gt(trial.speaker_id, trial.env_id, trial.symbols, trial.durations))
    wins = sum(
        own < ev.mel_mcd(pred, gt(trial.speaker_id, env, trial.symbols, trial.durations))
        for env in alternatives
    )
    return 2 * wins > len(alternatives)


def classification_cells(evaluator, corpus, preds, trials, seed, epochs, lr):
    """Top-1 / top-5 speaker and environment accuracy of synthesised speech.

    Probes are trained on embeddings of natural training utterances and
    applied to embeddings of the synthesised mels.
    """
    spk_ext, env_ext = evaluator
    train = [r for r in corpus.manifest if r.split == "train"]
    feats = corpus.features
    cells = {}
    for name, ext, attr, label in (("spk", spk_ext, "speaker_id", lambda t: t.speaker_id),
                                   ("env", env_ext, "env_id", lambda t: t.env_id)):
        e_nat = ext.transform([feats[r.utt_id] for r in train])
        probe = ev.LinearProbe(n_epochs=epochs, learning_rate=lr,
                               random_state=stable_seed(seed, "cls", name)).fit(e_nat, [getattr(r, attr) for r in train])
        e_syn = ext.transform(preds)
        y = [label(t) for t in trials]
        cells[f"cls_{name}_top1"] = ev.topk_accuracy(probe, e_syn, y, 1)
        cells[f"cls_{name}_top5"] = ev.topk_accuracy(probe, e_syn, y, min(5, len(probe.classes_)))
    return cells


def run_seed(cfg, xc, tc, k, gt, dump_dir=None):
    """One full replicate; returns ``[(system, metric, value), ...]``.

    With ``dump_dir`` set, both extractors' embeddings of the cross corpus
    are written there together with their 2-D projections.
    """
    s = stable_seed("repro", cfg["seed"], k)
    rows = []
    with Stage("extractor-speaker"):
        spk_ext, spk_trace = train_extractor(xc.manifest, xc.features, "speaker", extractor_config(cfg, "speaker"),
                                             cfg["extractor.spk_steps"], stable_seed(s, "spk"), cfg["extractor.lr"])
    with Stage("extractor-environment"):
        env_ext, env_trace = train_extractor(xc.manifest, xc.features, "environment",
                                             extractor_config(cfg, "environment"),
                                             cfg["extractor.env_steps"], stable_seed(s, "env"), cfg["extractor.lr"])
    for name, trace in (("spk", spk_trace), ("env", env_trace)):
        rows.append(("extractor", f"ge2e_{name}_first10", float(np.mean(trace[:10]))))
        rows.append(("extractor", f"ge2e_{name}_last100", float(np.mean(trace[-100:]))))

    with Stage("leakage-probe"):
        rep = ev.leakage_probe(spk_ext, env_ext, xc.manifest, xc.features, seed=s)
    for emb, factor, acc, chance in rep.as_rows():
        rows.append(("extractor", f"leak_{emb}_to_{factor}", acc))
        rows.append(("extractor", f"chance_{emb}_to_{factor}", chance))
    if dump_dir is not None:
        with Stage("dump-embeddings"):
            d = Path(dump_dir)
            d.mkdir(parents=True, exist_ok=True)
            for name, ext in (("speaker", spk_ext), ("environment", env_ext)):
                ev.dump_embeddings(ext, xc.manifest, xc.features, d / f"{name}_emb.tsv", d / f"{name}_pca.tsv")

    systems = {}
    for mode in ("proposed", "baseline"):
        with Stage(f"tts-{mode}"):
            systems[mode] = train_tts(
                tc.manifest, tc.features, spk_ext, env_ext, mode=mode,
                freeze_extractors=cfg["synth.freeze_extractors"], n_steps=cfg["synth.steps"],
                seed=stable_seed(s, mode), config=synth_config(cfg), batch_pairs=cfg["synth.batch_pairs"],
                learning_rate=cfg["synth.lr"],
                weights=(cfg["synth.w_spk"], cfg["synth.w_env"], cfg["synth.w_recon"]),
            )
        trace = [t.l_recon for t in systems[mode].trace]
        rows.append((mode, "recon_first10", float(np.mean(trace[:10]))))
        rows.append((mode, "recon_last50", float(np.mean(trace[-50:]))))

    with Stage("eval-cases"):
        cases = ev.build_eval_cases(tc, cfg["eval.max_trials"], seed=s)
    trained_envs = sorted({e for p, e in tc.plan.pairs if (p, e) not in tc.plan.heldout})
    for mode, system in systems.items():
        with Stage(f"eval-mcd-{mode}"):
            synth = _synth_fn(system, tc.features)
            preds = {}
            for case_id, case in cases.items():
                cache = [synth(t) for t in case.trials]
                preds[case_id] = cache
                it = iter(cache)
                res = ev.eval_mcd(case, lambda t: next(it), gt)
                rows.append((mode, f"mcd_{case_id}", res.mean))
            unseen = cases["unseen_combo"].trials
            hits = [selectivity(p, t, [e for e in trained_envs if e != t.env_id], gt)
                    for p, t in zip(preds["unseen_combo"], unseen)]
            rows.append((mode, "env_selectivity_hits", float(sum(hits))))
            rows.append((mode, "env_selectivity_trials", float(len(hits))))
        with Stage(f"eval-classify-{mode}"):
            cells = classification_cells((spk_ext, env_ext), tc, preds["unseen_combo"], unseen, s,
                                         cfg["probe.epochs"], cfg["probe.lr"])
            rows.extend((mode, k2, v) for k2, v in sorted(cells.items()))
    return rows


def _metric(rows, seed, system, metric):
    for r in rows:
        if r[0] == seed and r[1] == system and r[2] == metric:
            return r[3]
    raise KeyError((seed, system, metric))


def verdicts(rows, n_seeds):
    """Aggregate rows: multi-seed counts for the directional claims."""
    seeds = [str(k) for k in range(n_seeds)]
    better = sum(_metric(rows, s, "proposed", "mcd_unseen_combo") <= _metric(rows, s, "baseline", "mcd_unseen_combo")
                 for s in seeds)
    gap = sum(_metric(rows, s, "proposed", "mcd_unseen_combo") >= _metric(rows, s, "proposed", "mcd_seen_combo")
              for s in seeds)
    hits = sum(_metric(rows, s, "proposed", "env_selectivity_hits") for s in seeds)
    trials = sum(_metric(rows, s, "proposed", "env_selectivity_trials") for s in seeds)
    disentangled = 0
    for s in seeds:
        def m(name):
            return _metric(rows, s, "extractor", name)
        on_ok = m("leak_speaker_emb_to_speaker") >= 0.8 and m("leak_environment_emb_to_environment") >= 0.8
        off_ok = (m("leak_speaker_emb_to_environment") <= m("chance_speaker_emb_to_environment") + 0.2
                  and m("leak_environment_emb_to_speaker") <= m("chance_environment_emb_to_speaker") + 0.2)
        disentangled += on_ok and off_ok
    return [
        ("all", "proposed", "seeds_unseen_mcd_le_baseline", float(better)),
        ("all", "proposed", "seeds_unseen_mcd_ge_seen", float(gap)),
        ("all", "proposed", "env_selectivity_rate", hits / trials if trials else float("nan")),
        ("all", "extractor", "seeds_disentangled", float(disentangled)),
        ("all", "all", "n_seeds", float(n_seeds)),
    ]


def repro_desk(cfg, out_dir):
    """Run every stage for ``repro.seeds`` replicates; returns the summary path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out)
    xc, tc = build_corpora(cfg, out)
    gt = GroundTruth(tc)
    rows = []
    n = cfg["repro.seeds"]
    for k in range(n):
        dump = out / "embeddings" if k == 0 else None
        rows.extend((str(k),) + r for r in run_seed(cfg, xc, tc, k, gt, dump))
    rows.extend(verdicts(rows, n))
    path = out / "summary.tsv"
    ev.write_tsv(path, SUMMARY_HEADER, rows)
    return path


def read_summary(path):
    """``{(seed, system, metric): value}`` from a summary TSV."""
    out = {}
    lines = Path(path).read_text().splitlines()
    for line in lines[1:]:
        seed, system, metric, value = line.split("\t")
        out[(seed, system, metric)] = float(value)
    return out


def load_corpus(path):
    """Accept a corpus directory or a path to its ``manifest.tsv``."""
    p = Path(path)
    return Corpus.load(p.parent if p.is_file() else p)
