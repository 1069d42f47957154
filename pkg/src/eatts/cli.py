"""Command-line entry point: ``eatts <group> <command> [options]``.

On failure the last line on stderr is machine readable::

    error<TAB>kind=<kind><TAB>stage=<stage><TAB>message=<text>
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

THREADS_ENV = "EATTS_THREADS"
EXIT_ERROR = 2


# -- helpers -------------------------------------------------------------------------
def _config(args):
    from .runconfig import RunConfig

    cfg = RunConfig(args.preset)
    if args.config:
        cfg.update_from_file(args.config)
    for item in args.set or []:
        cfg.update_from_text(item, "--set")
    return cfg


def _seed(args, cfg):
    return cfg["seed"] if args.seed is None else args.seed


def _read_mel_or_wav(path):
    from . import checkpoint
    from .dsp import mel_spectrogram, read_wav

    p = Path(path)
    if p.suffix.lower() == ".wav":
        return mel_spectrogram(read_wav(p)).astype(np.float32)
    if p.suffix.lower() == ".npy":
        return np.load(p).astype(np.float32)
    arrays, _ = checkpoint.load(p)
    if len(arrays) != 1:
        raise ValueError(f"{p} holds {len(arrays)} arrays; expected a single mel")
    return next(iter(arrays.values())).astype(np.float32)


def _write_mel(path, mel):
    from . import checkpoint

    p = Path(path)
    if p.suffix.lower() == ".npy":
        np.save(p, mel)
    else:
        checkpoint.save(p, {"mel": np.asarray(mel, np.float32)})


def _fmt(v):
    return f"{float(v):.6f}"


# -- corpus --------------------------------------------------------------------------
def cmd_corpus_build_extractor(args, cfg):
    from .corpus import build_extractor_corpus

    c = build_extractor_corpus(
        args.envs or cfg["xc.envs"], args.speakers_per_env or cfg["xc.speakers_per_env"],
        args.utts or cfg["xc.utts"], args.out, n_speakers=args.speakers, seed=_seed(args, cfg),
        heldout_frac=cfg["xc.heldout_frac"], render=not args.no_render,
    )
    cfg.echo(args.out)
    print(f"{len(c.manifest)} utterances -> {Path(args.out) / 'manifest.tsv'}")


def cmd_corpus_build_tts(args, cfg):
    from .corpus import build_tts_corpus

    c = build_tts_corpus(
        args.pairs or cfg["tts.pairs"], args.utts or cfg["tts.utts"], cfg["tts.heldout_pair_frac"],
        cfg["tts.heldout_utt_frac"], args.out, seed=_seed(args, cfg), render=not args.no_render,
    )
    cfg.echo(args.out)
    held = ",".join(f"{s}|{e}" for s, e in sorted(c.plan.heldout))
    print(f"{len(c.manifest)} utterances, heldout pairs {held} -> {Path(args.out) / 'manifest.tsv'}")


def cmd_corpus_render(args, cfg):
    from .corpus import render_corpus
    from .pipeline import load_corpus

    c = load_corpus(args.corpus)
    render_corpus(c)
    print(f"rendered {len(c.manifest)} utterances in {c.root}")


def cmd_features_extract(args, cfg):
    from . import checkpoint
    from .corpus import compute_features
    from .dsp import DEFAULT_CONFIG, mel_spectrogram, read_wav
    from .pipeline import load_corpus

    if bool(args.corpus) == bool(args.wav):
        raise ValueError("give exactly one of --corpus or --wav")
    if args.wav:
        if not args.out:
            raise ValueError("--out is required with --wav")
        feats = {Path(p).stem: mel_spectrogram(read_wav(p)).astype(np.float32) for p in args.wav}
        out = Path(args.out)
    else:
        c = load_corpus(args.corpus)
        feats = compute_features(c)
        out = Path(args.out) if args.out else c.root / "features.eatts"
    checkpoint.save(out, feats, {"stft_mel": DEFAULT_CONFIG.config_hash()})
    print(f"{len(feats)} log-mel arrays -> {out}")


# -- extractor -----------------------------------------------------------------------
def cmd_extractor_train(args, cfg):
    from .extractor import train_extractor
    from .pipeline import extractor_config, load_corpus

    c = load_corpus(args.manifest)
    key = "extractor.spk_steps" if args.group_by == "speaker" else "extractor.env_steps"
    steps = cfg[key] if args.steps is None else args.steps
    model, trace = train_extractor(c.manifest, c.features, args.group_by, extractor_config(cfg, args.group_by), steps,
                                   _seed(args, cfg), cfg["extractor.lr"])
    model.save(args.out)
    cfg.echo(Path(args.out).parent)
    if trace:
        print(f"loss first10={np.mean(trace[:10]):.4f} last={np.mean(trace[-min(100, len(trace)):]):.4f} -> {args.out}")
    else:
        print(f"initialised extractor -> {args.out}")


def cmd_extractor_embed(args, cfg):
    from .extractor import EmbeddingExtractor
    from .pipeline import load_corpus

    model = EmbeddingExtractor.load(args.ckpt)
    items = []
    if args.manifest:
        c = load_corpus(args.manifest)
        items = [(r.utt_id, c.features[r.utt_id]) for r in c.manifest]
    for path in args.wav or []:
        items.append((Path(path).stem, _read_mel_or_wav(path)))
    for path in args.mel or []:
        items.append((Path(path).stem, _read_mel_or_wav(path)))
    if not items:
        raise ValueError("nothing to embed: give --wav, --mel or --manifest")
    emb = model.transform([m for _, m in items])
    lines = ["\t".join([uid] + [_fmt(v) for v in e]) for (uid, _), e in zip(items, emb)]
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"{len(lines)} embeddings -> {args.out}")


# -- tts -----------------------------------------------------------------------------
def cmd_tts_train(args, cfg):
    from .extractor import EmbeddingExtractor
    from .pipeline import load_corpus, synth_config
    from .synth import train_tts

    c = load_corpus(args.manifest)
    spk = EmbeddingExtractor.load(args.spk_ckpt) if args.spk_ckpt else None
    env = EmbeddingExtractor.load(args.env_ckpt) if args.env_ckpt else None
    steps = cfg["synth.steps"] if args.steps is None else args.steps
    freeze = cfg["synth.freeze_extractors"] if args.freeze is None else args.freeze
    scfg = synth_config(cfg)
    if spk is not None:
        scfg = replace(scfg, spk_dim=spk.embed_dim)
    if env is not None:
        scfg = replace(scfg, env_dim=env.embed_dim)
    system = train_tts(c.manifest, c.features, spk, env, mode=args.mode, freeze_extractors=freeze,
                       n_steps=steps, seed=_seed(args, cfg), config=scfg,
                       batch_pairs=cfg["synth.batch_pairs"], learning_rate=cfg["synth.lr"],
                       weights=(cfg["synth.w_spk"], cfg["synth.w_env"], cfg["synth.w_recon"]))
    system.save(args.out)
    cfg.echo(Path(args.out).parent)
    if system.trace:
        last = system.trace[-1]
        print(f"recon={last.l_recon:.4f} spk={last.l_spk:.4f} env={last.l_env:.4f} -> {args.out}")


def _read_text_file(path):
    from .corpus import SYMBOLS

    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if len(lines) != 1:
        raise ValueError(f"{path}: expected one line 'symbols<TAB>durations', got {len(lines)}")
    sym_text, _, dur_text = lines[0].partition("\t")
    symbols = sym_text.split()
    for s in symbols:
        if s not in SYMBOLS:
            raise ValueError(f"{path}: unknown symbol {s!r}")
    durations = [int(d) for d in dur_text.replace(",", " ").split()]
    return symbols, durations


def cmd_tts_synth(args, cfg):
    from .dsp import griffin_lim, write_wav
    from .synth import TrainedSystem

    system = TrainedSystem.load(args.ckpt)
    symbols, durations = _read_text_file(args.text_file)
    mel = system.synthesize(symbols, durations, _read_mel_or_wav(args.spk_ref), _read_mel_or_wav(args.env_ref))
    _write_mel(args.out_mel, mel)
    msg = f"{mel.shape[0]} frames -> {args.out_mel}"
    if args.out_wav:
        write_wav(args.out_wav, griffin_lim(mel, n_iter=args.gl_iters))
        msg += f", {args.out_wav}"
    print(msg)


# -- eval ----------------------------------------------------------------------------
def cmd_eval_mcd(args, cfg):
    from . import evaluation as ev
    from .pipeline import GroundTruth, _synth_fn, load_corpus
    from .synth import TrainedSystem

    c = load_corpus(args.manifest)
    system = TrainedSystem.load(args.tts_ckpt)
    cases = ev.build_eval_cases(c, cfg["eval.max_trials"], seed=_seed(args, cfg))
    wanted = list(ev.CASES) if args.case == "all" else [args.case]
    rows = []
    gt = GroundTruth(c)
    for case_id in wanted:
        res = ev.eval_mcd(cases[case_id], _synth_fn(system, c.features), gt)
        for t, v in zip(res.trials, res.values):
            rows.append((case_id, t.speaker_id, t.env_id, t.spk_ref, t.env_ref, v))
        rows.append((case_id, "mean", "", "", "", res.mean))
    ev.write_tsv(args.out, ("case", "speaker_id", "env_id", "spk_ref", "env_ref", "mcd"), rows)
    print(f"{len(rows)} rows -> {args.out}")


def cmd_eval_classify(args, cfg):
    from . import evaluation as ev
    from .extractor import EmbeddingExtractor
    from .pipeline import load_corpus

    c = load_corpus(args.manifest)
    rep = ev.leakage_probe(EmbeddingExtractor.load(args.spk_ckpt), EmbeddingExtractor.load(args.env_ckpt),
                           c.manifest, c.features, seed=_seed(args, cfg))
    ev.write_tsv(args.out, ("embedding", "target", "top1", "chance"), rep.as_rows())
    print(f"leakage report -> {args.out}")


def cmd_eval_dump(args, cfg):
    from . import evaluation as ev
    from .extractor import EmbeddingExtractor
    from .pipeline import load_corpus

    c = load_corpus(args.manifest)
    out = Path(args.out)
    pca = out.with_name(out.stem + "_pca" + out.suffix)
    ev.dump_embeddings(EmbeddingExtractor.load(args.ckpt), c.manifest, c.features, out, pca)
    print(f"{len(c.manifest)} embeddings -> {out}, projection -> {pca}")


def cmd_repro_desk(args, cfg):
    from .pipeline import repro_desk

    if args.seed is not None:
        cfg.set("seed", args.seed)
    if args.seeds is not None:
        cfg.set("repro.seeds", args.seeds)
    path = repro_desk(cfg, args.out)
    print(f"summary -> {path}")


# -- parser --------------------------------------------------------------------------
def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help=f"BLAS/OpenMP threads (default: ${THREADS_ENV} or library default); 1 is bitwise deterministic")
    common.add_argument("--config", help="key=value override file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="single config override (repeatable)")
    common.add_argument("--preset", default="desk", choices=("desk", "paper"), help="hyperparameter preset")
    common.add_argument("--seed", type=int, default=None, help="run seed (default: config 'seed')")
    common.add_argument("--log-level", default="WARNING", help="logging level")

    parser = argparse.ArgumentParser(prog="eatts", description="Environment-aware TTS pipeline at desk scale.")
    groups = parser.add_subparsers(dest="group", required=True)

    def add(group_parser, name, func, help_text):
        p = group_parser.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        return p

    g = groups.add_parser("corpus", help="build and render corpora").add_subparsers(dest="command", required=True)
    p = add(g, "build-extractor", cmd_corpus_build_extractor, "cross corpus: each environment x several speakers")
    p.add_argument("--out", required=True)
    p.add_argument("--envs", type=int)
    p.add_argument("--speakers-per-env", type=int)
    p.add_argument("--speakers", type=int, help="speaker pool size (default: fully crossed)")
    p.add_argument("--utts", type=int)
    p.add_argument("--no-render", action="store_true", help="write manifest and config only")
    p = add(g, "build-tts", cmd_corpus_build_tts, "entangled corpus: one environment per speaker")
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int)
    p.add_argument("--utts", type=int)
    p.add_argument("--no-render", action="store_true", help="write manifest and config only")
    p = add(g, "render", cmd_corpus_render, "(re)render WAVs and features of a corpus")
    p.add_argument("--corpus", required=True, help="corpus directory or manifest.tsv")

    g = groups.add_parser("features", help="log-mel features").add_subparsers(dest="command", required=True)
    p = add(g, "extract", cmd_features_extract, "compute log-mels for a corpus or for WAV files")
    p.add_argument("--corpus", help="corpus directory or manifest.tsv")
    p.add_argument("--wav", action="append", help="WAV file (repeatable); arrays are keyed by file stem")
    p.add_argument("--out", help="output container (default: <corpus>/features.eatts)")

    g = groups.add_parser("extractor", help="embedding extractors").add_subparsers(dest="command", required=True)
    p = add(g, "train", cmd_extractor_train, "GE2E training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--group-by", required=True, choices=("speaker", "environment"))
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p = add(g, "embed", cmd_extractor_embed, "utterance embeddings, one TSV line each")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--wav", action="append")
    p.add_argument("--mel", action="append")
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)

    g = groups.add_parser("tts", help="conditional synthesiser").add_subparsers(dest="command", required=True)
    p = add(g, "train", cmd_tts_train, "train proposed or baseline system")
    p.add_argument("--manifest", required=True)
    p.add_argument("--spk-ckpt")
    p.add_argument("--env-ckpt")
    p.add_argument("--mode", choices=("proposed", "baseline"), default="proposed")
    p.add_argument("--freeze", dest="freeze", action="store_true", default=None, help="keep extractors fixed")
    p.add_argument("--no-freeze", dest="freeze", action="store_false", help="fine-tune extractors jointly")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p = add(g, "synth", cmd_tts_synth, "synthesise one utterance")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--text-file", required=True, help="one line: symbols<TAB>durations")
    p.add_argument("--spk-ref", required=True, help="WAV or mel providing the speaker")
    p.add_argument("--env-ref", required=True, help="WAV or mel providing the environment")
    p.add_argument("--out-mel", required=True)
    p.add_argument("--out-wav")
    p.add_argument("--gl-iters", type=int, default=32, help="Griffin-Lim iterations")

    g = groups.add_parser("eval", help="objective evaluation").add_subparsers(dest="command", required=True)
    p = add(g, "mcd", cmd_eval_mcd, "MCD over seen/unseen cases")
    p.add_argument("--case", default="all", choices=("all", "seen_combo", "unseen_combo", "unseen_both"))
    p.add_argument("--tts-ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p = add(g, "classify", cmd_eval_classify, "linear-probe leakage report")
    p.add_argument("--spk-ckpt", required=True)
    p.add_argument("--env-ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p = add(g, "dump", cmd_eval_dump, "embedding TSV plus PCA projection")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    g = groups.add_parser("repro", help="end-to-end reproduction").add_subparsers(dest="command", required=True)
    p = add(g, "desk", cmd_repro_desk, "all stages at desk scale, multi-seed summary")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, help="number of replicates (default: config 'repro.seeds')")
    return parser


def _error_line(exc):
    from .exceptions import EattsError
    from .pipeline import StageError

    stage = "-"
    if isinstance(exc, StageError):
        stage, exc = exc.stage, exc.cause
    kind = exc.kind if isinstance(exc, EattsError) else type(exc).__name__
    message = " ".join(str(exc).split())
    return f"error\tkind={kind}\tstage={stage}\tmessage={message}"


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads
    if threads is None and os.environ.get(THREADS_ENV):
        threads = int(os.environ[THREADS_ENV])
    try:
        cfg = _config(args)
        if threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=threads):
                args.func(args, cfg)
        else:
            args.func(args, cfg)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one error line
        print(_error_line(exc), file=sys.stderr)
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
