"""Objective evaluation: MCD over seen/unseen cases, linear probes, embedding dumps."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import autodiff as ad
from .autodiff import Tensor
from .dsp import mel_mcd
from .exceptions import ConfigurationError, LookupFailure, ParameterError
from .optim import Adam
from .utils import stable_seed
from .validation import check_embeddings, check_labels, require_fitted

CASES = ("seen_combo", "unseen_combo", "unseen_both")


# -- classification ----------------------------------------------------------------
class LinearProbe(ClassifierMixin, BaseEstimator):
    """Single affine layer trained with softmax cross-entropy, full batch.

    With ``standardize=True`` inputs are z-scored with statistics learned in
    :meth:`fit`; by default the head sees the embeddings as they are.
    """

    def __init__(self, n_epochs=200, learning_rate=0.05, standardize=False, random_state=0):
        self.n_epochs = n_epochs
        self.learning_rate = learning_rate
        self.standardize = standardize
        self.random_state = random_state

    def fit(self, X, y):
        X = check_embeddings(X)
        y = check_labels(y, X.shape[0])
        self.classes_ = np.array(sorted(set(y)))
        if len(self.classes_) < 2:
            raise ConfigurationError("a probe needs at least two classes")
        counts = {c: 0 for c in self.classes_}
        for lab in y:
            counts[lab] += 1
        if min(counts.values()) < 2:
            raise ConfigurationError("every class needs at least two samples")
        target = np.searchsorted(self.classes_, np.asarray(y))
        if self.standardize:
            self.mean_ = X.mean(axis=0)
            self.scale_ = X.std(axis=0) + 1e-8
        else:
            self.mean_ = np.zeros(X.shape[1])
            self.scale_ = np.ones(X.shape[1])
        Z = Tensor((X - self.mean_) / self.scale_)
        rng = np.random.default_rng(stable_seed("probe", self.random_state))
        d, k = X.shape[1], len(self.classes_)
        W = Tensor(rng.normal(0.0, 0.01, size=(d, k)), requires_grad=True)
        b = Tensor(np.zeros(k), requires_grad=True)
        opt = Adam({"W": W, "b": b}, lr=self.learning_rate)
        for _ in range(self.n_epochs):
            opt.zero_grad()
            loss = ad.softmax_cross_entropy(ad.matmul(Z, W) + b, target, reduction="mean")
            ad.backward(loss)
            opt.step()
        self.coef_ = W.data.copy()
        self.intercept_ = b.data.copy()
        return self

    def decision_function(self, X):
        require_fitted(self, "coef_")
        X = check_embeddings(X, self.coef_.shape[0])
        return ((X - self.mean_) / self.scale_) @ self.coef_ + self.intercept_

    def predict(self, X):
        require_fitted(self, "coef_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


def topk_from_logits(logits, target_idx, k):
    """Fraction of rows whose target is among the ``k`` largest logits.

    Ties are broken in favour of the lower class index.
    """
    logits = np.asarray(logits)
    n_classes = logits.shape[1]
    if not 1 <= k <= n_classes:
        raise ParameterError(f"k={k} must lie in [1, {n_classes}]")
    # stable argsort on -logits keeps lower indices first among equals
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    hits = np.any(order == np.asarray(target_idx)[:, None], axis=1)
    return float(hits.mean()) if hits.size else 0.0


def topk_accuracy(head, embeddings, labels, k=1):
    logits = head.decision_function(embeddings)
    labels = np.asarray(labels)
    idx = np.searchsorted(head.classes_, labels)
    idx = np.clip(idx, 0, len(head.classes_) - 1)
    known = head.classes_[idx] == labels
    idx = np.where(known, idx, -1)  # unknown labels never hit
    return topk_from_logits(logits, idx, k)


def chance_level(train_labels, test_labels):
    """Accuracy of always predicting the majority training class."""
    values, counts = np.unique(np.asarray(train_labels), return_counts=True)
    majority = values[np.argmax(counts)]
    return float(np.mean(np.asarray(test_labels) == majority))


@dataclass
class LeakageReport:
    spk_on_spk: float
    spk_on_env: float
    env_on_env: float
    env_on_spk: float
    chance_spk: float
    chance_env: float

    def on_factor(self):
        return self.spk_on_spk, self.env_on_env

    def off_factor_excess(self):
        """Off-factor accuracy above chance, for (speaker emb, env emb)."""
        return self.spk_on_env - self.chance_env, self.env_on_spk - self.chance_spk

    def as_rows(self):
        return [
            ("speaker_emb", "speaker", self.spk_on_spk, self.chance_spk),
            ("speaker_emb", "environment", self.spk_on_env, self.chance_env),
            ("environment_emb", "environment", self.env_on_env, self.chance_env),
            ("environment_emb", "speaker", self.env_on_spk, self.chance_spk),
        ]


def leakage_probe(spk_extractor, env_extractor, manifest, features, seed=0):
    """Probe each extractor's embeddings for both factors.

    Probes train on the ``train`` split and are scored on the rest.
    """
    train = [r for r in manifest if r.split == "train"]
    test = [r for r in manifest if r.split != "train"]
    if not train or not test:
        raise ConfigurationError("leakage probing needs both train and heldout utterances")
    out = {}
    for name, ext in (("spk", spk_extractor), ("env", env_extractor)):
        e_tr = ext.transform([features[r.utt_id] for r in train])
        e_te = ext.transform([features[r.utt_id] for r in test])
        for factor, attr in (("spk", "speaker_id"), ("env", "env_id")):
            y_tr = [getattr(r, attr) for r in train]
            y_te = [getattr(r, attr) for r in test]
            probe = LinearProbe(random_state=stable_seed(seed, name, factor)).fit(e_tr, y_tr)
            out[f"{name}_on_{factor}"] = topk_accuracy(probe, e_te, y_te, 1)
    chance_spk = chance_level([r.speaker_id for r in train], [r.speaker_id for r in test])
    chance_env = chance_level([r.env_id for r in train], [r.env_id for r in test])
    return LeakageReport(chance_spk=chance_spk, chance_env=chance_env, **out)


# -- projections and dumps ---------------------------------------------------------
def pca_project(X, n_components=2):
    """Top principal-component coordinates with a fixed sign convention.

    Each component is flipped so that its largest-magnitude loading is positive.
    """
    X = check_embeddings(X)
    centred = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    comps = vt[:n_components]
    for k in range(comps.shape[0]):
        if comps[k, np.argmax(np.abs(comps[k]))] < 0:
            comps[k] = -comps[k]
    coords = centred @ comps.T
    if coords.shape[1] < n_components:
        coords = np.pad(coords, ((0, 0), (0, n_components - coords.shape[1])))
    return coords


def _fmt(v):
    return f"{float(v):.6f}"


def dump_embeddings(extractor, records, features, out_path, pca_path=None):
    """Write ``utt_id, speaker_id, env_id, e0..`` rows plus a PCA companion TSV."""
    records = list(records)
    E = extractor.transform([features[r.utt_id] for r in records])
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["utt_id", "speaker_id", "env_id"] + [f"e{k}" for k in range(E.shape[1])])
        for r, e in zip(records, E):
            w.writerow([r.utt_id, r.speaker_id, r.env_id] + [_fmt(v) for v in e])
    if pca_path is not None:
        P = pca_project(E) if len(records) else np.zeros((0, 2))
        with open(pca_path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["utt_id", "speaker_id", "env_id", "pc1", "pc2"])
            for r, p in zip(records, P):
                w.writerow([r.utt_id, r.speaker_id, r.env_id, _fmt(p[0]), _fmt(p[1])])
    return E


# -- MCD cases ---------------------------------------------------------------------
@dataclass
class Trial:
    speaker_id: str
    env_id: str
    symbols: tuple
    durations: tuple
    spk_ref: str  # utt_id providing the speaker embedding
    env_ref: str  # utt_id providing the environment embedding


@dataclass
class EvalCase:
    case_id: str
    trials: list = field(default_factory=list)

    def __post_init__(self):
        if self.case_id not in CASES:
            raise ParameterError(f"case_id must be one of {CASES}, got {self.case_id!r}")


@dataclass
class McdResult:
    case_id: str
    values: list
    trials: list

    @property
    def mean(self):
        return float(np.mean(self.values)) if self.values else float("nan")


def eval_mcd(case, synthesize, render_gt):
    """MCD of ``synthesize(trial)`` against ``render_gt(spk, env, symbols, durations)``.

    Both callables return log-mel arrays; lookup failures propagate.
    """
    values = []
    for t in case.trials:
        pred = synthesize(t)
        gt = render_gt(t.speaker_id, t.env_id, t.symbols, t.durations)
        values.append(mel_mcd(pred, gt))
    return McdResult(case.case_id, values, list(case.trials))


def _utts_by_pair(manifest, split=None):
    out = {}
    for r in manifest:
        if split is None or r.split == split:
            out.setdefault((r.speaker_id, r.env_id), []).append(r)
    return out


def build_eval_cases(corpus, max_trials=12, seed=0):
    """Assemble the three MCD cases from a TTS corpus.

    ``seen_combo``: training pairs, heldout texts, the target pair's own
    utterance as both references.  ``unseen_combo``: trained speaker ``i``
    with the environment of another training pair, references drawn from two
    different utterances.  ``unseen_both``: heldout pairs, whose ids never
    appear in training.
    """
    rng = np.random.default_rng(stable_seed("eval-cases", seed))
    plan = corpus.plan
    by_id = corpus.manifest.by_id()
    train_pairs = [p for p in plan.pairs if p not in plan.heldout]
    train_utts = _utts_by_pair(corpus.manifest, "train")
    test_utts = _utts_by_pair(corpus.manifest, "heldout")

    def pick(seq):
        return seq[int(rng.integers(len(seq)))]

    seen = EvalCase("seen_combo")
    for spk, env in train_pairs:
        for r in test_utts.get((spk, env), []):
            ref = pick(train_utts[(spk, env)])
            seen.trials.append(Trial(spk, env, r.symbols, r.durations, ref.utt_id, ref.utt_id))

    unseen = EvalCase("unseen_combo")
    for spk, env_own in train_pairs:
        for other_spk, env in train_pairs:
            if other_spk == spk:
                continue
            text = pick(test_utts.get((spk, env_own)) or train_utts[(spk, env_own)])
            unseen.trials.append(Trial(spk, env, text.symbols, text.durations,
                                       pick(train_utts[(spk, env_own)]).utt_id,
                                       pick(train_utts[(other_spk, env)]).utt_id))

    both = EvalCase("unseen_both")
    for spk, env in plan.heldout:
        for r in [x for x in corpus.manifest if (x.speaker_id, x.env_id) == (spk, env)]:
            ref = pick([x for x in corpus.manifest if (x.speaker_id, x.env_id) == (spk, env) and x is not r])
            both.trials.append(Trial(spk, env, r.symbols, r.durations, ref.utt_id, ref.utt_id))

    for case in (seen, unseen, both):
        for t in case.trials:
            for ref in (t.spk_ref, t.env_ref):
                if ref not in by_id:
                    raise LookupFailure(f"reference utterance {ref!r} not in manifest")
        if len(case.trials) > max_trials:
            keep = sorted(rng.choice(len(case.trials), size=max_trials, replace=False))
            case.trials = [case.trials[k] for k in keep]
    return {c.case_id: c for c in (seen, unseen, both)}


def env_selectivity(pred_mel, corpus, trial, alternatives):
    """True when ``pred_mel`` is closer (MCD) to the requested environment than
    to a majority of the alternative environments, same speaker and text."""
    own = mel_mcd(pred_mel, corpus.render_mel(trial.speaker_id, trial.env_id, trial.symbols, trial.durations))
    wins = 0
    for env in alternatives:
        other = corpus.render_mel(trial.speaker_id, env, trial.symbols, trial.durations)
        wins += own < mel_mcd(pred_mel, other)
    return wins * 2 > len(alternatives)


def write_tsv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
