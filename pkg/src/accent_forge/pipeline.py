"""End-to-end experiment: features -> UBM -> TVM -> i-vectors -> systems -> predictions."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import accentid as aid
from . import evaluation as ev
from .dataio import FeatureSequence, normalize_features, read_matrix, resolve
from .nnet import TrainConfig
from .tvm import accumulate_stats, extract_ivector, train_tvm, _map
from .ubm import frame_posteriors, train_ubm, ubm_from_external_posteriors

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Preset:
    components: int
    ubm_iters: int
    rank_gmm: int
    rank_external: int
    tvm_iters: int
    n_pos: int
    n_neg: int
    hidden: tuple
    embed: int
    dropout0: float
    siamese_epochs: int
    siamese_lr: float
    siamese_batch: int
    nnet_hidden: tuple
    nnet_epochs: int
    nnet_lr: float
    nnet_batch: int
    patience: int
    head_epochs: int


PRESETS = {
    # hyperparameters reported for the full-size system
    "full": Preset(components=2048, ubm_iters=10, rank_gmm=400, rank_external=300, tvm_iters=5,
                    n_pos=100_000, n_neg=900_000, hidden=(128, 128), embed=32, dropout0=0.2,
                    siamese_epochs=20, siamese_lr=1e-3, siamese_batch=256, nnet_hidden=(128,),
                    nnet_epochs=200, nnet_lr=1e-3, nnet_batch=32, patience=10, head_epochs=300),
    "desk": Preset(components=64, ubm_iters=10, rank_gmm=8, rank_external=8, tvm_iters=5,
                   n_pos=2_000, n_neg=18_000, hidden=(128, 128), embed=32, dropout0=0.2,
                   siamese_epochs=6, siamese_lr=1e-3, siamese_batch=128, nnet_hidden=(128,),
                   nnet_epochs=200, nnet_lr=1e-3, nnet_batch=32, patience=10, head_epochs=300),
}


def load_features(records, base) -> dict:
    """Read and normalize every utterance's frames; keyed by utt_id."""
    out = {}
    for rec in records:
        x = read_matrix(resolve(base, rec.feature_path))
        out[rec.utt_id] = normalize_features(FeatureSequence(x, rec.utt_id))
    return out


def load_posteriors(records, base) -> dict:
    out = {}
    for rec in records:
        if not rec.posterior_path:
            raise FileNotFoundError(f"{rec.utt_id}: no posterior_path for external posterior mode")
        path = resolve(base, rec.posterior_path)
        if not Path(path).exists():
            raise FileNotFoundError(f"{rec.utt_id}: posterior file {path} missing")
        out[rec.utt_id] = read_matrix(path)
    return out


def fit_ubm(records, features, preset: Preset, seed: int, posteriors: Optional[dict] = None):
    train = [r for r in records if r.split == "train"]
    if posteriors is None:
        ubm, history = train_ubm([features[r.utt_id] for r in train], preset.components,
                                 preset.ubm_iters, seed)
        return ubm, history
    ubm = ubm_from_external_posteriors([features[r.utt_id] for r in train],
                                       [posteriors[r.utt_id] for r in train],
                                       [r.utt_id for r in train])
    return ubm, []


def compute_stats(ubm, records, features, posteriors=None, threads: int = 1) -> dict:
    def one(rec):
        seq = features[rec.utt_id]
        post = frame_posteriors(ubm, seq) if posteriors is None else posteriors[rec.utt_id]
        return accumulate_stats(ubm, seq, post, rec.utt_id)
    return dict(zip([r.utt_id for r in records], _map(one, records, threads)))


def fit_tvm(ubm, records, stats: dict, rank: int, iters: int, seed: int, threads: int = 1):
    train = [stats[r.utt_id] for r in records if r.split == "train"]
    return train_tvm(ubm, train, rank, iters, seed, threads=threads)


def extract_all(tvm, ubm, records, features, posteriors=None, threads: int = 1):
    pre = tvm.precomputed()

    def one(rec):
        post = None if posteriors is None else posteriors[rec.utt_id]
        return extract_ivector(pre, ubm, features[rec.utt_id], post, rec.utt_id)[0]
    return np.array(_map(one, records, threads))


def subset(records, ivecs: dict, kind: str, split: str) -> aid.LabeledIVectors:
    rs = [r for r in records if r.kind == kind and r.split == split]
    m = len(next(iter(ivecs.values())))
    vecs = np.array([ivecs[r.utt_id] for r in rs]).reshape(len(rs), m)
    return aid.LabeledIVectors(vecs, [r.language for r in rs], [r.speaker_id for r in rs],
                               [r.utt_id for r in rs])


@dataclass
class Systems:
    """Trained systems of one experiment."""

    languages: list
    twin: Optional[aid.Twin] = None
    enrollment: Optional[aid.EnrollmentSet] = None
    head: Optional[aid.Siamese4Head] = None
    classifiers: dict = field(default_factory=dict)  # name -> LdaClassifier / NnetClassifier
    nonid: Optional[tuple] = None  # (twin, head) of the unshared variant


def nnet_config(preset: Preset, seed: int, optimizer: str = "adam") -> TrainConfig:
    return TrainConfig(optimizer=optimizer, learning_rate=preset.nnet_lr,
                       batch_size=preset.nnet_batch, epochs=preset.nnet_epochs, seed=seed,
                       patience=preset.patience)


def siamese_config(preset: Preset, seed: int, optimizer: str = "rmsprop") -> TrainConfig:
    return TrainConfig(optimizer=optimizer, learning_rate=preset.siamese_lr,
                       batch_size=preset.siamese_batch, epochs=preset.siamese_epochs, seed=seed,
                       patience=preset.patience)


def head_config(preset: Preset, seed: int) -> TrainConfig:
    return TrainConfig(optimizer="adam", learning_rate=1e-3, batch_size=32,
                       epochs=preset.head_epochs, seed=seed, patience=preset.patience)


def train_twin_system(records, ivecs, languages, preset: Preset, seed: int, shared: bool = True):
    acc_train = subset(records, ivecs, "accented", "train")
    nat_train = subset(records, ivecs, "native", "train")
    pairs = aid.build_pairs(acc_train, nat_train, preset.n_pos, preset.n_neg, seed, languages)
    spec = aid.twin_spec(acc_train.vectors.shape[1], preset.hidden, preset.embed, preset.dropout0, seed)
    twin, _ = aid.train_siamese(pairs, spec, siamese_config(preset, seed), shared=shared)
    enrollment = aid.EnrollmentSet.build(nat_train, languages, 4, seed)
    head = aid.train_siamese4_head(twin, enrollment, subset(records, ivecs, "accented", "dev"),
                                   config=head_config(preset, seed))
    return twin, enrollment, head


def train_systems(records, ivecs: dict, preset: Preset, seed: int,
                  which=("siamese", "lda", "nnet", "nnet_append", "nnet_transfer", "nnet_nonid_twin")):
    languages = sorted({r.language for r in records})
    acc_train = subset(records, ivecs, "accented", "train")
    acc_dev = subset(records, ivecs, "accented", "dev")
    nat_train = subset(records, ivecs, "native", "train")
    systems = Systems(languages)
    if "siamese" in which:
        systems.twin, systems.enrollment, systems.head = train_twin_system(
            records, ivecs, languages, preset, seed)
    if "nnet_nonid_twin" in which:
        twin, enr, head = train_twin_system(records, ivecs, languages, preset, seed, shared=False)
        systems.nonid = (twin, head)
        systems.enrollment = systems.enrollment or enr
    if "lda" in which:
        systems.classifiers["lda"] = aid.train_lda(acc_train.vectors, acc_train.languages, languages)
    for variant in ("nnet", "nnet_append", "nnet_transfer"):
        if variant in which:
            systems.classifiers[variant] = aid.train_baseline_nnet(
                variant, acc_train, nnet_config(preset, seed), languages, preset.nnet_hidden,
                dev=acc_dev, native=nat_train, seed=seed)
    return systems


def predict_all(systems: Systems, utt_ids, x, seed: int = 0) -> dict:
    """PredictionSets for every trained system and strategy on the given i-vectors."""
    out = {}
    langs = systems.languages
    if systems.twin is not None:
        for strategy in aid.STRATEGIES:
            cfg = aid.StrategyConfig(strategy, seed=seed)
            scores = aid.score_strategy(systems.twin, systems.enrollment, x, cfg, systems.head)
            kind = "posterior" if cfg.higher_is_better else "distance"
            out[strategy] = ev.PredictionSet.from_scores(strategy, utt_ids, langs, scores, kind)
    if systems.nonid is not None:
        twin, head = systems.nonid
        scores = aid.score_strategy(twin, systems.enrollment, x, aid.StrategyConfig("siamese4"), head)
        out["nnet_nonid_twin"] = ev.PredictionSet.from_scores("nnet_nonid_twin", utt_ids, langs,
                                                              scores, "posterior")
    for name, clf in systems.classifiers.items():
        kind = "posterior" if clf.higher_is_better else "distance"
        out[name] = ev.PredictionSet.from_scores(name, utt_ids, langs, clf.scores(x), kind)
    return out


@dataclass
class ExperimentResult:
    predictions: dict
    truth: dict
    strengths: dict
    languages: list
    ubm_history: list
    ivectors: dict


def run_experiment(records, features: dict, preset: Preset, seed: int = 0,
                   posteriors: Optional[dict] = None, threads: int = 1,
                   which=("siamese", "lda", "nnet", "nnet_append", "nnet_transfer", "nnet_nonid_twin"),
                   eval_split: str = "test") -> ExperimentResult:
    ubm, history = fit_ubm(records, features, preset, seed, posteriors)
    rank = preset.rank_gmm if posteriors is None else preset.rank_external
    stats = compute_stats(ubm, records, features, posteriors, threads)
    tvm = fit_tvm(ubm, records, stats, rank, preset.tvm_iters, seed, threads)
    vecs = extract_all(tvm, ubm, records, features, posteriors, threads)
    ivecs = {r.utt_id: v for r, v in zip(records, vecs)}
    systems = train_systems(records, ivecs, preset, seed, which)
    test = [r for r in records if r.kind == "accented" and r.split == eval_split]
    ids = [r.utt_id for r in test]
    preds = predict_all(systems, ids, np.array([ivecs[u] for u in ids]), seed)
    return ExperimentResult(preds, {r.utt_id: r.language for r in test},
                            {r.utt_id: r.strength for r in test}, systems.languages, history, ivecs)
