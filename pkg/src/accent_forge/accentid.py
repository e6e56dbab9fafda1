"""Accent identification systems built on i-vectors.

Siamese twin training on accented/native pairs, the four test-time scoring
strategies, and the comparison classifiers (LDA, NNET and its variants that
also see native-language data).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from . import nnet
from .dataio import ModelFile, read_matrix, write_matrix
from .kmeans import kmeans
from .nnet import NetworkParams, NetworkSpec, TrainConfig

log = logging.getLogger(__name__)

STRATEGIES = ("siamese1", "siamese2", "siamese3", "siamese4")
BASELINES = ("lda", "nnet", "nnet_append", "nnet_transfer", "nnet_nonid_twin")


@dataclass
class LabeledIVectors:
    vectors: np.ndarray
    languages: list
    speakers: Optional[list] = None
    utt_ids: Optional[list] = None

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        self.languages = list(self.languages)
        if len(self.languages) != self.vectors.shape[0]:
            raise ValueError("one language label per i-vector required")

    def __len__(self):
        return self.vectors.shape[0]

    def of(self, language: str) -> np.ndarray:
        return self.vectors[[i for i, l in enumerate(self.languages) if l == language]]

    def label_indices(self, languages: Sequence[str]) -> np.ndarray:
        index = {l: i for i, l in enumerate(languages)}
        return np.array([index[l] for l in self.languages], dtype=np.int64)


# ---------------------------------------------------------------------------
# pairs

@dataclass
class PairSet:
    """Parallel arrays of (accented, native, label) examples; y=0 marks same language."""

    i1: np.ndarray
    i2: np.ndarray
    y: np.ndarray
    lang1: list
    lang2: list

    def __len__(self):
        return len(self.y)


def _balanced_counts(total: int, n_groups: int) -> list:
    base, extra = divmod(total, n_groups)
    return [base + (1 if g < extra else 0) for g in range(n_groups)]


def build_pairs(accented: LabeledIVectors, native: LabeledIVectors, n_pos: int, n_neg: int,
                seed: int = 0, languages: Optional[Sequence[str]] = None) -> PairSet:
    """Balanced positive and negative accented/native pairs.

    Positives use a native i-vector from the same speaker when one exists,
    otherwise any native i-vector of the same language.  Negatives draw the
    native language uniformly from the other languages.  Both counts are
    spread evenly over the accent languages.
    """
    languages = sorted(set(accented.languages)) if languages is None else list(languages)
    native_by_lang = {l: np.flatnonzero(np.array(native.languages) == l) for l in languages}
    for l, idx in native_by_lang.items():
        if idx.size == 0:
            raise ValueError(f"language {l!r} has no native i-vectors")
    acc_by_lang = {l: np.flatnonzero(np.array(accented.languages) == l) for l in languages}
    missing = [l for l, idx in acc_by_lang.items() if idx.size == 0]
    if missing:
        raise ValueError(f"no accented i-vectors for {missing}")
    native_by_spk = {}
    if accented.speakers is not None and native.speakers is not None:
        for j, spk in enumerate(native.speakers):
            native_by_spk.setdefault(spk, []).append(j)

    rng = np.random.default_rng(seed)
    a_idx, n_idx, ys = [], [], []
    for li, (pos_count, neg_count) in enumerate(zip(_balanced_counts(n_pos, len(languages)),
                                                     _balanced_counts(n_neg, len(languages)))):
        lang = languages[li]
        picks = rng.choice(acc_by_lang[lang], size=pos_count)
        for a in picks:
            pool = native_by_spk.get(accented.speakers[a], []) if native_by_spk else []
            pool = [j for j in pool if native.languages[j] == lang] or native_by_lang[lang]
            a_idx.append(a)
            n_idx.append(pool[rng.integers(len(pool))])
            ys.append(0)
        others = [l for l in languages if l != lang]
        if neg_count and not others:
            raise ValueError("negative pairs need at least two languages")
        picks = rng.choice(acc_by_lang[lang], size=neg_count)
        for a in picks:
            other = others[rng.integers(len(others))]
            pool = native_by_lang[other]
            a_idx.append(a)
            n_idx.append(pool[rng.integers(len(pool))])
            ys.append(1)
    a_idx = np.array(a_idx, dtype=np.int64)
    n_idx = np.array(n_idx, dtype=np.int64)
    return PairSet(accented.vectors[a_idx], native.vectors[n_idx], np.array(ys, dtype=np.float64),
                   [accented.languages[i] for i in a_idx], [native.languages[j] for j in n_idx])


# ---------------------------------------------------------------------------
# twin network

@dataclass
class Twin:
    spec: NetworkSpec
    query: NetworkParams  # branch fed accented i-vectors
    reference: NetworkParams  # branch fed native i-vectors (same object when shared)

    @property
    def shared(self) -> bool:
        return self.query is self.reference

    def embed_query(self, x) -> np.ndarray:
        return nnet.predict(self.query, self.spec, x)

    def embed_reference(self, x) -> np.ndarray:
        return nnet.predict(self.reference, self.spec, x)

    def distance(self, accented, native) -> np.ndarray:
        return nnet.pair_distances(self.embed_query(accented), self.embed_reference(native))

    @classmethod
    def identity(cls, dim: int) -> "Twin":
        spec = NetworkSpec((dim, dim), ("linear",), (0.0,))
        p = NetworkParams([np.eye(dim)], [np.zeros(dim)])
        return cls(spec, p, p)

    def to_model_file(self, mf: ModelFile) -> ModelFile:
        mf.meta.update(self.spec.to_meta("twin"))
        mf.meta["twin.shared"] = "1" if self.shared else "0"
        self.query.to_model_file(mf, "NET")
        if not self.shared:
            self.reference.to_model_file(mf, "NTB")
        return mf

    @classmethod
    def from_model_file(cls, mf: ModelFile) -> "Twin":
        spec = NetworkSpec.from_meta(mf.meta, "twin")
        q = NetworkParams.from_model_file(mf, spec.n_layers, "NET")
        r = q if mf.meta["twin.shared"] == "1" else NetworkParams.from_model_file(mf, spec.n_layers, "NTB")
        return cls(spec, q, r)


def twin_spec(dim: int, hidden=(128, 128), embed: int = 32, dropout0: float = 0.2,
              seed: int = 0) -> NetworkSpec:
    return NetworkSpec.mlp(dim, hidden, embed, output="linear", dropout=(dropout0,), seed=seed)


def train_siamese(pairs: PairSet, spec: NetworkSpec, config: TrainConfig, shared: bool = True,
                  dev_pairs: Optional[PairSet] = None):
    """Train twin branches with the contrastive loss; returns ``(Twin, history)``.

    With ``shared=False`` the two branches start from different seeds and
    are updated independently.
    """
    if len(pairs) == 0:
        raise ValueError("no training pairs")
    first = nnet.init_params(spec)
    start = first if shared else (first, nnet.init_params(NetworkSpec(spec.sizes, spec.activations,
                                                                      spec.dropout, spec.seed + 1)))
    dev = None if dev_pairs is None else (dev_pairs.i1, dev_pairs.i2, dev_pairs.y)
    params, history = nnet.train(start, spec, config, (pairs.i1, pairs.i2, pairs.y),
                                 "contrastive", dev=dev)
    if shared:
        return Twin(spec, params, params), history
    return Twin(spec, params[0], params[1]), history


# ---------------------------------------------------------------------------
# enrollment and test strategies

@dataclass
class StrategyConfig:
    strategy: str = "siamese4"
    sample_size: int = 30
    lowest_k: int = 5
    clusters: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.lowest_k > self.sample_size:
            raise ValueError("lowest_k cannot exceed sample_size")

    @property
    def higher_is_better(self) -> bool:
        return self.strategy == "siamese4"


@dataclass
class EnrollmentSet:
    """Native-language i-vectors per language with their means and k-means cluster means."""

    languages: list
    vectors: dict
    means: dict = field(default_factory=dict)
    clusters: dict = field(default_factory=dict)

    @classmethod
    def build(cls, native: LabeledIVectors, languages: Optional[Sequence[str]] = None,
              n_clusters: int = 4, seed: int = 0) -> "EnrollmentSet":
        languages = sorted(set(native.languages)) if languages is None else list(languages)
        vectors = {}
        for l in languages:
            v = native.of(l)
            if v.shape[0] == 0:
                raise ValueError(f"no native i-vectors for {l!r}")
            vectors[l] = v
        enr = cls(languages, vectors)
        for i, l in enumerate(languages):
            enr.means[l] = vectors[l].mean(axis=0)
            enr.clusters[l], _ = kmeans(vectors[l], n_clusters, iters=50, seed=seed + i)
        return enr

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "languages.txt").write_text("".join(f"{l}\n" for l in self.languages), encoding="utf-8")
        for l in self.languages:
            write_matrix(d / f"{l}.fm01", self.vectors[l])
            write_matrix(d / f"{l}.mean.fm01", self.means[l])
            write_matrix(d / f"{l}.clusters.fm01", self.clusters[l])

    @classmethod
    def load(cls, directory) -> "EnrollmentSet":
        d = Path(directory)
        languages = (d / "languages.txt").read_text(encoding="utf-8").split()
        enr = cls(languages, {l: read_matrix(d / f"{l}.fm01") for l in languages})
        for l in languages:
            enr.means[l] = read_matrix(d / f"{l}.mean.fm01")[0]
            enr.clusters[l] = read_matrix(d / f"{l}.clusters.fm01")
        return enr


def cluster_distance_features(twin: Twin, enrollment: EnrollmentSet, x, n_clusters: int = 4):
    """Distances to every language's cluster means, language-major: ``(n, L * n_clusters)``.

    Languages with fewer clusters repeat their last cluster distance to fill
    the slots.
    """
    q = twin.embed_query(np.atleast_2d(x))
    cols = []
    for l in enrollment.languages:
        ref = twin.embed_reference(enrollment.clusters[l])
        d = np.sqrt(((q[:, None, :] - ref[None, :, :]) ** 2).sum(-1))
        if d.shape[1] < n_clusters:
            d = np.concatenate([d, np.repeat(d[:, -1:], n_clusters - d.shape[1], axis=1)], axis=1)
        cols.append(d[:, :n_clusters])
    return np.concatenate(cols, axis=1)


@dataclass
class Siamese4Head:
    spec: NetworkSpec
    params: NetworkParams
    # z-scoring of the distance features, fitted on the head's training data
    offset: np.ndarray
    scale: np.ndarray

    def posteriors(self, features) -> np.ndarray:
        return nnet.predict(self.params, self.spec, (np.asarray(features) - self.offset) / self.scale)

    def to_model_file(self, mf: ModelFile) -> ModelFile:
        mf.meta.update(self.spec.to_meta("head"))
        mf["HDNO"] = self.offset
        mf["HDNS"] = self.scale
        return self.params.to_model_file(mf, "HED")

    @classmethod
    def from_model_file(cls, mf: ModelFile) -> "Siamese4Head":
        spec = NetworkSpec.from_meta(mf.meta, "head")
        return cls(spec, NetworkParams.from_model_file(mf, spec.n_layers, "HED"),
                   mf["HDNO"].copy(), mf["HDNS"].copy())


def score_strategy(twin: Twin, enrollment: EnrollmentSet, test_ivecs, config: StrategyConfig,
                   head: Optional[Siamese4Head] = None) -> np.ndarray:
    """Per-language scores for each test i-vector, shape ``(n, L)``.

    Distances (lower is closer) for siamese1-3; posteriors for siamese4.
    Siamese-1 draws its per-language sample separately for every test
    utterance from a generator seeded by ``(config.seed, row index)``.
    """
    x = np.atleast_2d(np.asarray(test_ivecs, dtype=np.float64))
    missing = [l for l in enrollment.languages if l not in enrollment.vectors]
    if missing:
        raise ValueError(f"enrollment lacks {missing}")
    s = config.strategy
    if s == "siamese4":
        if head is None:
            raise ValueError("siamese4 needs a trained head")
        return head.posteriors(cluster_distance_features(twin, enrollment, x, config.clusters))
    q = twin.embed_query(x)
    out = np.empty((x.shape[0], len(enrollment.languages)))
    for j, l in enumerate(enrollment.languages):
        if s == "siamese2":
            ref = twin.embed_reference(enrollment.means[l][None, :])
            out[:, j] = nnet.pair_distances(q, ref)
        elif s == "siamese3":
            ref = twin.embed_reference(enrollment.clusters[l])
            out[:, j] = np.sqrt(((q[:, None, :] - ref[None, :, :]) ** 2).sum(-1)).min(axis=1)
        else:
            ref = twin.embed_reference(enrollment.vectors[l])
            dist = np.sqrt(((q[:, None, :] - ref[None, :, :]) ** 2).sum(-1))
            n_ref = ref.shape[0]
            take = min(config.sample_size, n_ref)
            k = min(config.lowest_k, take)
            for i in range(x.shape[0]):
                rng = np.random.default_rng([config.seed, j, i])
                chosen = rng.choice(n_ref, size=take, replace=False) if take < n_ref else np.arange(n_ref)
                out[i, j] = np.sort(dist[i, chosen])[:k].mean()
    return out


def train_siamese4_head(twin: Twin, enrollment: EnrollmentSet, dev: LabeledIVectors,
                        head_spec: Optional[NetworkSpec] = None,
                        config: Optional[TrainConfig] = None, n_clusters: int = 4) -> Siamese4Head:
    """Fit the distance-to-posterior network on labelled dev i-vectors."""
    n_lang = len(enrollment.languages)
    if head_spec is None:
        head_spec = NetworkSpec.mlp(n_lang * n_clusters, (8, 8), n_lang, output="softmax")
    if config is None:
        config = TrainConfig(optimizer="adam", learning_rate=1e-2, batch_size=16, epochs=200)
    absent = sorted(set(enrollment.languages) - set(dev.languages))
    if absent:
        log.warning("dev set has no utterances for %s; those classes are never supervised", absent)
    feats = cluster_distance_features(twin, enrollment, dev.vectors, n_clusters)
    labels = dev.label_indices(enrollment.languages)
    offset = feats.mean(axis=0)
    scale = np.maximum(feats.std(axis=0), 1e-8)
    params, _ = nnet.train(nnet.init_params(head_spec), head_spec, config,
                           ((feats - offset) / scale, labels), "xent")
    return Siamese4Head(head_spec, params, offset, scale)


# ---------------------------------------------------------------------------
# comparison classifiers

@dataclass
class LdaClassifier:
    languages: list
    projection: np.ndarray  # (M, r)
    centroids: np.ndarray  # (L, r) in projected space

    higher_is_better = False

    def scores(self, x) -> np.ndarray:
        """Euclidean distances to each class centroid in the projected space."""
        z = np.atleast_2d(x) @ self.projection
        return np.sqrt(((z[:, None, :] - self.centroids[None, :, :]) ** 2).sum(-1))

    def predict(self, x) -> list:
        return [self.languages[i] for i in np.argmin(self.scores(x), axis=1)]

    def to_model_file(self, mf: ModelFile) -> ModelFile:
        mf.meta["clf.kind"] = "lda"
        mf.meta["clf.languages"] = ",".join(self.languages)
        mf["LDAP"] = self.projection
        mf["LDAC"] = self.centroids
        return mf

    @classmethod
    def from_model_file(cls, mf: ModelFile) -> "LdaClassifier":
        return cls(mf.meta["clf.languages"].split(","), mf["LDAP"].copy(), mf["LDAC"].copy())


def train_lda(x, labels: Sequence[str], languages: Optional[Sequence[str]] = None) -> LdaClassifier:
    x = np.asarray(x, dtype=np.float64)
    languages = sorted(set(labels)) if languages is None else list(languages)
    if len(languages) < 2:
        raise ValueError("LDA needs at least two classes")
    labels = np.asarray(labels)
    mu = x.mean(axis=0)
    d = x.shape[1]
    sw = np.zeros((d, d))
    sb = np.zeros((d, d))
    class_means = []
    for l in languages:
        xl = x[labels == l]
        m = xl.mean(axis=0)
        class_means.append(m)
        sw += (xl - m).T @ (xl - m)
        sb += xl.shape[0] * np.outer(m - mu, m - mu)
    if np.linalg.matrix_rank(sw) < d:
        log.warning("within-class scatter is singular; adding ridge")
        sw += 1e-6 * np.trace(sw) / d * np.eye(d) + 1e-12 * np.eye(d)
    evals, evecs = linalg.eigh(sb, sw)
    rank = min(len(languages) - 1, d)
    projection = evecs[:, np.argsort(evals)[::-1][:rank]]
    centroids = np.array(class_means) @ projection
    return LdaClassifier(languages, projection, centroids)


@dataclass
class NnetClassifier:
    """Feed-forward accent classifier; ``append_means`` set for the NNET-append variant."""

    variant: str
    languages: list
    spec: NetworkSpec
    params: NetworkParams
    append_means: Optional[np.ndarray] = None  # (L, M) per-language native means

    higher_is_better = True

    def scores(self, x) -> np.ndarray:
        """Posterior-like scores ``(n, L)``.

        For NNET-append each candidate language's native mean is appended in
        turn and the posterior at that candidate's own index is kept; the
        results are renormalized to sum to one.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.append_means is None:
            return nnet.predict(self.params, self.spec, x)
        out = np.empty((x.shape[0], len(self.languages)))
        for j, mean in enumerate(self.append_means):
            inp = np.hstack([x, np.repeat(mean[None, :], x.shape[0], axis=0)])
            out[:, j] = nnet.predict(self.params, self.spec, inp)[:, j]
        return out / out.sum(axis=1, keepdims=True)

    def predict(self, x) -> list:
        return [self.languages[i] for i in np.argmax(self.scores(x), axis=1)]

    def to_model_file(self, mf: ModelFile) -> ModelFile:
        mf.meta["clf.kind"] = self.variant
        mf.meta["clf.languages"] = ",".join(self.languages)
        mf.meta.update(self.spec.to_meta("clf"))
        if self.append_means is not None:
            mf["APPM"] = self.append_means
        return self.params.to_model_file(mf, "CLF")

    @classmethod
    def from_model_file(cls, mf: ModelFile) -> "NnetClassifier":
        spec = NetworkSpec.from_meta(mf.meta, "clf")
        means = mf["APPM"].copy() if "APPM" in mf.arrays else None
        return cls(mf.meta["clf.kind"], mf.meta["clf.languages"].split(","), spec,
                   NetworkParams.from_model_file(mf, spec.n_layers, "CLF"), means)


def load_classifier(mf: ModelFile):
    """Rebuild an LDA or NNET-family classifier from its model file."""
    kind = mf.meta.get("clf.kind")
    if kind == "lda":
        return LdaClassifier.from_model_file(mf)
    if kind in ("nnet", "nnet_append", "nnet_transfer"):
        return NnetClassifier.from_model_file(mf)
    raise ValueError(f"model file holds no classifier (clf.kind={kind!r})")


def _append_inputs(data: LabeledIVectors, means: np.ndarray):
    # every sample paired with every language mean; the target stays the true accent
    n, L = len(data), means.shape[0]
    x = np.hstack([np.repeat(data.vectors, L, axis=0), np.tile(means, (n, 1))])
    return x


def train_baseline_nnet(variant: str, train_data: LabeledIVectors, config: TrainConfig,
                        languages: Optional[Sequence[str]] = None, hidden=(128,),
                        dev: Optional[LabeledIVectors] = None,
                        native: Optional[LabeledIVectors] = None,
                        pretrain_config: Optional[TrainConfig] = None, seed: int = 0) -> NnetClassifier:
    """Train NNET, NNET-append or NNET-transfer.

    ``nnet_transfer`` first fits the same architecture on native i-vectors
    with language labels; when ``config.epochs > 0`` the output layer is then
    re-initialized and the whole network fine-tuned on accented data.
    """
    if variant not in ("nnet", "nnet_append", "nnet_transfer"):
        raise ValueError(f"unknown variant {variant!r}")
    languages = sorted(set(train_data.languages)) if languages is None else list(languages)
    m = train_data.vectors.shape[1]
    y = train_data.label_indices(languages)
    dev_xy = None if dev is None else (dev.vectors, dev.label_indices(languages))

    if variant == "nnet_append":
        if native is None:
            raise ValueError("nnet_append needs native i-vectors")
        if any(len(native.of(l)) == 0 for l in languages):
            raise ValueError("nnet_append needs native i-vectors for every language")
        means = np.array([native.of(l).mean(axis=0) for l in languages])
        spec = NetworkSpec.mlp(2 * m, hidden, len(languages), output="softmax", seed=seed)
        x = _append_inputs(train_data, means)
        yy = np.repeat(y, len(languages))
        clf = NnetClassifier(variant, languages, spec, nnet.init_params(spec), means)
        if dev is not None:
            # early stopping watches the expanded dev set, not the candidate-scan rule
            dev_xy = (_append_inputs(dev, means), np.repeat(dev.label_indices(languages), len(languages)))
        clf.params, _ = nnet.train(clf.params, spec, config, (x, yy), "xent", dev=dev_xy)
        return clf

    spec = NetworkSpec.mlp(m, hidden, len(languages), output="softmax", seed=seed)
    params = nnet.init_params(spec)
    if variant == "nnet_transfer":
        if native is None or len(native) == 0:
            raise ValueError("nnet_transfer needs native i-vectors for pre-training")
        pre_cfg = pretrain_config or config
        params, _ = nnet.train(params, spec, pre_cfg,
                               (native.vectors, native.label_indices(languages)), "xent")
        if config.epochs > 0:
            fresh = nnet.init_params(NetworkSpec(spec.sizes, spec.activations, spec.dropout, seed + 1))
            params.weights[-1] = fresh.weights[-1]
            params.biases[-1] = fresh.biases[-1]
    if config.epochs > 0:
        params, _ = nnet.train(params, spec, config, (train_data.vectors, y), "xent", dev=dev_xy)
    return NnetClassifier(variant, languages, spec, params)
