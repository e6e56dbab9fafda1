"""Synthetic accented/native corpus with known ground truth, plus naive reference oracles.

Every utterance's supervector is ``M0 + V* z`` with a latent ``z`` built from
a per-language direction, a per-speaker offset and utterance noise.  Accented
utterances scale the language direction by the strength multiplier and add a
shared "English" offset.  Frames are then drawn from the GMM whose means are
shifted by the supervector offset.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .dataio import UtteranceRecord, stratified_split, write_manifest, write_matrix
from .tvm import SufficientStats

DEFAULT_LANGUAGES = ("BP", "HI", "FA", "GE", "HU", "IT", "MA", "RU", "SP", "TA")


@dataclass
class SynthConfig:
    languages: int = 10
    speakers_per_language: int = 12
    native_per_speaker: int = 16
    accented_per_speaker: int = 12
    min_frames: int = 80
    max_frames: int = 150
    feature_dim: int = 10
    components: int = 32
    rank: int = 8
    component_spread: float = 3.0
    v_scale: float = 0.35
    language_scale: float = 2.2
    english_scale: float = 1.0
    speaker_scale: float = 1.0
    noise_scale: float = 1.0
    language_norm_spread: float = 0.0
    speaker_scale_spread: float = 0.0
    strength_alphas: tuple = (0.25, 0.5, 0.75, 1.0)
    strength_shares: tuple = (0.10, 0.10, 0.79, 0.01)
    split_ratios: tuple = (0.6, 0.2, 0.2)
    emit_posteriors: bool = False
    seed: int = 0

    def __post_init__(self):
        self.strength_alphas = tuple(float(a) for a in self.strength_alphas)
        self.strength_shares = tuple(float(s) for s in self.strength_shares)
        self.split_ratios = tuple(float(r) for r in self.split_ratios)
        a = self.strength_alphas
        if len(a) != 4 or not all(x < y for x, y in zip(a, a[1:])):
            raise ValueError("strength multipliers must be four strictly increasing values")
        if len(self.strength_shares) != 4 or abs(sum(self.strength_shares) - 1.0) > 1e-9:
            raise ValueError("strength shares must be four values summing to 1")
        counts = (self.languages, self.speakers_per_language, self.native_per_speaker,
                  self.accented_per_speaker, self.min_frames, self.feature_dim, self.components,
                  self.rank)
        if min(counts) < 1 or self.max_frames < self.min_frames:
            raise ValueError("all counts must be >= 1 and max_frames >= min_frames")

    @property
    def language_names(self) -> list[str]:
        if self.languages <= len(DEFAULT_LANGUAGES):
            return list(DEFAULT_LANGUAGES[: self.languages])
        return [f"L{i:02d}" for i in range(self.languages)]


def parse_config_text(text: str) -> SynthConfig:
    """Parse flat ``key = value`` lines (``#`` starts a comment) into a SynthConfig."""
    types = {f.name: f.type for f in fields(SynthConfig)}
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or key not in types:
            raise ValueError(f"config line {lineno}: unknown or malformed entry {raw.strip()!r}")
        kind = types[key]
        if kind == "tuple":
            kwargs[key] = tuple(float(v) for v in value.strip("()[] ").split(",") if v.strip())
        elif kind == "bool":
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"config line {lineno}: {key} expects a boolean")
            kwargs[key] = value.lower() in ("true", "1", "yes")
        elif kind == "int":
            kwargs[key] = int(value)
        else:
            kwargs[key] = float(value)
    return SynthConfig(**kwargs)


def load_config(path) -> SynthConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def _quota(n: int, shares) -> np.ndarray:
    """Largest-remainder apportionment of ``n`` items, at least one per bucket when n allows."""
    raw = np.asarray(shares) * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    if n >= len(shares):
        for i in np.flatnonzero(counts == 0):
            counts[np.argmax(counts)] -= 1
            counts[i] = 1
    return counts


@dataclass
class Corpus:
    """An in-memory synthetic corpus."""

    config: SynthConfig
    records: list
    features: dict  # utt_id -> (H, F) raw frames
    truth: dict
    posteriors: Optional[dict] = None

    def record(self, utt_id: str) -> UtteranceRecord:
        return next(r for r in self.records if r.utt_id == utt_id)

    def ubm_true(self):
        from .ubm import UbmModel
        t = self.truth
        return UbmModel(np.array(t["weights"]), np.array(t["means"]), np.array(t["covars"]))

    def supervector(self, utt_id: str) -> np.ndarray:
        """Latent supervector ``M0 + V* z`` recomputed from the ground truth."""
        t = self.truth
        return np.array(t["means"]).reshape(-1) + np.array(t["v"]) @ np.array(t["latents"][utt_id])


def generate(cfg: SynthConfig) -> Corpus:
    rng = np.random.default_rng(cfg.seed)
    langs = cfg.language_names
    C, F, M = cfg.components, cfg.feature_dim, cfg.rank

    weights = rng.dirichlet(np.full(C, 20.0))
    means = rng.normal(0.0, cfg.component_spread, (C, F))
    covars = rng.uniform(0.5, 1.5, (C, F))
    v = rng.normal(0.0, cfg.v_scale, (C * F, M))
    directions = rng.normal(0.0, cfg.language_scale, (len(langs), M))
    english = rng.normal(0.0, cfg.english_scale, M)
    # per-language heterogeneity from a separate stream so the draws above stay fixed
    het = np.random.default_rng([cfg.seed, 1])
    lang_norm = het.uniform(1.0 - cfg.language_norm_spread, 1.0 + cfg.language_norm_spread, len(langs))
    lang_spk = het.uniform(1.0 - cfg.speaker_scale_spread, 1.0 + cfg.speaker_scale_spread, len(langs))
    directions = directions * lang_norm[:, None]

    records = []
    speakers = {}
    for li, lang in enumerate(langs):
        for k in range(cfg.speakers_per_language):
            spk = f"{lang}-s{k:02d}"
            speakers[spk] = rng.normal(0.0, cfg.speaker_scale * lang_spk[li], M)
            for kind, count in (("native", cfg.native_per_speaker),
                                ("accented", cfg.accented_per_speaker)):
                for j in range(count):
                    uid = f"{spk}-{kind[0]}{j:02d}"
                    records.append(UtteranceRecord(uid, spk, kind, lang,
                                                   feature_path=f"features/{uid}.fm01"))
    records = stratified_split(records, cfg.split_ratios, cfg.seed)

    # strengths apportioned within each split so every split sees the configured shares
    strength = {}
    for split in ("train", "dev", "test"):
        ids = [r.utt_id for r in records if r.kind == "accented" and r.split == split]
        counts = _quota(len(ids), cfg.strength_shares)
        labels = np.repeat(np.arange(1, 5), counts)
        for uid, s in zip(ids, rng.permutation(labels)):
            strength[uid] = int(s)

    features, latents, posteriors = {}, {}, {} if cfg.emit_posteriors else None
    sd = np.sqrt(covars)
    for i, rec in enumerate(records):
        li = langs.index(rec.language)
        z = speakers[rec.speaker_id] + rng.normal(0.0, cfg.noise_scale, M)
        if rec.kind == "accented":
            rec.strength = strength[rec.utt_id]
            z = z + cfg.strength_alphas[rec.strength - 1] * directions[li] + english
        else:
            z = z + directions[li]
        latents[rec.utt_id] = z
        shifted = means + (v @ z).reshape(C, F)
        h = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
        comp = rng.choice(C, size=h, p=weights)
        x = shifted[comp] + sd[comp] * rng.standard_normal((h, F))
        features[rec.utt_id] = x
        if posteriors is not None:
            # stands in for an external frame classifier: soft alignments under the true GMM
            post = _true_posteriors(weights, shifted, covars, x)
            posteriors[rec.utt_id] = post
            rec.posterior_path = f"posteriors/{rec.utt_id}.fm01"

    truth = {
        "languages": langs,
        "weights": weights.tolist(),
        "means": means.tolist(),
        "covars": covars.tolist(),
        "v": v.tolist(),
        "directions": {lang: directions[i].tolist() for i, lang in enumerate(langs)},
        "english": english.tolist(),
        "speakers": {k: s.tolist() for k, s in speakers.items()},
        "latents": {k: z.tolist() for k, z in latents.items()},
        "strength_alphas": list(cfg.strength_alphas),
        "config": {k: (list(val) if isinstance(val, tuple) else val)
                   for k, val in asdict(cfg).items()},
    }
    return Corpus(cfg, records, features, truth, posteriors)


def _true_posteriors(weights, means, covars, x):
    from scipy.special import logsumexp
    prec = 1.0 / covars
    lj = (np.log(weights) - 0.5 * np.log(covars).sum(1) - 0.5 * (means ** 2 * prec).sum(1)
          + x @ (means * prec).T - 0.5 * (x * x) @ prec.T)
    return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))


def generate_corpus(cfg: SynthConfig, out_dir) -> Corpus:
    """Generate and write ``manifest.jsonl``, FM01 feature files and ``truth.json``."""
    out = Path(out_dir)
    corpus = generate(cfg)
    (out / "features").mkdir(parents=True, exist_ok=True)
    for rec in corpus.records:
        write_matrix(out / rec.feature_path, corpus.features[rec.utt_id])
    if corpus.posteriors is not None:
        (out / "posteriors").mkdir(exist_ok=True)
        for rec in corpus.records:
            write_matrix(out / rec.posterior_path, corpus.posteriors[rec.utt_id])
    write_manifest(out / "manifest.jsonl", corpus.records)
    with open(out / "truth.json", "w", encoding="utf-8") as fh:
        json.dump(corpus.truth, fh, sort_keys=True)
    return corpus


# ---------------------------------------------------------------------------
# naive reference implementations, deliberately loop-based

def naive_posteriors(weights, means, covars, frames) -> list:
    out = []
    for x in frames:
        logs = []
        for c in range(len(weights)):
            acc = math.log(weights[c])
            for f in range(len(x)):
                var = covars[c][f]
                acc += -0.5 * math.log(2.0 * math.pi * var) - 0.5 * (x[f] - means[c][f]) ** 2 / var
            logs.append(acc)
        top = max(logs)
        dens = [math.exp(v - top) for v in logs]
        total = sum(dens)
        out.append([d / total for d in dens])
    return out


def naive_stats(frames, posteriors, means) -> SufficientStats:
    """Zeroth and centered first-order statistics by explicit double loop."""
    n_comp, dim = len(means), len(means[0])
    n = [0.0] * n_comp
    s = [[0.0] * dim for _ in range(n_comp)]
    for i, x in enumerate(frames):
        for c in range(n_comp):
            p = float(posteriors[i][c])
            n[c] += p
            for f in range(dim):
                s[c][f] += p * (float(x[f]) - float(means[c][f]))
    return SufficientStats(np.array(n), np.array(s))


def oracle_stats(corpus: Corpus, utt_id: str, ubm=None, frames=None) -> SufficientStats:
    """Reference statistics for one utterance.

    Alignments come from a loop-based Gaussian evaluation under ``ubm``
    (default: the generating GMM), so nothing is shared with the optimized path.
    ``frames`` overrides the stored raw frames (e.g. normalized ones).
    """
    if ubm is None:
        ubm = corpus.ubm_true()
    x = corpus.features[utt_id] if frames is None else frames
    means = ubm.means.tolist()
    post = naive_posteriors(ubm.weights.tolist(), means, ubm.covars.tolist(), x.tolist())
    st = naive_stats(x.tolist(), post, means)
    st.utt_id = utt_id
    return st


def naive_external_ubm(frames_list, posteriors_list):
    """Brute-force weights/means/diagonal covariances from given alignments."""
    n_comp = len(posteriors_list[0][0])
    dim = len(frames_list[0][0])
    mass = [0.0] * n_comp
    first = [[0.0] * dim for _ in range(n_comp)]
    for frames, post in zip(frames_list, posteriors_list):
        for x, p in zip(frames, post):
            for c in range(n_comp):
                mass[c] += p[c]
                for f in range(dim):
                    first[c][f] += p[c] * x[f]
    total = sum(mass)
    means = [[first[c][f] / mass[c] for f in range(dim)] for c in range(n_comp)]
    second = [[0.0] * dim for _ in range(n_comp)]
    for frames, post in zip(frames_list, posteriors_list):
        for x, p in zip(frames, post):
            for c in range(n_comp):
                for f in range(dim):
                    second[c][f] += p[c] * (x[f] - means[c][f]) ** 2
    covars = [[second[c][f] / mass[c] for f in range(dim)] for c in range(n_comp)]
    return np.array([m / total for m in mass]), np.array(means), np.array(covars)
