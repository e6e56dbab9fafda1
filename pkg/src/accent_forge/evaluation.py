"""Accuracy, N-best accuracy, confusion matrices, accent-strength breakdown and fusion."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import softmax

DEFAULT_FAMILIES = {
    "BP": "BP-RU-IT", "RU": "BP-RU-IT", "IT": "BP-RU-IT",
    "SP": "SP-GE-HU", "GE": "SP-GE-HU", "HU": "SP-GE-HU",
    "MA": "MA",
    "HI": "HI-TA", "TA": "HI-TA",
    "FA": "FA",
}
SCORE_KINDS = ("distance", "posterior")


@dataclass
class Prediction:
    ranking: list  # best first
    scores: Optional[dict] = None  # language -> raw score
    score_kind: str = "posterior"
    posteriors: Optional[dict] = None  # language -> probability

    @property
    def top(self) -> str:
        return self.ranking[0]

    def as_posteriors(self) -> dict:
        """Posteriors if present, else a softmax of the scores (distances negated)."""
        if self.posteriors is not None:
            return self.posteriors
        if self.scores is None:
            raise ValueError("prediction carries neither posteriors nor scores")
        langs = list(self.scores)
        s = np.array([self.scores[l] for l in langs])
        p = softmax(-s if self.score_kind == "distance" else s)
        return dict(zip(langs, p))


@dataclass
class PredictionSet:
    system: str
    predictions: dict = field(default_factory=dict)  # utt_id -> Prediction

    def __len__(self):
        return len(self.predictions)

    def __getitem__(self, utt_id) -> Prediction:
        return self.predictions[utt_id]

    @classmethod
    def from_scores(cls, system: str, utt_ids: Sequence[str], languages: Sequence[str],
                    scores, score_kind: str) -> "PredictionSet":
        """Rank languages per utterance; ties are broken by language label."""
        if score_kind not in SCORE_KINDS:
            raise ValueError(f"score_kind must be one of {SCORE_KINDS}")
        scores = np.asarray(scores, dtype=np.float64)
        languages = list(languages)
        out = cls(system)
        for uid, row in zip(utt_ids, scores):
            key = row if score_kind == "distance" else -row
            order = sorted(range(len(languages)), key=lambda j: (key[j], languages[j]))
            ranking = [languages[j] for j in order]
            sc = {l: float(v) for l, v in zip(languages, row)}
            post = dict(sc) if score_kind == "posterior" else None
            out.predictions[uid] = Prediction(ranking, sc, score_kind, post)
        return out

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for uid in sorted(self.predictions):
                p = self.predictions[uid]
                rec = {"utt_id": uid, "system": self.system, "predicted": p.top, "ranking": p.ranking}
                if p.scores is not None:
                    rec["scores"] = [p.scores[l] for l in p.ranking]
                    rec["score_kind"] = p.score_kind
                if p.posteriors is not None:
                    rec["posteriors"] = [p.posteriors[l] for l in p.ranking]
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def from_jsonl(cls, path, system: Optional[str] = None) -> "PredictionSet":
        out = None
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    ranking = list(rec["ranking"])
                    uid = rec["utt_id"]
                except (json.JSONDecodeError, KeyError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad prediction record ({exc})") from exc
                if out is None:
                    out = cls(system or rec.get("system", str(path)))
                scores = dict(zip(ranking, rec["scores"])) if "scores" in rec else None
                post = dict(zip(ranking, rec["posteriors"])) if "posteriors" in rec else None
                out.predictions[uid] = Prediction(ranking, scores, rec.get("score_kind", "posterior"), post)
        return out if out is not None else cls(system or str(path))


def _check_covered(preds: PredictionSet, truth: dict) -> None:
    missing = [u for u in truth if u not in preds.predictions]
    if missing:
        raise KeyError(f"{preds.system}: no prediction for {len(missing)} utterances, e.g. {missing[0]!r}")


def nbest_accuracy(preds: PredictionSet, truth: dict, n: int = 1) -> float:
    """Percentage of utterances whose true language is within the top ``n``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    _check_covered(preds, truth)
    if not truth:
        return 0.0
    hits = sum(truth[u] in preds[u].ranking[:n] for u in truth)
    return 100.0 * hits / len(truth)


def accuracy(preds: PredictionSet, truth: dict) -> float:
    return nbest_accuracy(preds, truth, 1)


def confusion_matrix(preds: PredictionSet, truth: dict, languages: Sequence[str],
                     family_map: Optional[dict] = None):
    """Counts with rows = true language, columns = predicted language.

    With ``family_map`` also returns the matrix collapsed over family blocks
    and the family labels (in order of first appearance in ``languages``).
    """
    _check_covered(preds, truth)
    languages = list(languages)
    index = {l: i for i, l in enumerate(languages)}
    mat = np.zeros((len(languages), len(languages)), dtype=np.int64)
    for u, lang in truth.items():
        mat[index[lang], index[preds[u].top]] += 1
    if family_map is None:
        return mat
    unmapped = [l for l in languages if l not in family_map]
    if unmapped:
        raise ValueError(f"family map does not cover {unmapped}")
    families = list(dict.fromkeys(family_map[l] for l in languages))
    fidx = np.array([families.index(family_map[l]) for l in languages])
    collapse = np.zeros((len(languages), len(families)), dtype=np.int64)
    collapse[np.arange(len(languages)), fidx] = 1
    return mat, collapse.T @ mat @ collapse, families


def strength_breakdown(preds: PredictionSet, truth: dict, strengths: dict) -> dict:
    """Accuracy and population share per accent-strength bucket 1-4."""
    _check_covered(preds, truth)
    buckets = {s: [0, 0] for s in (1, 2, 3, 4)}
    excluded = 0
    for u, lang in truth.items():
        s = strengths.get(u)
        if s not in buckets:
            excluded += 1
            continue
        buckets[s][0] += 1
        buckets[s][1] += preds[u].top == lang
    included = sum(b[0] for b in buckets.values())
    table = {}
    for s, (n, correct) in buckets.items():
        table[s] = {
            "count": n,
            "share": 100.0 * n / included if included else 0.0,
            "accuracy": 100.0 * correct / n if n else None,
        }
    return {"buckets": table, "included": included, "excluded": excluded}


def fuse_majority(systems: Sequence[PredictionSet], tiebreak: str, name: str = "majority") -> PredictionSet:
    """Label with two or more votes wins; otherwise the tie-break system's top choice.

    The fused ranking is the tie-break system's ranking with the fused top
    choice moved to the front.
    """
    if len(systems) < 3:
        raise ValueError("majority fusion needs at least three systems")
    by_name = {s.system: s for s in systems}
    if tiebreak not in by_name:
        raise ValueError(f"tie-break system {tiebreak!r} not among {sorted(by_name)}")
    ref = by_name[tiebreak]
    utts = set(ref.predictions)
    for s in systems:
        if set(s.predictions) != utts:
            raise ValueError(f"system {s.system!r} covers a different utterance set")
    out = PredictionSet(name)
    for u in sorted(utts):
        votes = Counter(s[u].top for s in systems)
        label, count = max(votes.items(), key=lambda kv: (kv[1], kv[0] == ref[u].top))
        if count < 2:
            label = ref[u].top
        ranking = [label] + [l for l in ref[u].ranking if l != label]
        out.predictions[u] = Prediction(ranking)
    return out


def fuse_weighted(systems: Sequence[PredictionSet], weights: Sequence[float],
                  name: str = "weighted") -> PredictionSet:
    """Weighted sum of per-system posteriors; ranking by fused posterior, ties by label."""
    weights = [float(w) for w in weights]
    if len(weights) != len(systems):
        raise ValueError(f"{len(weights)} weights for {len(systems)} systems")
    if min(weights) < 0 or abs(sum(weights) - 1.0) > 1e-9:
        raise ValueError("weights must be non-negative and sum to 1")
    utts = set(systems[0].predictions)
    for s in systems:
        if set(s.predictions) != utts:
            raise ValueError(f"system {s.system!r} covers a different utterance set")
    out = PredictionSet(name)
    for u in sorted(utts):
        fused = {}
        for w, s in zip(weights, systems):
            for lang, p in s[u].as_posteriors().items():
                fused[lang] = fused.get(lang, 0.0) + w * float(p)
        ranking = sorted(fused, key=lambda l: (-fused[l], l))
        out.predictions[u] = Prediction(ranking, dict(fused), "posterior", dict(fused))
    return out


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    """Aligned plain-text table."""
    cells = [[str(h) for h in header]] + [
        [f"{v:.1f}" if isinstance(v, float) else ("-" if v is None else str(v)) for v in row]
        for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
