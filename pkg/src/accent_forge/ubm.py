"""Diagonal-covariance GMM universal background model."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from . import kmeans as km
from .dataio import FeatureSequence, ModelFile

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
# relative to the global per-coordinate variance of the training data
VARIANCE_FLOOR_FACTOR = 1e-4
INIT_SUBSAMPLE = 100_000
INIT_KMEANS_ITERS = 5
CHUNK_FRAMES = 32_768
MIN_WEIGHT = 1e-10


@dataclass
class UbmModel:
    weights: np.ndarray  # (C,)
    means: np.ndarray  # (C, F)
    covars: np.ndarray  # (C, F) diagonal variances

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def validate(self) -> None:
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights <= 0):
            raise ValueError("UBM weights must be positive and sum to one")
        if np.any(self.covars <= 0) or not np.all(np.isfinite(self.means)):
            raise ValueError("UBM covariances must be positive and means finite")

    def to_model_file(self, mf: Optional[ModelFile] = None) -> ModelFile:
        mf = ModelFile() if mf is None else mf
        mf["UBMW"] = self.weights
        mf["UBMM"] = self.means
        mf["UBMC"] = self.covars
        mf.meta["ubm.components"] = str(self.n_components)
        mf.meta["ubm.dim"] = str(self.dim)
        return mf

    @classmethod
    def from_model_file(cls, mf: ModelFile) -> "UbmModel":
        return cls(mf["UBMW"].copy(), mf["UBMM"].copy(), mf["UBMC"].copy())


def _frames(seq) -> np.ndarray:
    x = seq.frames if isinstance(seq, FeatureSequence) else seq
    return np.asarray(x, dtype=np.float64)


def log_joint(model: UbmModel, x: np.ndarray) -> np.ndarray:
    """``log(pi_c) + log N(x_i | mu_c, Sigma_c)`` for every frame and component."""
    prec = 1.0 / model.covars
    const = (np.log(model.weights)
             - 0.5 * (model.dim * LOG_2PI + np.log(model.covars).sum(1))
             - 0.5 * (model.means ** 2 * prec).sum(1))
    return const + x @ (model.means * prec).T - 0.5 * (x * x) @ prec.T


def frame_posteriors(model: UbmModel, seq) -> np.ndarray:
    """Responsibilities ``p(c | x_i)`` as an ``H x C`` matrix."""
    x = _frames(seq)
    if x.shape[1] != model.dim:
        raise ValueError(f"feature dim {x.shape[1]} does not match UBM dim {model.dim}")
    lj = log_joint(model, x)
    return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))


def log_likelihood(model: UbmModel, x: np.ndarray) -> float:
    total = 0.0
    for start in range(0, x.shape[0], CHUNK_FRAMES):
        total += float(logsumexp(log_joint(model, x[start:start + CHUNK_FRAMES]), axis=1).sum())
    return total


def _init_from_kmeans(x: np.ndarray, n_components: int, rng, floor) -> UbmModel:
    if x.shape[0] > INIT_SUBSAMPLE:
        sub = x[np.sort(rng.choice(x.shape[0], INIT_SUBSAMPLE, replace=False))]
    else:
        sub = x
    centers, labels = km.kmeans(sub, n_components, iters=INIT_KMEANS_ITERS, rng=rng)
    counts = np.bincount(labels, minlength=n_components).astype(np.float64)
    covars = np.empty_like(centers)
    global_var = sub.var(axis=0)
    for c in range(n_components):
        members = sub[labels == c]
        covars[c] = members.var(axis=0) if members.shape[0] > 1 else global_var
    covars = np.maximum(covars, floor)
    weights = np.maximum(counts, 1.0)
    return UbmModel(weights / weights.sum(), centers, covars)


def _accumulate(model: UbmModel, x: np.ndarray):
    C, F = model.means.shape
    n = np.zeros(C)
    sx = np.zeros((C, F))
    sxx = np.zeros((C, F))
    ll = 0.0
    for start in range(0, x.shape[0], CHUNK_FRAMES):
        xc = x[start:start + CHUNK_FRAMES]
        lj = log_joint(model, xc)
        norm = logsumexp(lj, axis=1, keepdims=True)
        ll += float(norm.sum())
        post = np.exp(lj - norm)
        n += post.sum(0)
        sx += post.T @ xc
        sxx += post.T @ (xc * xc)
    return ll, n, sx, sxx


def train_ubm(features: Iterable, n_components: int, iters: int = 10, seed: int = 0):
    """Fit a diagonal GMM by EM after k-means++ / k-means initialization.

    Parameters
    ----------
    features : iterable of FeatureSequence or 2-D arrays
        Training utterances; frames are pooled.
    n_components : int
        Number of mixture components ``C``.
    iters : int
        EM iterations.
    seed : int
        Seed for the initialization subsample and k-means++.

    Returns
    -------
    model : UbmModel
    ll_history : list of float
        Total log-likelihood of the data under the initial model and after
        every EM update (``iters + 1`` values).
    """
    x = np.concatenate([_frames(f) for f in features], axis=0)
    if x.shape[0] < 10 * n_components:
        raise ValueError(f"need at least {10 * n_components} frames for C={n_components}, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    floor = VARIANCE_FLOOR_FACTOR * np.maximum(x.var(axis=0), 1e-12)
    model = _init_from_kmeans(x, n_components, rng, floor)
    history = []
    for it in range(iters + 1):
        ll, n, sx, sxx = _accumulate(model, x)
        history.append(ll)
        log.debug("ubm iter %d: ll/frame = %.6f", it, ll / x.shape[0])
        if it == iters:
            break
        model = _m_step(n, sx, sxx, floor, rng, it)
    return model, history


def _m_step(n, sx, sxx, floor, rng, it) -> UbmModel:
    total = n.sum()
    starved = n < 1e-10 * total
    safe = np.where(starved, 1.0, n)
    means = sx / safe[:, None]
    covars = np.maximum(sxx / safe[:, None] - means ** 2, floor)
    weights = n / total
    for c in np.flatnonzero(starved):
        donor = int(np.argmax(np.where(starved, -np.inf, covars.sum(1))))
        log.warning("ubm iter %d: component %d starved, re-seeded from component %d", it, c, donor)
        offset = np.sqrt(covars[donor]) * 0.1 * rng.standard_normal(covars.shape[1])
        means[c] = means[donor] + offset
        means[donor] = means[donor] - offset
        covars[c] = covars[donor]
        weights[c] = weights[donor] = weights[donor] / 2.0
    weights = np.maximum(weights, MIN_WEIGHT)
    return UbmModel(weights / weights.sum(), means, covars)


def ubm_from_external_posteriors(features: Sequence, posteriors: Sequence,
                                 utt_ids: Optional[Sequence[str]] = None) -> UbmModel:
    """Weights, means and diagonal covariances from externally supplied frame posteriors.

    Each component's moments are normalized by that component's total
    posterior mass; the weights by the mass summed over all components.
    Covariances keep only the diagonal of the weighted outer-product moment.
    """
    utt_ids = list(utt_ids) if utt_ids is not None else [
        getattr(f, "utt_id", "") or f"#{i}" for i, f in enumerate(features)]
    n = sx = sxx = None
    g_n = 0
    g_sx = g_sxx = None
    for uid, feat, post in zip(utt_ids, features, posteriors):
        x = _frames(feat)
        p = np.asarray(post, dtype=np.float64)
        if p.shape[0] != x.shape[0]:
            raise ValueError(f"{uid}: {x.shape[0]} feature frames but {p.shape[0]} posterior rows")
        if n is None:
            C, F = p.shape[1], x.shape[1]
            n, sx, sxx = np.zeros(C), np.zeros((C, F)), np.zeros((C, F))
            g_sx, g_sxx = np.zeros(F), np.zeros(F)
        n += p.sum(0)
        sx += p.T @ x
        sxx += p.T @ (x * x)
        g_n += x.shape[0]
        g_sx += x.sum(0)
        g_sxx += (x * x).sum(0)
    if n is None:
        raise ValueError("no utterances given")
    g_mean = g_sx / g_n
    g_var = g_sxx / g_n - g_mean ** 2
    floor = VARIANCE_FLOOR_FACTOR * np.maximum(g_var, 1e-12)
    empty = n <= 0
    safe = np.where(empty, 1.0, n)
    means = sx / safe[:, None]
    covars = sxx / safe[:, None] - means ** 2
    for c in np.flatnonzero(empty):
        log.warning("component %d has zero posterior mass; using global mean and variance", c)
        means[c] = g_mean
        covars[c] = g_var
    covars = np.maximum(covars, floor)
    weights = np.maximum(n / n.sum(), MIN_WEIGHT)
    return UbmModel(weights / weights.sum(), means, covars)
