"""Total-variability model: Baum-Welch statistics, i-vector posteriors, EM for V."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .dataio import FeatureSequence, ModelFile
from .ubm import UbmModel, frame_posteriors

log = logging.getLogger(__name__)

V_INIT_SCALE = 1e-3


@dataclass
class SufficientStats:
    n: np.ndarray  # (C,) zeroth order
    s: np.ndarray  # (C, F) first order, centered on the UBM means
    utt_id: str = ""

    @property
    def supervector(self) -> np.ndarray:
        """First-order statistics spliced into a length-D vector."""
        return self.s.reshape(-1)

    def __add__(self, other: "SufficientStats") -> "SufficientStats":
        return SufficientStats(self.n + other.n, self.s + other.s, self.utt_id)


@dataclass
class IVectorPosterior:
    mean: np.ndarray  # (M,)
    precision: np.ndarray  # (M, M)

    def covariance(self) -> np.ndarray:
        return cho_solve(cho_factor(self.precision), np.eye(self.precision.shape[0]))

    def second_moment(self) -> np.ndarray:
        return self.covariance() + np.outer(self.mean, self.mean)


@dataclass
class TotalVariabilityModel:
    m0: np.ndarray  # (D,) UBM mean supervector
    sigma: np.ndarray  # (D,) diagonal of the block-diagonal covariance
    v: np.ndarray  # (D, M)
    n_components: int

    @property
    def rank(self) -> int:
        return self.v.shape[1]

    @property
    def dim(self) -> int:
        return self.m0.shape[0] // self.n_components

    @classmethod
    def from_ubm(cls, ubm: UbmModel, v: np.ndarray) -> "TotalVariabilityModel":
        return cls(ubm.means.reshape(-1).copy(), ubm.covars.reshape(-1).copy(),
                   np.asarray(v, dtype=np.float64), ubm.n_components)

    def v_blocks(self) -> np.ndarray:
        """V as a (C, F, M) array of per-component blocks."""
        return self.v.reshape(self.n_components, self.dim, self.rank)

    def precomputed(self) -> "_Precomputed":
        return _Precomputed(self)

    def to_model_file(self, mf: Optional[ModelFile] = None) -> ModelFile:
        mf = ModelFile() if mf is None else mf
        mf["TVMV"] = self.v
        mf["TVM0"] = self.m0
        mf["TVMS"] = self.sigma
        mf.meta["tvm.components"] = str(self.n_components)
        mf.meta["tvm.rank"] = str(self.rank)
        return mf

    @classmethod
    def from_model_file(cls, mf: ModelFile) -> "TotalVariabilityModel":
        return cls(mf["TVM0"].copy(), mf["TVMS"].copy(), mf["TVMV"].copy(),
                   int(mf.meta["tvm.components"]))


class _Precomputed:
    """Per-component ``V_c^T Sigma_c^-1 V_c`` and ``Sigma^-1 V``, reused across utterances."""

    def __init__(self, tvm: TotalVariabilityModel):
        self.tvm = tvm
        blocks = tvm.v_blocks()
        inv_sigma = (1.0 / tvm.sigma).reshape(tvm.n_components, tvm.dim)
        self.sigma_inv_v = (blocks * inv_sigma[:, :, None]).reshape(-1, tvm.rank)
        self.vt_sigma_v = np.einsum("cfm,cfn->cmn", blocks * inv_sigma[:, :, None], blocks)


def accumulate_stats(model: UbmModel, seq, post: np.ndarray, utt_id: str = "") -> SufficientStats:
    """Zeroth and centered first-order statistics of one utterance."""
    x = seq.frames if isinstance(seq, FeatureSequence) else seq
    x = np.asarray(x, dtype=np.float64)
    post = np.asarray(post, dtype=np.float64)
    if post.shape != (x.shape[0], model.n_components) or x.shape[1] != model.dim:
        raise ValueError(f"{utt_id}: frames {x.shape} / posteriors {post.shape} "
                         f"do not fit UBM C={model.n_components}, F={model.dim}")
    n = post.sum(0)
    s = post.T @ x - n[:, None] * model.means
    return SufficientStats(n, s, utt_id or getattr(seq, "utt_id", ""))


def ivector_posterior(tvm, stats: SufficientStats) -> IVectorPosterior:
    """Gaussian posterior of the latent factor given an utterance's statistics.

    ``tvm`` may be a :class:`TotalVariabilityModel` or its precomputed form.
    The D x D occupancy matrix is never built: the precision is assembled from
    per-component M x M blocks weighted by ``N_c``.
    """
    pre = tvm if isinstance(tvm, _Precomputed) else _Precomputed(tvm)
    if not (np.all(np.isfinite(stats.n)) and np.all(np.isfinite(stats.s))):
        raise ValueError(f"{stats.utt_id}: non-finite sufficient statistics")
    m = pre.tvm.rank
    precision = np.eye(m) + np.tensordot(stats.n, pre.vt_sigma_v, axes=1)
    precision = 0.5 * (precision + precision.T)
    rhs = pre.sigma_inv_v.T @ stats.supervector
    mean = cho_solve(cho_factor(precision), rhs)
    return IVectorPosterior(mean, precision)


def init_v(ubm: UbmModel, rank: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    scale = V_INIT_SCALE * float(np.mean(np.sqrt(ubm.covars)))
    return scale * rng.standard_normal((ubm.n_components * ubm.dim, rank))


def train_tvm(ubm: UbmModel, stats: Sequence[SufficientStats], rank: int, iters: int = 5,
              seed: int = 0, v_init: Optional[np.ndarray] = None, threads: int = 1,
              callback=None) -> TotalVariabilityModel:
    """EM estimation of the total-variability matrix with Sigma fixed at the UBM values.

    Each iteration computes every utterance's posterior, accumulates
    ``A_c = sum_s N_c(s) E[y y^T]`` and ``C = sum_s S_X(s) E[y]^T``, then solves
    one M x M system per component for its F x M block of V.
    """
    D = ubm.n_components * ubm.dim
    if rank > D:
        raise ValueError(f"rank {rank} exceeds supervector dimension {D}")
    if len(stats) < rank:
        raise ValueError(f"need at least {rank} utterances, got {len(stats)}")
    v = init_v(ubm, rank, seed) if v_init is None else np.array(v_init, dtype=np.float64)
    tvm = TotalVariabilityModel.from_ubm(ubm, v)
    C, F = ubm.n_components, ubm.dim
    for it in range(iters):
        pre = _Precomputed(tvm)
        posts = _map(lambda st: ivector_posterior(pre, st), stats, threads)
        acc_a = np.zeros((C, rank, rank))
        acc_c = np.zeros((D, rank))
        for st, post in zip(stats, posts):
            eyy = post.second_moment()
            acc_a += st.n[:, None, None] * eyy[None, :, :]
            acc_c += np.outer(st.supervector, post.mean)
        blocks = tvm.v_blocks().copy()
        acc_c = acc_c.reshape(C, F, rank)
        for c in range(C):
            try:
                factor = cho_factor(acc_a[c])
                blocks[c] = cho_solve(factor, acc_c[c].T).T
            except LinAlgError:
                log.warning("tvm iter %d: component %d system is singular; block left unchanged", it, c)
        tvm = TotalVariabilityModel(tvm.m0, tvm.sigma, blocks.reshape(D, rank), C)
        if callback is not None:
            callback(it, tvm)
    return tvm


def _map(fn, items, threads: int):
    # results are returned in input order, so reductions stay deterministic
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def length_normalize(y: np.ndarray):
    """Scale to unit Euclidean norm; returns ``(vector, was_zero)``."""
    norm = float(np.linalg.norm(y))
    if norm == 0.0:
        return np.zeros_like(y), True
    return y / norm, False


def extract_ivector(tvm, ubm: UbmModel, seq, posteriors: Optional[np.ndarray] = None,
                    utt_id: str = "") -> tuple[np.ndarray, bool]:
    """Length-normalized i-vector of one utterance.

    With ``posteriors=None`` the frame alignments come from the UBM;
    otherwise the supplied ``H x C`` matrix is used.  Returns
    ``(ivector, is_zero)``.
    """
    post = frame_posteriors(ubm, seq) if posteriors is None else posteriors
    stats = accumulate_stats(ubm, seq, post, utt_id)
    y, zero = length_normalize(ivector_posterior(tvm, stats).mean)
    if zero:
        log.warning("%s: zero i-vector", utt_id or stats.utt_id)
    return y, zero


def principal_angles_deg(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Principal angles between column spans, in degrees (ascending)."""
    qa, _ = np.linalg.qr(a)
    qb, _ = np.linalg.qr(b)
    s = np.clip(np.linalg.svd(qa.T @ qb, compute_uv=False), -1.0, 1.0)
    return np.degrees(np.arccos(s))
