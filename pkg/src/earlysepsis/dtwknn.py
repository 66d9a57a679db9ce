"""Per-channel dynamic-time-warping k-nearest-neighbour ensemble.

Each channel of the hourly imputed grid gets its own DTW distance matrix
and k-NN scorer; the ensemble score is the unweighted mean of the channel
scores. The DTW cost is the square root of the minimal sum of squared
pointwise differences over all monotone alignments, with no warping window.
"""

import hashlib
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from . import container
from .errors import ContractError, DataError, EvaluationError, ParameterError
from .evaluation import auprc

log = logging.getLogger(__name__)

CACHE_KIND = "dtw-distances"
K_GRID = tuple(range(1, 16, 2))


@njit(cache=True, nogil=True)
def _dtw(a, b):
    n, m = a.size, b.size
    prev = np.full(m + 1, np.inf)
    cur = np.empty(m + 1)
    prev[0] = 0.0
    for i in range(1, n + 1):
        cur[0] = np.inf
        ai = a[i - 1]
        for j in range(1, m + 1):
            d = ai - b[j - 1]
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = d * d + best
        prev, cur = cur, prev
    return np.sqrt(prev[m])


@njit(cache=True, nogil=True)
def _pairwise(flat_a, off_a, flat_b, off_b, symmetric):
    na, nb = off_a.size - 1, off_b.size - 1
    out = np.zeros((na, nb))
    for i in range(na):
        a = flat_a[off_a[i]:off_a[i + 1]]
        start = i + 1 if symmetric else 0
        for j in range(start, nb):
            d = _dtw(a, flat_b[off_b[j]:off_b[j + 1]])
            out[i, j] = d
            if symmetric:
                out[j, i] = d
    return out


def dtw_distance(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64).ravel()
    b = np.ascontiguousarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ContractError("dtw_distance needs two non-empty sequences")
    return float(_dtw(a, b))


def _pack(seqs):
    lengths = np.array([s.size for s in seqs], dtype=np.int64)
    if np.any(lengths == 0):
        raise ContractError("empty channel series")
    off = np.zeros(lengths.size + 1, dtype=np.int64)
    np.cumsum(lengths, out=off[1:])
    flat = np.concatenate(seqs).astype(np.float64) if seqs else np.zeros(0)
    return flat, off


def _channel_series(grids, d):
    return [np.ascontiguousarray(g[d], dtype=np.float64) for g in grids]


def _n_channels(grids):
    D = {g.shape[0] for g in grids}
    if len(D) != 1:
        raise ContractError(f"all grids must share the channel count, got {sorted(D)}")
    return D.pop()


def default_workers():
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def cross_distances(query_grids, ref_grids, workers=None):
    """``(D, Q, N)`` DTW distances between every query and reference grid, per channel."""
    D = _n_channels(list(query_grids) + list(ref_grids))
    packed_ref = [_pack(_channel_series(ref_grids, d)) for d in range(D)]

    def one(d):
        qa, qo = _pack(_channel_series(query_grids, d))
        ra, ro = packed_ref[d]
        return _pairwise(qa, qo, ra, ro, False)

    with ThreadPoolExecutor(max_workers=workers or default_workers()) as pool:
        return np.stack(list(pool.map(one, range(D))))


def cohort_digest(ids, grids):
    h = hashlib.sha256()
    for eid, g in zip(ids, grids):
        g = np.ascontiguousarray(g, dtype="<f8")
        h.update(f"{eid}:{g.shape[0]}x{g.shape[1]};".encode())
        h.update(g.tobytes())
    return h.hexdigest()


@dataclass
class DistanceMatrixSet:
    ids: list
    matrices: np.ndarray  # (D, N, N)
    digest: str

    @property
    def n_channels(self):
        return self.matrices.shape[0]

    def meta(self):
        return {"kind": CACHE_KIND, "cohort_digest": self.digest, "ids": list(self.ids),
                "shape": list(self.matrices.shape)}

    def save(self, path):
        return container.save(path, self.meta(), {"distances": self.matrices})

    @classmethod
    def load(cls, path):
        meta, arrays = container.load(path)
        if meta.get("kind") != CACHE_KIND:
            raise DataError(f"{path} is not a DTW distance cache")
        mats = arrays["distances"]
        if list(mats.shape) != meta["shape"]:
            raise DataError(f"{path}: distance array shape {mats.shape} != header {meta['shape']}")
        return cls(meta["ids"], mats, meta["cohort_digest"])


def build_distance_matrices(ids, grids, path=None, force=False, workers=None):
    """Per-channel symmetric DTW matrices over the training grids.

    With ``path`` the result is cached; an existing cache with the same
    cohort digest is reused, a cache for a different cohort is only
    replaced when ``force`` is set.
    """
    ids = list(ids)
    grids = [np.asarray(g, dtype=np.float64) for g in grids]
    if len(ids) != len(grids) or not grids:
        raise ContractError("build_distance_matrices needs one grid per id and at least one grid")
    digest = cohort_digest(ids, grids)
    if path is not None and Path(path).exists():
        cached = DistanceMatrixSet.load(path)
        if cached.digest == digest:
            log.info("reusing DTW cache %s", path)
            return cached
        if not force:
            raise DataError(f"{path} holds distances for a different cohort "
                            f"({cached.digest[:12]} != {digest[:12]}); use force to overwrite")
    D = _n_channels(grids)

    def one(d):
        flat, off = _pack(_channel_series(grids, d))
        return _pairwise(flat, off, flat, off, True)

    with ThreadPoolExecutor(max_workers=workers or default_workers()) as pool:
        mats = np.stack(list(pool.map(one, range(D))))
    out = DistanceMatrixSet(ids, mats, digest)
    if path is not None:
        out.save(path)
    return out


def _check_k(k, n):
    if int(k) != k or k < 1 or k % 2 == 0:
        raise ParameterError(f"k must be a positive odd integer, got {k}")
    if k > n:
        raise ParameterError(f"k={k} exceeds the {n} training encounters")


def knn_channel_score(distances, train_labels, k):
    """Fraction of positives among the ``k`` nearest; distance ties go to the lower index."""
    distances = np.asarray(distances, dtype=np.float64)
    labels = np.asarray(train_labels, dtype=np.float64)
    _check_k(k, distances.size)
    nearest = np.argsort(distances, kind="stable")[:k]
    return float(labels[nearest].mean())


def knn_scores(dist, train_labels, k):
    """Vectorised :func:`knn_channel_score` over ``(..., N)`` distance arrays."""
    dist = np.asarray(dist, dtype=np.float64)
    _check_k(k, dist.shape[-1])
    nearest = np.argsort(dist, axis=-1, kind="stable")[..., :k]
    return np.asarray(train_labels, dtype=np.float64)[nearest].mean(axis=-1)


@dataclass
class DTWKNNModel:
    train_grids: list
    train_labels: np.ndarray
    k: int = 1

    @property
    def n_channels(self):
        return _n_channels(self.train_grids)

    def channel_scores(self, grids, workers=None):
        """``(Q, D)`` per-channel scores for query grids."""
        dist = cross_distances(grids, self.train_grids, workers)
        return knn_scores(dist, self.train_labels, self.k).T

    def predict(self, grids, workers=None):
        return self.channel_scores(grids, workers).mean(axis=1)


def ensemble_predict(grid, model, workers=None):
    """Ensemble score of one ``(D, H)`` query grid."""
    return float(model.predict([np.asarray(grid, dtype=np.float64)], workers)[0])


def select_k(model, val_grids, val_labels, candidates=K_GRID, workers=None):
    """Validation-AUPRC-maximising ``k``; ties go to the smaller ``k``.

    Returns ``(k, {k: auprc})``. Candidates above the training size are skipped.
    """
    val_labels = np.asarray(val_labels, dtype=int)
    if val_labels.size == 0 or val_labels.min() == val_labels.max():
        raise EvaluationError("select_k needs a validation set with both classes")
    n = len(model.train_grids)
    cands = sorted(int(k) for k in candidates if k <= n)
    if not cands:
        raise ParameterError(f"no k candidate <= {n} training encounters")
    dist = cross_distances(val_grids, model.train_grids, workers)
    results = {}
    for k in cands:
        scores = knn_scores(dist, model.train_labels, k).mean(axis=0)
        results[k] = auprc(val_labels, scores, "validation")
    best = max(cands, key=lambda k: (results[k], -k))
    return best, results
