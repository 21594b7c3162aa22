"""Numba-accelerated inner-loop kernels with pure-numpy fallbacks.

Only the kernels that are genuine per-sample/per-row loops live here:
overlap-add waveform assembly (corpus synthesis) and the similarity scan
(index queries).  Everything matmul- or FFT-shaped stays on numpy/BLAS,
which numba cannot beat.

Set STYLESEARCH_DISABLE_NUMBA=1 to force the numpy fallbacks (the same
paths used automatically when numba is not installed).  The benchmark
script under benchmarks/ compares both implementations.
"""

from __future__ import annotations

import logging
import os

import numpy as np

logger = logging.getLogger(__name__)

try:
    from numba import njit, prange

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(func):
            return func

        if args and callable(args[0]):
            return args[0]
        return wrap

    def prange(*args):
        return range(*args)

    logger.warning("numba unavailable, falling back to pure numpy kernels")


def _env_disabled() -> bool:
    return os.environ.get("STYLESEARCH_DISABLE_NUMBA", "").strip() in ("1", "true", "yes")


USE_NUMBA = HAS_NUMBA and not _env_disabled()


# ---------------------------------------------------------------------------
# Overlap-add: accumulate windowed synthesis frames into one signal.
# ---------------------------------------------------------------------------

@njit(cache=True)
def _ola_numba(frames, hop, out):  # pragma: no cover - numba-compiled
    n_frames, frame_len = frames.shape
    n = out.shape[0]
    for t in range(n_frames):
        start = t * hop
        stop = min(start + frame_len, n)
        for j in range(stop - start):
            out[start + j] += frames[t, j]
    return out


def _ola_numpy(frames, hop, out):
    n_frames, frame_len = frames.shape
    n = out.shape[0]
    # Split each frame into hop-sized chunks; chunk j of frame t lands at row
    # t + j of a hop-strided view, and those rows are disjoint across t, so
    # each chunk group is one vectorized add.
    n_chunks = -(-frame_len // hop)
    padded = np.zeros((n_frames + n_chunks, hop), dtype=np.float64)
    for j in range(n_chunks):
        seg = frames[:, j * hop:(j + 1) * hop]
        padded[j:j + n_frames, :seg.shape[1]] += seg
    flat = padded.reshape(-1)
    m = min(n, flat.shape[0])
    out[:m] += flat[:m]
    return out


def overlap_add(frames: np.ndarray, hop: int, out_len: int) -> np.ndarray:
    """Sum hop-spaced frames into a signal of length out_len."""
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    out = np.zeros(out_len, dtype=np.float64)
    if USE_NUMBA:
        return _ola_numba(frames, hop, out)
    return _ola_numpy(frames, hop, out)


# ---------------------------------------------------------------------------
# Similarity scan: dot products of one query against every index row.
# ---------------------------------------------------------------------------

@njit(parallel=True, cache=True)
def _scan_numba(rows, query, out):  # pragma: no cover - numba-compiled
    n, d = rows.shape
    for i in prange(n):
        acc = 0.0
        for j in range(d):
            acc += rows[i, j] * query[j]
        out[i] = acc
    return out


def _scan_numpy(rows, query, out):
    np.dot(rows, query, out=out)
    return out


def scan_scores(rows: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Cosine scores of a unit-norm query against unit-norm rows (float64)."""
    out = np.empty(rows.shape[0], dtype=np.float64)
    if USE_NUMBA:
        return _scan_numba(rows, query, out)
    return _scan_numpy(rows, query, out)
