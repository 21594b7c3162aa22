"""Persistent speech-embedding index with exact cosine top-k retrieval.

Brute-force scan over a contiguous row-major float32 buffer; exact by
construction, which keeps the evaluation harness oracle-clean.  Scores are
computed in float64 on a cached promotion of the rows.  Ties break by
ascending id so rankings are deterministic even for duplicated vectors.

File format: magic ``ESRX``, little-endian u32 version=1, u32 d, u64 row
count; per row a u16 id byte-length, the UTF-8 id, then d float32 values.
Metadata travels in a ``<path>.meta.json`` sidecar mapping
id -> {style, duration_s, path}.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _accel
from .autodiff import ShapeError
from .corpus import Corpus, crop_leading, mel_features
from .encoders import Embedding, encode_speech

logger = logging.getLogger(__name__)

INDEX_MAGIC = b"ESRX"
INDEX_VERSION = 1
NORM_TOLERANCE = 1e-5


class IndexFormatError(ValueError):
    """Base class for unreadable index files."""


class BadMagicError(IndexFormatError):
    pass


class UnsupportedVersionError(IndexFormatError):
    pass


class TruncatedIndexError(IndexFormatError):
    pass


@dataclass
class EmbeddingIndex:
    d: int
    ids: list[str]
    vectors: np.ndarray  # (n, d) float32, unit-norm rows
    metadata: dict[str, dict] = field(default_factory=dict)
    _vectors64: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def vectors64(self) -> np.ndarray:
        if self._vectors64 is None:
            self._vectors64 = self.vectors.astype(np.float64)
        return self._vectors64

    def row_of(self, uid: str) -> int:
        lookup = getattr(self, "_row_lookup", None)
        if lookup is None or len(lookup) != len(self.ids):
            lookup = {uid_: i for i, uid_ in enumerate(self.ids)}
            self._row_lookup = lookup
        try:
            return lookup[uid]
        except KeyError:
            raise KeyError(f"id {uid!r} not in index") from None


def build_index(
    bundle,
    corpus: Corpus,
    paths: dict[str, str] | None = None,
    max_segment_s: float | None = None,
) -> EmbeddingIndex:
    """Encode every utterance (leading crop) and cache the embeddings."""
    if len(corpus) == 0:
        raise ValueError("cannot index an empty corpus")
    limit = max_segment_s if max_segment_s is not None else bundle.config.max_segment_s
    ids: list[str] = []
    rows: list[np.ndarray] = []
    metadata: dict[str, dict] = {}
    for u in corpus.utterances:
        try:
            feats = mel_features(crop_leading(u, limit), n_mels=bundle.config.n_mels)
            emb = encode_speech(bundle.speech, feats)
        except Exception as exc:  # noqa: BLE001 - skip-and-warn is the contract
            logger.warning("skipping %s: %s", u.id, exc)
            continue
        ids.append(u.id)
        rows.append(emb.vector.astype(np.float32))
        metadata[u.id] = {
            "style": corpus.registry.name_of(u.style) if u.style is not None else None,
            "duration_s": u.duration_s,
            "path": (paths or {}).get(u.id, ""),
        }
    vectors = np.vstack(rows) if rows else np.zeros((0, bundle.config.d), dtype=np.float32)
    return EmbeddingIndex(d=bundle.config.d, ids=ids, vectors=vectors, metadata=metadata)


# ---------------------------------------------------------------------------
# Queries
# ---------------------------------------------------------------------------

def _query_vector(q) -> np.ndarray:
    vec = q.vector if isinstance(q, Embedding) else np.asarray(q, dtype=np.float64)
    return np.asarray(vec, dtype=np.float64)


def query(
    index: EmbeddingIndex,
    q,
    k: int,
    threshold: float | None = None,
) -> list[tuple[str, float]]:
    """Exact top-k by descending cosine score, ties broken by ascending id."""
    vec = _query_vector(q)
    if vec.shape != (index.d,):
        raise ShapeError(f"query dimension {vec.shape} does not match index d={index.d}")
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(index) == 0:
        return []
    scores = _accel.scan_scores(index.vectors64, vec)
    candidates = np.arange(len(index))
    if threshold is not None:
        candidates = candidates[scores[candidates] >= threshold]
        if candidates.size == 0:
            return []
    if candidates.size > k:
        # Keep everything tied with the k-th score so the id tie-break is exact.
        kth = np.partition(scores[candidates], candidates.size - k)[candidates.size - k]
        candidates = candidates[scores[candidates] >= kth]
    ranked = sorted(candidates.tolist(), key=lambda i: (-scores[i], index.ids[i]))[:k]
    return [(index.ids[i], float(scores[i])) for i in ranked]


def batch_similarities(index: EmbeddingIndex, queries) -> np.ndarray:
    """(n_queries, n_rows) float64 cosine score matrix."""
    mat = np.vstack([_query_vector(q) for q in queries])
    if mat.shape[1] != index.d:
        raise ShapeError(f"query dimension {mat.shape[1]} does not match index d={index.d}")
    return mat @ index.vectors64.T


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_index(index: EmbeddingIndex, path: str | Path) -> None:
    path = Path(path)
    blob = bytearray()
    blob += INDEX_MAGIC
    blob += struct.pack("<IIQ", INDEX_VERSION, index.d, len(index))
    for uid, row in zip(index.ids, index.vectors):
        encoded = uid.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += row.astype("<f4").tobytes()
    path.write_bytes(bytes(blob))
    sidecar = path.with_name(path.name + ".meta.json")
    sidecar.write_text(json.dumps(index.metadata, indent=2, sort_keys=True), "utf-8")


def load_index(path: str | Path) -> EmbeddingIndex:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 4 or data[:4] != INDEX_MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    if len(data) < 20:
        raise TruncatedIndexError("missing fixed header")
    version, d, count = struct.unpack_from("<IIQ", data, 4)
    if version != INDEX_VERSION:
        raise UnsupportedVersionError(f"unsupported index version {version}")
    ids: list[str] = []
    vectors = np.empty((count, d), dtype=np.float32)
    offset = 20
    for i in range(count):
        if len(data) < offset + 2:
            raise TruncatedIndexError(f"row {i}: missing id length")
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if len(data) < offset + id_len + 4 * d:
            raise TruncatedIndexError(f"row {i}: truncated payload")
        ids.append(data[offset:offset + id_len].decode("utf-8"))
        offset += id_len
        vectors[i] = np.frombuffer(data, dtype="<f4", count=d, offset=offset)
        offset += 4 * d

    # Re-normalize rows that drifted beyond tolerance; freshly built indexes
    # are already unit-norm to float32 precision, so their bytes round-trip.
    if count:
        norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
        off = np.abs(norms - 1.0) > NORM_TOLERANCE
        if np.any(off):
            logger.warning("re-normalizing %d drifted index rows", int(off.sum()))
            vectors[off] = (vectors[off].astype(np.float64) / norms[off, None]).astype(np.float32)

    sidecar = path.with_name(path.name + ".meta.json")
    metadata = json.loads(sidecar.read_text("utf-8")) if sidecar.exists() else {}
    return EmbeddingIndex(d=d, ids=ids, vectors=vectors, metadata=metadata)
