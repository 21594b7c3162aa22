"""Speech and text encoders mapping into a shared unit-norm embedding space.

The speech encoder runs a per-frame MLP over log-mel features, mean-pools
over time, and projects to d dimensions; the text encoder looks up token
embeddings, pools (mean or first-token), and projects.  Both L2-normalize
their outputs, so cosine similarity is a plain dot product.

Batched forwards concatenate all frames/tokens and pool through a constant
segment-averaging matrix, so the whole batch is a handful of BLAS calls.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import FeatureSequence

POOLING_MODES = ("mean", "first-token")


@dataclass(frozen=True)
class Embedding:
    """A unit-norm d-dimensional style embedding."""

    vector: np.ndarray
    modality: str  # "speech" or "text"

    def __post_init__(self):
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"embedding norm {norm} deviates from 1 beyond 1e-6")


@dataclass
class SpeechEncoderParams:
    w1: Tensor  # (n_mels, h_s)
    b1: Tensor
    w2: Tensor  # (h_s, h_s)
    b2: Tensor
    wp: Tensor  # (h_s, d)
    bp: Tensor
    # fixed per-channel feature standardization (fit on the training split)
    fmean: np.ndarray = None
    fscale: np.ndarray = None

    def __post_init__(self):
        n_mels = self.w1.shape[0]
        if self.fmean is None:
            self.fmean = np.zeros(n_mels)
        if self.fscale is None:
            self.fscale = np.ones(n_mels)

    def named(self) -> list[tuple[str, Tensor]]:
        return [
            ("speech.w1", self.w1), ("speech.b1", self.b1),
            ("speech.w2", self.w2), ("speech.b2", self.b2),
            ("speech.wp", self.wp), ("speech.bp", self.bp),
        ]

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return [("speech.fmean", self.fmean), ("speech.fscale", self.fscale)]

    def fit_feature_norm(self, frames: np.ndarray) -> None:
        """Standardize inputs per mel channel; call before training starts."""
        self.fmean = frames.mean(axis=0)
        self.fscale = np.maximum(frames.std(axis=0), 1e-3)


@dataclass
class TextEncoderParams:
    table: Tensor  # (|vocab|, h_t)
    wp: Tensor     # (h_t, d)
    bp: Tensor
    pooling: str = "mean"

    def named(self) -> list[tuple[str, Tensor]]:
        return [("text.table", self.table), ("text.wp", self.wp), ("text.bp", self.bp)]


TOKEN_INIT_BOUND = 0.02


def _uniform_fanin(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    # Kaiming-uniform for relu stacks: U(+-sqrt(6 / fan_in))
    bound = np.sqrt(6.0 / shape[0])
    return rng.uniform(-bound, bound, size=shape)


def init_speech_encoder(
    n_mels: int, h_s: int, d: int, rng: np.random.Generator
) -> SpeechEncoderParams:
    return SpeechEncoderParams(
        w1=Tensor(_uniform_fanin(rng, (n_mels, h_s)), requires_grad=True),
        b1=Tensor(np.zeros(h_s), requires_grad=True),
        w2=Tensor(_uniform_fanin(rng, (h_s, h_s)), requires_grad=True),
        b2=Tensor(np.zeros(h_s), requires_grad=True),
        wp=Tensor(_uniform_fanin(rng, (h_s, d)), requires_grad=True),
        bp=Tensor(np.zeros(d), requires_grad=True),
    )


def init_text_encoder(
    vocab_size: int, h_t: int, d: int, rng: np.random.Generator, pooling: str = "mean"
) -> TextEncoderParams:
    if pooling not in POOLING_MODES:
        raise ValueError(f"pooling must be one of {POOLING_MODES}")
    # Small token init keeps unseen-word rows near zero and lets learned
    # updates dominate token directions early.
    return TextEncoderParams(
        table=Tensor(
            rng.uniform(-TOKEN_INIT_BOUND, TOKEN_INIT_BOUND, size=(vocab_size, h_t)),
            requires_grad=True,
        ),
        wp=Tensor(_uniform_fanin(rng, (h_t, d)), requires_grad=True),
        bp=Tensor(np.zeros(d), requires_grad=True),
        pooling=pooling,
    )


def _segment_pool_matrix(lengths: Sequence[int], mode: str) -> np.ndarray:
    """(B, sum(lengths)) constant matrix averaging (or selecting) per segment."""
    total = int(sum(lengths))
    pool = np.zeros((len(lengths), total))
    offset = 0
    for i, n in enumerate(lengths):
        if mode == "mean":
            pool[i, offset:offset + n] = 1.0 / n
        else:  # first-token
            pool[i, offset] = 1.0
        offset += n
    return pool


def speech_forward(params: SpeechEncoderParams, features: Sequence[FeatureSequence]) -> Tensor:
    """Batched encode: (B, d) unit-norm rows, differentiable."""
    if not features:
        raise ad.ShapeError("empty speech batch")
    n_mels = params.w1.shape[0]
    for f in features:
        if f.frames.shape[1] != n_mels:
            raise ad.ShapeError(f"expected {n_mels} mel channels, got {f.frames.shape[1]}")
    raw = np.concatenate([f.frames for f in features], axis=0)
    stacked = Tensor((raw - params.fmean) / params.fscale)
    h = ad.relu(ad.add(ad.matmul(stacked, params.w1), params.b1))
    h = ad.relu(ad.add(ad.matmul(h, params.w2), params.b2))
    pool = Tensor(_segment_pool_matrix([f.frames.shape[0] for f in features], "mean"))
    pooled = ad.matmul(pool, h)
    projected = ad.add(ad.matmul(pooled, params.wp), params.bp)
    return ad.l2_normalize(projected, axis=1)


def text_forward(params: TextEncoderParams, token_batch: Sequence[Sequence[int]]) -> Tensor:
    """Batched encode: (B, d) unit-norm rows, differentiable."""
    if not token_batch or any(len(t) == 0 for t in token_batch):
        raise ad.ShapeError("text batch must contain nonempty token sequences")
    flat = [tok for seq in token_batch for tok in seq]
    looked_up = ad.embedding_lookup(params.table, flat)
    pool = Tensor(_segment_pool_matrix([len(t) for t in token_batch], params.pooling))
    pooled = ad.matmul(pool, looked_up)
    projected = ad.add(ad.matmul(pooled, params.wp), params.bp)
    return ad.l2_normalize(projected, axis=1)


def encode_speech(params: SpeechEncoderParams, feats: FeatureSequence) -> Embedding:
    out = speech_forward(params, [feats])
    return Embedding(vector=out.values[0].copy(), modality="speech")


def encode_text(params: TextEncoderParams, tokens: Sequence[int]) -> Embedding:
    out = text_forward(params, [list(tokens)])
    return Embedding(vector=out.values[0].copy(), modality="text")


def similarity(a: Embedding, b: Embedding) -> float:
    """Cosine similarity of two unit-norm embeddings."""
    if a.vector.shape != b.vector.shape:
        raise ad.ShapeError(f"dimension mismatch {a.vector.shape} vs {b.vector.shape}")
    return float(a.vector @ b.vector)
