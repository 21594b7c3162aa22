"""Training objectives: symmetric contrastive loss with learnable
temperature, adversarial modality discriminator behind a gradient-reversal
node, auxiliary style classification, and their weighted combination.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MAX_LOGIT_SCALE = 100.0  # cap on 1/tau, CLAP-style, to keep logits bounded


@dataclass
class Temperature:
    """Learnable softmax temperature stored as log(tau) so tau stays positive."""

    log_tau: Tensor

    @classmethod
    def create(cls, tau_init: float = 0.07) -> "Temperature":
        if tau_init <= 0:
            raise ValueError("tau must be positive")
        return cls(log_tau=Tensor(np.asarray(np.log(tau_init)), requires_grad=True))

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau.values))

    def named(self) -> list[tuple[str, Tensor]]:
        return [("temp.log_tau", self.log_tau)]


@dataclass
class Discriminator:
    """Two-layer modality classifier d -> d_D -> 1 with relu then sigmoid."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self) -> list[tuple[str, Tensor]]:
        return [
            ("disc.w1", self.w1), ("disc.b1", self.b1),
            ("disc.w2", self.w2), ("disc.b2", self.b2),
        ]


@dataclass
class StyleClassifier:
    """Two-layer style classifier d -> d_C -> n_styles with relu."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self) -> list[tuple[str, Tensor]]:
        return [
            ("cls.w1", self.w1), ("cls.b1", self.b1),
            ("cls.w2", self.w2), ("cls.b2", self.b2),
        ]


@dataclass(frozen=True)
class LossWeights:
    lambda_contrast: float = 1.0
    lambda_adv: float = 0.1
    lambda_cls: float = 0.5

    def __post_init__(self):
        if min(self.lambda_contrast, self.lambda_adv, self.lambda_cls) < 0:
            raise ValueError("loss weights must be nonnegative")


def _uniform_fanin(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    # Kaiming-uniform for relu stacks: U(+-sqrt(6 / fan_in))
    bound = np.sqrt(6.0 / shape[0])
    return rng.uniform(-bound, bound, size=shape)


def init_discriminator(d: int, d_hidden: int, rng: np.random.Generator) -> Discriminator:
    return Discriminator(
        w1=Tensor(_uniform_fanin(rng, (d, d_hidden)), requires_grad=True),
        b1=Tensor(np.zeros(d_hidden), requires_grad=True),
        w2=Tensor(_uniform_fanin(rng, (d_hidden, 1)), requires_grad=True),
        b2=Tensor(np.zeros(1), requires_grad=True),
    )


def init_classifier(d: int, d_hidden: int, n_styles: int, rng: np.random.Generator) -> StyleClassifier:
    return StyleClassifier(
        w1=Tensor(_uniform_fanin(rng, (d, d_hidden)), requires_grad=True),
        b1=Tensor(np.zeros(d_hidden), requires_grad=True),
        w2=Tensor(_uniform_fanin(rng, (d_hidden, n_styles)), requires_grad=True),
        b2=Tensor(np.zeros(n_styles), requires_grad=True),
    )


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def contrastive_loss(speech: Tensor, text: Tensor, temp: Temperature) -> Tensor:
    """Symmetric temperature-scaled InfoNCE over positional pairs.

    Averages the speech-to-text and text-to-speech softmax NLL, each taken
    over the in-batch candidates; equals 0 exactly when N = 1.
    """
    if speech.shape != text.shape:
        raise ad.ShapeError(f"batch shapes differ: {speech.shape} vs {text.shape}")
    n = speech.shape[0]
    sims = ad.matmul(speech, ad.transpose(text))
    scale = ad.clip_max(ad.exp(ad.scalar_mul(temp.log_tau, -1.0)), MAX_LOGIT_SCALE)
    logits = ad.mul(sims, scale)
    targets = np.arange(n)
    speech_to_text = ad.softmax_cross_entropy(logits, targets)
    text_to_speech = ad.softmax_cross_entropy(ad.transpose(logits), targets)
    return ad.scalar_mul(ad.add(speech_to_text, text_to_speech), 0.5)


def discriminator_forward(disc: Discriminator, embeddings: Tensor) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(embeddings, disc.w1), disc.b1))
    return ad.sigmoid(ad.add(ad.matmul(h, disc.w2), disc.b2))


def discriminator_loss(disc: Discriminator, speech: Tensor, text: Tensor) -> Tensor:
    """BCE for modality classification; speech labeled 1, text labeled 0."""
    speech_term = ad.binary_cross_entropy(discriminator_forward(disc, speech), 1.0)
    text_term = ad.binary_cross_entropy(discriminator_forward(disc, text), 0.0)
    return ad.add(speech_term, text_term)


def adversarial_path(disc: Discriminator, speech: Tensor, text: Tensor) -> Tensor:
    """Discriminator loss computed through gradient reversal.

    Forward value equals discriminator_loss on the same batches; backward
    sends the minimize gradient to the discriminator and its exact negation
    to everything upstream of the embeddings.
    """
    return discriminator_loss(disc, ad.grad_reverse(speech), ad.grad_reverse(text))


def classification_loss(cls: StyleClassifier, speech: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean cross-entropy of style predictions from speech embeddings."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != speech.shape[0]:
        raise ad.ShapeError("one label per embedding required")
    n_styles = cls.w2.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_styles):
        raise IndexError(f"style label out of range [0, {n_styles})")
    h = ad.relu(ad.add(ad.matmul(speech, cls.w1), cls.b1))
    logits = ad.add(ad.matmul(h, cls.w2), cls.b2)
    return ad.softmax_cross_entropy(logits, labels)


def total_loss(weights: LossWeights, l_contrast: Tensor, l_adv: Tensor, l_cls: Tensor) -> Tensor:
    """Weighted sum per the combined objective."""
    return ad.add(
        ad.add(
            ad.scalar_mul(l_contrast, weights.lambda_contrast),
            ad.scalar_mul(l_adv, weights.lambda_adv),
        ),
        ad.scalar_mul(l_cls, weights.lambda_cls),
    )
