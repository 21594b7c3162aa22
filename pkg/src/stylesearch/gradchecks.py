"""Finite-difference verification of every autodiff op and loss graph.

Each named check reports the max relative error |analytic - numeric| /
max(1, |numeric|) between the backward pass and central finite differences
(h = 1e-5, float64).  Checks built on gradient reversal compare against the
sign-flipped numeric gradient, since the forward pass is an identity.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from . import objectives as obj
from .autodiff import Tensor
from .corpus import FeatureSequence
from .encoders import init_speech_encoder, init_text_encoder, speech_forward, text_forward

TOLERANCE = 1e-4
_H = 1e-5


def _max_rel_error(
    build_loss: Callable[[], Tensor],
    params: list[Tensor],
    flip_sign_for: set[int] | None = None,
) -> float:
    """FD-check a loss w.r.t. every coordinate of every listed parameter."""
    for p in params:
        p.zero_grad()
    ad.backward(build_loss())
    worst = 0.0
    for pi, p in enumerate(params):
        analytic = p.grad.copy() if p.grad is not None else np.zeros_like(p.values)
        flat = p.values.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + _H
            hi = float(build_loss().values)
            flat[i] = orig - _H
            lo = float(build_loss().values)
            flat[i] = orig
            numeric = (hi - lo) / (2 * _H)
            if flip_sign_for and pi in flip_sign_for:
                numeric = -numeric
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.standard_normal(shape)
    return x + np.sign(x) * margin


def run_op_checks(seed: int = 0) -> dict[str, float]:
    """Standalone op-level checks, each reduced to a scalar via sum or mean."""
    rng = np.random.default_rng(seed)
    checks: dict[str, float] = {}

    x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    checks["matmul"] = _max_rel_error(lambda: ad.sum_all(ad.matmul(x, w)), [x, w])

    b = Tensor(rng.standard_normal(5), requires_grad=True)
    checks["add_broadcast"] = _max_rel_error(
        lambda: ad.sum_all(ad.add(ad.matmul(x, w), b)), [x, w, b]
    )

    y = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    checks["mul"] = _max_rel_error(lambda: ad.sum_all(ad.mul(x, y)), [x, y])

    r = Tensor(_away_from_zero(rng, (4, 3)), requires_grad=True)
    checks["relu"] = _max_rel_error(lambda: ad.sum_all(ad.relu(r)), [r])

    checks["mean_over_axis"] = _max_rel_error(
        lambda: ad.sum_all(ad.mean_over_axis(x, 0)), [x]
    )

    n = Tensor(rng.standard_normal((3, 4)) + 2.0, requires_grad=True)
    n_weight = Tensor(rng.standard_normal((3, 4)))
    checks["l2_normalize"] = _max_rel_error(
        lambda: ad.sum_all(ad.mul(ad.l2_normalize(n, axis=1), n_weight)), [n]
    )

    table = Tensor(rng.standard_normal((6, 4)), requires_grad=True)
    ids = [0, 3, 3, 5]
    checks["embedding_lookup"] = _max_rel_error(
        lambda: ad.sum_all(ad.embedding_lookup(table, ids)), [table]
    )

    checks["concat"] = _max_rel_error(
        lambda: ad.sum_all(ad.concat([x, y], axis=0)), [x, y]
    )

    checks["scalar_mul"] = _max_rel_error(lambda: ad.sum_all(ad.scalar_mul(x, -2.5)), [x])

    e = Tensor(rng.standard_normal((3, 3)) * 0.5, requires_grad=True)
    checks["exp"] = _max_rel_error(lambda: ad.sum_all(ad.exp(e)), [e])

    pos = Tensor(rng.uniform(0.5, 3.0, (3, 3)), requires_grad=True)
    checks["log"] = _max_rel_error(lambda: ad.sum_all(ad.log(pos)), [pos])

    checks["sigmoid"] = _max_rel_error(lambda: ad.sum_all(ad.sigmoid(x)), [x])

    c = Tensor(_away_from_zero(rng, (4, 3)) * 2.0, requires_grad=True)
    checks["clip_max"] = _max_rel_error(lambda: ad.sum_all(ad.clip_max(c, 1.0)), [c])

    checks["transpose"] = _max_rel_error(
        lambda: ad.sum_all(ad.matmul(ad.transpose(x), x)), [x]
    )

    logits = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    targets = [0, 2, 3, 1, 2]
    checks["softmax_cross_entropy"] = _max_rel_error(
        lambda: ad.softmax_cross_entropy(logits, targets), [logits]
    )

    probs = Tensor(rng.uniform(0.05, 0.95, (6, 1)), requires_grad=True)
    labels = np.array([[1.0], [0.0], [1.0], [1.0], [0.0], [0.0]])
    checks["binary_cross_entropy"] = _max_rel_error(
        lambda: ad.binary_cross_entropy(probs, labels), [probs]
    )

    g = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    weight = Tensor(rng.standard_normal((4, 3)))
    checks["grad_reverse"] = _max_rel_error(
        lambda: ad.sum_all(ad.mul(ad.grad_reverse(g), weight)), [g], flip_sign_for={0}
    )
    return checks


RELU_KINK_MARGIN = 5e-4  # > h * max input scale, so FD never crosses a kink


def _tiny_setup_once(rng):
    n_mels, h_s, h_t, d, vocab_size, n_styles, d_hidden = 7, 5, 4, 6, 12, 4, 5
    speech = init_speech_encoder(n_mels, h_s, d, rng)
    text = init_text_encoder(vocab_size, h_t, d, rng)
    temp = obj.Temperature.create(0.5)
    cls = obj.init_classifier(d, d_hidden, n_styles, rng)
    disc = obj.init_discriminator(d, d_hidden, rng)
    feats = [
        FeatureSequence(rng.standard_normal((t, n_mels)), 0.01) for t in (3, 5, 2)
    ]
    tokens = [[1, 4, 2], [7, 7], [3]]
    labels = [0, 2, 3]
    return speech, text, temp, cls, disc, feats, tokens, labels


def _relu_kink_margin(setup) -> float:
    """Smallest |relu pre-activation| across every loss graph of the setup."""
    speech, text, temp, cls, disc, feats, tokens, labels = setup
    margins = [np.inf]
    original = ad.relu

    def recording_relu(x):
        margins.append(float(np.min(np.abs(x.values))))
        return original(x)

    ad.relu = recording_relu
    try:
        s = speech_forward(speech, feats)
        t = text_forward(text, tokens)
        obj.contrastive_loss(s, t, temp)
        obj.classification_loss(cls, s, labels)
        obj.discriminator_loss(disc, s, t)
    finally:
        ad.relu = original
    return min(margins)


def _tiny_setup(seed: int = 0):
    # resample until every relu pre-activation clears the finite-difference
    # step, honoring the "checked away from 0" precondition
    for attempt in range(64):
        setup = _tiny_setup_once(np.random.default_rng([seed, attempt]))
        if _relu_kink_margin(setup) > RELU_KINK_MARGIN:
            return setup
    raise RuntimeError("could not sample a kink-free gradcheck configuration")


def run_loss_graph_checks(seed: int = 0) -> dict[str, float]:
    """End-to-end checks through encoders, losses, and the combined objective."""
    speech, text, temp, cls, disc, feats, tokens, labels = _tiny_setup(seed)
    speech_params = [t for _, t in speech.named()]
    text_params = [t for _, t in text.named()]
    cls_params = [t for _, t in cls.named()]
    disc_params = [t for _, t in disc.named()]
    checks: dict[str, float] = {}

    def contrastive():
        return obj.contrastive_loss(
            speech_forward(speech, feats), text_forward(text, tokens), temp
        )

    checks["graph_contrastive"] = _max_rel_error(
        contrastive, speech_params + text_params + [temp.log_tau]
    )

    def classification():
        return obj.classification_loss(cls, speech_forward(speech, feats), labels)

    checks["graph_classification"] = _max_rel_error(classification, speech_params + cls_params)

    def disc_loss():
        return obj.discriminator_loss(
            disc, speech_forward(speech, feats), text_forward(text, tokens)
        )

    checks["graph_discriminator"] = _max_rel_error(
        disc_loss, speech_params + text_params + disc_params
    )

    def adv_path():
        return obj.adversarial_path(
            disc, speech_forward(speech, feats), text_forward(text, tokens)
        )

    n_enc = len(speech_params) + len(text_params)
    checks["graph_adversarial_grl"] = _max_rel_error(
        adv_path,
        speech_params + text_params + disc_params,
        flip_sign_for=set(range(n_enc)),  # encoders sit below the reversal node
    )

    weights = obj.LossWeights()

    def combined():
        s = speech_forward(speech, feats)
        t = text_forward(text, tokens)
        l_con = obj.contrastive_loss(s, t, temp)
        l_adv = ad.scalar_mul(obj.discriminator_loss(disc, s, t), -1.0)
        l_cls = obj.classification_loss(cls, s, labels)
        return obj.total_loss(weights, l_con, l_adv, l_cls)

    checks["graph_total_objective"] = _max_rel_error(
        combined,
        speech_params + text_params + [temp.log_tau] + cls_params + disc_params,
    )
    return checks


def run_all_checks(seed: int = 0) -> dict[str, float]:
    checks = run_op_checks(seed)
    checks.update(run_loss_graph_checks(seed))
    return checks
