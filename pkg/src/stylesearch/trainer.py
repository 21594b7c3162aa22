"""Multi-stage training orchestration.

Stage 1 pre-trains the speech encoder with the style classification loss
alone; stage 2 adds the contrastive objective (and the learnable
temperature); stage 3 adds the adversarial modality discriminator, trained
at its own reduced learning rate through the gradient-reversal path.
Parameters only move when the active stage's loss reaches them, so
everything outside a stage's objective stays bit-identical.

Optimization is AdamW with decoupled weight decay; biases and the
temperature are exempt from decay.
"""

from __future__ import annotations

import copy
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import objectives as obj
from .autodiff import Tensor
from .corpus import (
    SAMPLE_RATE,
    Corpus,
    FeatureSequence,
    StyleRegistry,
    Utterance,
    mel_features,
)
from .encoders import (
    SpeechEncoderParams,
    TextEncoderParams,
    init_speech_encoder,
    init_text_encoder,
    speech_forward,
    text_forward,
)
from .prompts import (
    PromptBank,
    Vocabulary,
    build_vocabulary,
    fixed_prompt_bank,
    render_prompt,
    sample_prompt,
    tokenize,
    vocab_hash,
)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ESRC"
CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    """Invalid trainer configuration or mismatched corpus/bank/checkpoint."""


class TrainingDivergedError(RuntimeError):
    """A non-finite gradient was encountered."""


class CheckpointFormatError(ValueError):
    """Base class for unreadable checkpoint files."""


class CheckpointMagicError(CheckpointFormatError):
    pass


class CheckpointVersionError(CheckpointFormatError):
    pass


class CheckpointTruncatedError(CheckpointFormatError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainerConfig:
    batch_size: int = 32
    stage1_epochs: int = 5
    stage2_epochs: int = 5
    total_epochs: int = 30
    lr_main: float = 5e-5
    lr_disc: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    lambda_contrast: float = 1.0
    lambda_adv: float = 0.1
    lambda_cls: float = 0.5
    d: int = 64
    h_s: int = 128
    h_t: int = 64
    d_disc: int = 128
    d_cls: int = 128
    tau_init: float = 0.07
    max_segment_s: float = 8.0
    n_mels: int = 40
    text_pooling: str = "mean"
    text_projection_only: bool = False
    fixed_prompts: bool = False

    def __post_init__(self):
        if self.stage1_epochs < 0 or self.stage2_epochs < 0 or self.total_epochs < 0:
            raise ConfigurationError("epoch counts must be nonnegative")
        if min(self.lr_main, self.lr_disc, self.tau_init, self.max_segment_s) <= 0:
            raise ConfigurationError("rates, tau_init and max_segment_s must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be at least 1")

    @property
    def weights(self) -> obj.LossWeights:
        return obj.LossWeights(self.lambda_contrast, self.lambda_adv, self.lambda_cls)

    def stage_of(self, epoch: int) -> int:
        if epoch <= self.stage1_epochs:
            return 1
        if epoch <= self.stage1_epochs + self.stage2_epochs:
            return 2
        return 3


# ---------------------------------------------------------------------------
# Model bundle
# ---------------------------------------------------------------------------

@dataclass
class ModelBundle:
    speech: SpeechEncoderParams
    text: TextEncoderParams
    temp: obj.Temperature
    classifier: obj.StyleClassifier
    disc: obj.Discriminator | None
    registry: StyleRegistry
    vocab: Vocabulary
    config: TrainerConfig

    def named_params(self) -> list[tuple[str, Tensor]]:
        named = (
            self.speech.named()
            + self.text.named()
            + self.temp.named()
            + self.classifier.named()
        )
        if self.disc is not None:
            named += self.disc.named()
        return named

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return self.speech.buffers()


def init_model(config: TrainerConfig, registry: StyleRegistry, vocab: Vocabulary) -> ModelBundle:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xA11CE]))
    speech = init_speech_encoder(config.n_mels, config.h_s, config.d, rng)
    text = init_text_encoder(len(vocab), config.h_t, config.d, rng, config.text_pooling)
    temp = obj.Temperature.create(config.tau_init)
    classifier = obj.init_classifier(config.d, config.d_cls, len(registry), rng)
    disc = None
    if config.lambda_adv > 0:
        disc = obj.init_discriminator(config.d, config.d_disc, rng)
    return ModelBundle(speech, text, temp, classifier, disc, registry, vocab, config)


def clone_bundle(bundle: ModelBundle) -> ModelBundle:
    def clone_params(obj_with_named):
        cloned = copy.copy(obj_with_named)
        for name, t in obj_with_named.named():
            attr = name.split(".", 1)[1]
            setattr(cloned, attr, Tensor(t.values.copy(), requires_grad=True))
        return cloned

    speech_clone = clone_params(bundle.speech)
    speech_clone.fmean = bundle.speech.fmean.copy()
    speech_clone.fscale = bundle.speech.fscale.copy()
    return ModelBundle(
        speech=speech_clone,
        text=clone_params(bundle.text),
        temp=obj.Temperature(Tensor(bundle.temp.log_tau.values.copy(), requires_grad=True)),
        classifier=clone_params(bundle.classifier),
        disc=clone_params(bundle.disc) if bundle.disc is not None else None,
        registry=bundle.registry,
        vocab=bundle.vocab,
        config=bundle.config,
    )


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


def adamw_step(
    params: list[tuple[str, np.ndarray]],
    grads: list[np.ndarray],
    state: AdamWState,
    lr: float,
    betas: tuple[float, float],
    eps: float,
    weight_decay: float,
) -> None:
    """Bias-corrected adaptive update with decoupled weight decay (in place)."""
    b1, b2 = betas
    for (name, p), g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient in {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.t[name] = 0
        state.t[name] += 1
        t = state.t[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        decay = weight_decay * p if weight_decay else 0.0
        p -= lr * (m_hat / (np.sqrt(v_hat) + eps) + decay)


def _no_decay(name: str) -> bool:
    leaf = name.split(".", 1)[1]
    return leaf.startswith("b") or name == "temp.log_tau"


def _apply_updates(bundle: ModelBundle, state: AdamWState, config: TrainerConfig) -> None:
    """Update every parameter that received gradient this step."""
    groups: dict[tuple[float, float], tuple[list, list]] = {}
    for name, tensor in bundle.named_params():
        if tensor.grad is None:
            continue
        lr = config.lr_disc if name.startswith("disc.") else config.lr_main
        wd = 0.0 if _no_decay(name) else config.weight_decay
        key = (lr, wd)
        groups.setdefault(key, ([], []))
        groups[key][0].append((name, tensor.values))
        groups[key][1].append(tensor.grad)
    for (lr, wd), (params, grads) in groups.items():
        adamw_step(params, grads, state, lr, (config.beta1, config.beta2), config.eps, wd)


# ---------------------------------------------------------------------------
# Feature cache and batching
# ---------------------------------------------------------------------------

def _max_crop_frames(config: TrainerConfig) -> int:
    window = int(round(0.025 * SAMPLE_RATE))
    hop = int(round(0.010 * SAMPLE_RATE))
    limit = int(round(config.max_segment_s * SAMPLE_RATE))
    return (limit - window) // hop + 1


def build_feature_cache(corpus: Corpus, config: TrainerConfig) -> dict[str, FeatureSequence]:
    """Full-length log-mel features per utterance, computed once.

    Hop-aligned audio crops then equal contiguous frame slices of these
    features, so per-epoch random crops never re-run the FFT front end.
    """
    return {u.id: mel_features(u, n_mels=config.n_mels) for u in corpus.utterances}


def _crop_frames(
    feats: FeatureSequence, max_frames: int, rng: np.random.Generator | None
) -> FeatureSequence:
    total = feats.frames.shape[0]
    if total <= max_frames:
        return feats
    if rng is None:
        offset = 0
    else:
        offset = int(rng.integers(total - max_frames + 1))
    return FeatureSequence(
        frames=feats.frames[offset:offset + max_frames], frame_hop_s=feats.frame_hop_s
    )


def _batches(items: list, size: int) -> list[list]:
    return [items[i:i + size] for i in range(0, len(items), size)]


# ---------------------------------------------------------------------------
# Loss assembly
# ---------------------------------------------------------------------------

def _stage_losses(
    bundle: ModelBundle,
    stage: int,
    feats: list[FeatureSequence],
    token_batch: list[list[int]],
    labels: list[int],
    adversarial_grl: bool,
) -> tuple[Tensor | None, dict[str, float]]:
    """Build the stage-active loss graph and report component values.

    The reported total follows the combined objective (adversarial term
    entering as -L_disc); the returned graph routes the adversarial term
    through gradient reversal so one backward pass trains everything.
    """
    cfg = bundle.config
    terms: list[Tensor] = []
    values: dict[str, float] = {}
    speech_emb = speech_forward(bundle.speech, feats)

    if cfg.lambda_cls > 0:
        l_cls = obj.classification_loss(bundle.classifier, speech_emb, labels)
        terms.append(ad.scalar_mul(l_cls, cfg.lambda_cls))
        values["cls"] = l_cls.item()

    if stage >= 2:
        text_emb = text_forward(bundle.text, token_batch)
        if cfg.lambda_contrast > 0:
            l_con = obj.contrastive_loss(speech_emb, text_emb, bundle.temp)
            terms.append(ad.scalar_mul(l_con, cfg.lambda_contrast))
            values["contrast"] = l_con.item()
        if stage >= 3 and bundle.disc is not None and cfg.lambda_adv > 0:
            if adversarial_grl:
                l_disc = obj.adversarial_path(bundle.disc, speech_emb, text_emb)
            else:
                l_disc = obj.discriminator_loss(bundle.disc, speech_emb, text_emb)
            terms.append(ad.scalar_mul(l_disc, cfg.lambda_adv))
            values["disc"] = l_disc.item()

    total_value = (
        cfg.lambda_cls * values.get("cls", 0.0)
        + cfg.lambda_contrast * values.get("contrast", 0.0)
        - cfg.lambda_adv * values.get("disc", 0.0)
    )
    values["total"] = total_value

    if not terms:
        return None, values
    graph = terms[0]
    for term in terms[1:]:
        graph = ad.add(graph, term)
    return graph, values


def _text_projection_gate(bundle: ModelBundle) -> None:
    """Drop the token-table gradient when only the projection is trainable."""
    if bundle.config.text_projection_only:
        bundle.text.table.grad = None


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EpochStats:
    epoch: int
    stage: int
    train_loss: float
    val_loss: float
    val_contrast: float
    tau: float


@dataclass
class Checkpoint:
    bundle: ModelBundle
    epoch: int
    val_loss: float


@dataclass
class TrainResult:
    history: list[EpochStats]
    best: Checkpoint
    final: ModelBundle


def _check_inputs(config: TrainerConfig, train_corpus: Corpus, bank: PromptBank) -> None:
    if len(train_corpus) == 0:
        raise ConfigurationError("empty training corpus")
    for name in train_corpus.registry:
        if name not in bank.synonyms:
            raise ConfigurationError(f"style {name!r} missing from prompt bank")
    if any(u.style is None for u in train_corpus.utterances):
        raise ConfigurationError("training corpus must be fully labeled")


def validate(
    bundle: ModelBundle,
    val_corpus: Corpus,
    bank: PromptBank,
    stage: int = 3,
    feature_cache: dict[str, FeatureSequence] | None = None,
) -> dict[str, float]:
    """Deterministic validation: leading crops, template 0 / substitution 0."""
    cfg = bundle.config
    cache = feature_cache or build_feature_cache(val_corpus, cfg)
    max_frames = _max_crop_frames(cfg)
    totals: dict[str, list[float]] = {}
    for batch in _batches(list(val_corpus.utterances), cfg.batch_size):
        feats = [_crop_frames(cache[u.id], max_frames, None) for u in batch]
        labels = [u.style for u in batch]
        prompts = [
            render_prompt(bank, val_corpus.registry.name_of(u.style), 0, 0) for u in batch
        ]
        tokens = [tokenize(bundle.vocab, p) for p in prompts]
        # validation stage >= 2 so the contrastive component is always reported
        _, values = _stage_losses(bundle, max(stage, 2), feats, tokens, labels, False)
        if stage < 3:
            values["total"] = (
                cfg.lambda_cls * values.get("cls", 0.0)
                + (cfg.lambda_contrast * values.get("contrast", 0.0) if stage >= 2 else 0.0)
            )
        for key, val in values.items():
            totals.setdefault(key, []).append(val)
    return {key: float(np.mean(vals)) for key, vals in totals.items()}


def train(
    config: TrainerConfig,
    train_corpus: Corpus,
    val_corpus: Corpus,
    bank: PromptBank,
) -> TrainResult:
    _check_inputs(config, train_corpus, bank)
    vocab = build_vocabulary(bank)
    train_bank = fixed_prompt_bank(bank) if config.fixed_prompts else bank
    registry = train_corpus.registry
    bundle = init_model(config, registry, vocab)

    seeds = np.random.SeedSequence([config.seed, 0x7124]).spawn(3)
    shuffle_rng = np.random.default_rng(seeds[0])
    crop_rng = np.random.default_rng(seeds[1])
    prompt_rng = np.random.default_rng(seeds[2])

    train_cache = build_feature_cache(train_corpus, config)
    val_cache = build_feature_cache(val_corpus, config)
    bundle.speech.fit_feature_norm(
        np.concatenate([f.frames for f in train_cache.values()])
    )
    max_frames = _max_crop_frames(config)
    state = AdamWState()
    utterances = list(train_corpus.utterances)

    history: list[EpochStats] = []
    best: Checkpoint | None = None
    best_stage = 0
    for epoch in range(1, config.total_epochs + 1):
        stage = config.stage_of(epoch)
        order = shuffle_rng.permutation(len(utterances))
        batch_totals = []
        for batch_idx in _batches(list(order), config.batch_size):
            batch = [utterances[i] for i in batch_idx]
            feats = [_crop_frames(train_cache[u.id], max_frames, crop_rng) for u in batch]
            labels = [u.style for u in batch]
            prompts = [
                sample_prompt(train_bank, registry.name_of(u.style), prompt_rng)
                for u in batch
            ]
            tokens = [tokenize(vocab, p) for p in prompts]
            for _, tensor in bundle.named_params():
                tensor.zero_grad()
            graph, values = _stage_losses(bundle, stage, feats, tokens, labels, True)
            batch_totals.append(values["total"])
            if graph is None:
                continue
            ad.backward(graph)
            _text_projection_gate(bundle)
            _apply_updates(bundle, state, config)

        val = validate(bundle, val_corpus, bank, stage, val_cache)
        stats = EpochStats(
            epoch=epoch,
            stage=stage,
            train_loss=float(np.mean(batch_totals)),
            val_loss=val["total"],
            val_contrast=val.get("contrast", float("nan")),
            tau=bundle.temp.tau,
        )
        history.append(stats)
        logger.info(
            "%d\t%d\t%.6f\t%.6f\t%.6f",
            stats.epoch, stats.stage, stats.train_loss, stats.val_loss, stats.tau,
        )
        # Validation totals are only comparable within a stage (each stage adds
        # loss terms), so selection tracks the most complete objective reached.
        if best is None or stage > best_stage or (stage == best_stage and stats.val_loss < best.val_loss):
            best = Checkpoint(bundle=clone_bundle(bundle), epoch=epoch, val_loss=stats.val_loss)
            best_stage = stage

    if best is None:  # zero-epoch run: the initialized model is the result
        best = Checkpoint(bundle=clone_bundle(bundle), epoch=0, val_loss=float("nan"))
    return TrainResult(history=history, best=best, final=bundle)


def ablation_flags(config: TrainerConfig) -> dict[str, TrainerConfig]:
    """The four single-switch ablation variants."""
    return {
        "no_pretrain": replace(config, stage1_epochs=0),
        "no_cls": replace(config, lambda_cls=0.0),
        "no_disc": replace(config, lambda_adv=0.0),
        "fixed_prompt": replace(config, fixed_prompts=True),
    }


# ---------------------------------------------------------------------------
# Checkpoint persistence
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    bundle = ckpt.bundle
    arrays = [(n, t.values) for n, t in bundle.named_params()] + bundle.named_buffers()
    header = {
        "config": asdict(bundle.config),
        "d": bundle.config.d,
        "epoch": ckpt.epoch,
        "params": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "pooling": bundle.text.pooling,
        "style_registry": list(bundle.registry.names),
        "val_loss": ckpt.val_loss,
        "vocab_hash": vocab_hash(bundle.vocab),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<Q", len(header_bytes))
    blob += header_bytes
    for _, arr in arrays:
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: str | Path, bank: PromptBank | None = None) -> Checkpoint:
    from .prompts import load_bank  # local import to keep module load light

    data = Path(path).read_bytes()
    if len(data) < 16:
        raise CheckpointTruncatedError("checkpoint shorter than its fixed header")
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<Q", data, 8)
    if len(data) < 16 + header_len:
        raise CheckpointTruncatedError("header truncated")
    header = json.loads(data[16:16 + header_len].decode("utf-8"))

    config = TrainerConfig(**header["config"])
    registry = StyleRegistry(tuple(header["style_registry"]))
    bank = bank if bank is not None else load_bank()
    vocab = build_vocabulary(bank)
    if vocab_hash(vocab) != header["vocab_hash"]:
        raise ConfigurationError("prompt bank vocabulary does not match checkpoint")

    offset = 16 + header_len
    buffer_names = {"speech.fmean", "speech.fscale"}
    tensors: dict[str, Tensor] = {}
    raw: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if len(data) < offset + nbytes:
            raise CheckpointTruncatedError(f"parameter {entry['name']} truncated")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
        if entry["name"] in buffer_names:
            raw[entry["name"]] = arr.copy()
        else:
            tensors[entry["name"]] = Tensor(arr.copy(), requires_grad=True)
        offset += nbytes

    def take(prefix, attrs):
        return {a: tensors[f"{prefix}.{a}"] for a in attrs}

    speech = SpeechEncoderParams(
        fmean=raw.get("speech.fmean"),
        fscale=raw.get("speech.fscale"),
        **take("speech", ["w1", "b1", "w2", "b2", "wp", "bp"]),
    )
    text = TextEncoderParams(
        pooling=header["pooling"], **take("text", ["table", "wp", "bp"])
    )
    temp = obj.Temperature(log_tau=tensors["temp.log_tau"])
    classifier = obj.StyleClassifier(**take("cls", ["w1", "b1", "w2", "b2"]))
    disc = None
    if "disc.w1" in tensors:
        disc = obj.Discriminator(**take("disc", ["w1", "b1", "w2", "b2"]))
    bundle = ModelBundle(speech, text, temp, classifier, disc, registry, vocab, config)
    return Checkpoint(bundle=bundle, epoch=header["epoch"], val_loss=header["val_loss"])
