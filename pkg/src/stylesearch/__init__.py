"""stylesearch: retrieve expressive speech with free-form style descriptions.

Speech and text encoders share a unit-norm embedding space trained with a
symmetric contrastive loss, an adversarial modality discriminator, and an
auxiliary style classifier; retrieval is an exact cosine top-k scan over a
persistent embedding index.
"""

from .corpus import (
    Corpus,
    StyleRegistry,
    SyntheticCorpusSpec,
    Utterance,
    load_corpus,
    load_wav,
    mel_features,
    save_corpus,
    split_corpus,
    synth_corpus,
)
from .encoders import Embedding, encode_speech, encode_text, similarity
from .evalsuite import EvalReport, RetrievalTrial, evaluate, make_trials, score_trial
from .index import EmbeddingIndex, build_index, load_index, query, save_index
from .prompts import PromptBank, Vocabulary, build_vocabulary, load_bank, tokenize
from .trainer import Checkpoint, ModelBundle, TrainerConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "Corpus",
    "Embedding",
    "EmbeddingIndex",
    "EvalReport",
    "ModelBundle",
    "PromptBank",
    "RetrievalTrial",
    "StyleRegistry",
    "SyntheticCorpusSpec",
    "TrainerConfig",
    "Utterance",
    "Vocabulary",
    "build_index",
    "build_vocabulary",
    "encode_speech",
    "encode_text",
    "evaluate",
    "load_bank",
    "load_checkpoint",
    "load_corpus",
    "load_index",
    "load_wav",
    "make_trials",
    "mel_features",
    "query",
    "save_checkpoint",
    "save_corpus",
    "save_index",
    "score_trial",
    "similarity",
    "split_corpus",
    "synth_corpus",
    "tokenize",
    "train",
]
