"""Prompt bank: style-description templates, per-style synonyms, tokenizer.

The bank is a data file (templates with a ``<style>`` placeholder plus an
ordered substitution list per style, canonical name first) so styles and
phrasings can be extended without touching code.  A closed word-level
vocabulary is derived from the bank; free-form query words outside it map
to a shared unknown token instead of erroring.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

PLACEHOLDER = "<style>"
UNK_ID = 0
FIXED_TEMPLATE = "Speech that is <style>."

_WORD_RE = re.compile(r"[^a-z0-9]+")


class PromptBankError(ValueError):
    """Malformed bank file or unknown style/template lookup."""


@dataclass(frozen=True)
class PromptBank:
    """Templates plus per-style substitution lists (element 0 is the label itself)."""

    templates: tuple[str, ...]
    synonyms: dict[str, tuple[str, ...]]

    def __post_init__(self):
        for t in self.templates:
            if t.count(PLACEHOLDER) != 1:
                raise PromptBankError(f"template must contain {PLACEHOLDER} exactly once: {t!r}")
        for name, subs in self.synonyms.items():
            if not subs or subs[0] != name:
                raise PromptBankError(f"substitution list for {name!r} must start with the label")

    @property
    def styles(self) -> tuple[str, ...]:
        return tuple(self.synonyms)

    def substitutions(self, style: str) -> tuple[str, ...]:
        try:
            return self.synonyms[style]
        except KeyError:
            raise PromptBankError(f"style {style!r} not in prompt bank") from None


def load_bank(path: str | Path | None = None) -> PromptBank:
    """Load a bank from JSON; defaults to the bank shipped with the package."""
    if path is None:
        raw = resources.files("stylesearch").joinpath("data/prompt_bank.json").read_text("utf-8")
    else:
        raw = Path(path).read_text("utf-8")
    try:
        doc = json.loads(raw)
        templates = tuple(doc["templates"])
        synonyms = {name: tuple(subs) for name, subs in doc["styles"].items()}
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise PromptBankError(f"malformed prompt bank: {exc}") from exc
    return PromptBank(templates, synonyms)


def fixed_prompt_bank(bank: PromptBank) -> PromptBank:
    """Single fixed template, canonical labels only (prompt-augmentation ablation)."""
    return PromptBank((FIXED_TEMPLATE,), {name: (name,) for name in bank.synonyms})


def render_prompt(bank: PromptBank, style: str, template_idx: int, synonym_idx: int) -> str:
    subs = bank.substitutions(style)
    if not 0 <= template_idx < len(bank.templates):
        raise IndexError(f"template index {template_idx} out of range")
    if not 0 <= synonym_idx < len(subs):
        raise IndexError(f"synonym index {synonym_idx} out of range for {style!r}")
    return bank.templates[template_idx].replace(PLACEHOLDER, subs[synonym_idx])


def sample_prompt(bank: PromptBank, style: str, rng: np.random.Generator) -> str:
    """Uniform draw over template x substitution pairs."""
    subs = bank.substitutions(style)
    pair = int(rng.integers(len(bank.templates) * len(subs)))
    return render_prompt(bank, style, pair // len(subs), pair % len(subs))


def enumerate_all(bank: PromptBank, style: str) -> list[str]:
    """Every template x substitution rendering, template-major order."""
    subs = bank.substitutions(style)
    return [
        template.replace(PLACEHOLDER, sub)
        for template in bank.templates
        for sub in subs
    ]


# ---------------------------------------------------------------------------
# Vocabulary and tokenizer
# ---------------------------------------------------------------------------

def normalize_words(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _WORD_RE.sub(" ", text.lower()).split()


@dataclass(frozen=True)
class Vocabulary:
    """Closed word-level vocabulary; index 0 is the unknown token."""

    tokens: tuple[str, ...]

    @property
    def index(self) -> dict[str, int]:
        cached = getattr(self, "_index_cache", None)
        if cached is None:
            cached = {tok: i + 1 for i, tok in enumerate(self.tokens)}
            object.__setattr__(self, "_index_cache", cached)
        return cached

    def __len__(self) -> int:
        return len(self.tokens) + 1  # +1 for the unknown slot


def build_vocabulary(bank: PromptBank) -> Vocabulary:
    words: set[str] = set()
    for template in bank.templates:
        words.update(normalize_words(template.replace(PLACEHOLDER, " ")))
    for subs in bank.synonyms.values():
        for sub in subs:
            words.update(normalize_words(sub))
    return Vocabulary(tuple(sorted(words)))


def tokenize(vocab: Vocabulary, text: str) -> list[int]:
    """Map text to vocabulary ids; unknown words become UNK_ID, empty -> [UNK_ID]."""
    ids = [vocab.index.get(w, UNK_ID) for w in normalize_words(text)]
    return ids if ids else [UNK_ID]


def vocab_hash(vocab: Vocabulary) -> str:
    return hashlib.sha256("\n".join(vocab.tokens).encode("utf-8")).hexdigest()
