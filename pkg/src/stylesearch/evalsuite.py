"""Retrieval-trial evaluation: Recall@k, duration-binned reporting, and the
classification-based retrieval baseline.

A trial fixes one positive utterance of the target style plus a sampled
distractor set.  Candidates are ranked by their mean cosine similarity to
every rendered prompt for the style (template x synonym), and Recall@k
records whether the positive lands in the top k.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Corpus
from .encoders import encode_text
from .index import EmbeddingIndex, batch_similarities
from .objectives import StyleClassifier
from .prompts import PromptBank, enumerate_all, tokenize

K_VALUES = (1, 5, 10, 20)

DURATION_BIN_EDGES = (4.0, 6.0, 8.0, 10.0)
DURATION_BIN_LABELS = ("<4s", "4-6s", "6-8s", "8-10s", ">10s")


class TrialConfigurationError(ValueError):
    """Corpus cannot support the requested trial construction."""


@dataclass(frozen=True)
class RetrievalTrial:
    target_style: int
    positive_id: str
    distractor_ids: tuple[str, ...]

    @property
    def candidate_ids(self) -> tuple[str, ...]:
        return (self.positive_id,) + self.distractor_ids


@dataclass(frozen=True)
class TrialResult:
    rank: int  # 1-based rank of the positive
    n_candidates: int

    def recall_at(self, k: int) -> float:
        return 1.0 if self.rank <= k else 0.0


def make_trials(
    corpus: Corpus,
    style: int,
    n_trials: int = 1000,
    n_distractors: int = 400,
    seed: int = 0,
) -> list[RetrievalTrial]:
    """Sample trials: positive uniform within the style, distractors without
    replacement from every other style."""
    groups = corpus.by_style()
    positives = groups.get(style, [])
    others = [u for sid, us in groups.items() if sid != style for u in us]
    others.sort(key=lambda u: u.id)
    if not positives:
        raise TrialConfigurationError(f"no utterances of style id {style}")
    if len(others) < n_distractors:
        raise TrialConfigurationError(
            f"need {n_distractors} distractors, only {len(others)} available"
        )
    positives = sorted(positives, key=lambda u: u.id)
    rng = np.random.default_rng(np.random.SeedSequence([seed, style]))
    trials = []
    for _ in range(n_trials):
        pos = positives[int(rng.integers(len(positives)))]
        chosen = rng.choice(len(others), size=n_distractors, replace=False)
        trials.append(
            RetrievalTrial(
                target_style=style,
                positive_id=pos.id,
                distractor_ids=tuple(others[i].id for i in chosen),
            )
        )
    return trials


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def style_query_embeddings(bundle, bank: PromptBank, style_name: str) -> np.ndarray:
    """(n_prompts, d) text embeddings for every rendered prompt of a style."""
    prompts = enumerate_all(bank, style_name)
    return np.vstack(
        [encode_text(bundle.text, tokenize(bundle.vocab, p)).vector for p in prompts]
    )


def rank_candidates(scores: np.ndarray, candidate_ids: Sequence[str], positive_id: str) -> int:
    """1-based rank of the positive under descending score, ascending-id ties."""
    order = sorted(range(len(candidate_ids)), key=lambda i: (-scores[i], candidate_ids[i]))
    return order.index(candidate_ids.index(positive_id)) + 1


def score_trial_with_queries(
    index: EmbeddingIndex,
    query_vectors: np.ndarray,
    trial: RetrievalTrial,
    full_scores: np.ndarray | None = None,
) -> TrialResult:
    if full_scores is None:
        full_scores = batch_similarities(index, query_vectors)
    rows = [index.row_of(uid) for uid in trial.candidate_ids]
    mean_scores = full_scores[:, rows].mean(axis=0)
    rank = rank_candidates(mean_scores, list(trial.candidate_ids), trial.positive_id)
    return TrialResult(rank=rank, n_candidates=len(rows))


def score_trial(
    index: EmbeddingIndex, bundle, bank: PromptBank, trial: RetrievalTrial
) -> TrialResult:
    """Rank candidates by mean similarity over every prompt for the style."""
    style_name = bundle.registry.name_of(trial.target_style)
    queries = style_query_embeddings(bundle, bank, style_name)
    return score_trial_with_queries(index, queries, trial)


def classifier_baseline_rank(
    classifier: StyleClassifier, index: EmbeddingIndex, trial: RetrievalTrial
) -> TrialResult:
    """Rank candidates by the classifier logit for the target style."""
    n_styles = classifier.w2.shape[1]
    if not 0 <= trial.target_style < n_styles:
        raise TrialConfigurationError(
            f"style id {trial.target_style} outside classifier range {n_styles}"
        )
    rows = [index.row_of(uid) for uid in trial.candidate_ids]
    emb = index.vectors64[rows]
    hidden = np.maximum(emb @ classifier.w1.values + classifier.b1.values, 0.0)
    logits = hidden @ classifier.w2.values + classifier.b2.values
    scores = logits[:, trial.target_style]
    rank = rank_candidates(scores, list(trial.candidate_ids), trial.positive_id)
    return TrialResult(rank=rank, n_candidates=len(rows))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    per_style: dict[str, dict[str, float]]
    overall: dict[str, float]
    bins: dict[str, dict[str, float]] | None = None
    bin_counts: dict[str, int] | None = None


def _recall_dict(results: Iterable[TrialResult], k_values=K_VALUES) -> dict[str, float]:
    results = list(results)
    return {
        f"r{k}": float(np.mean([r.recall_at(k) for r in results])) if results else 0.0
        for k in k_values
    }


def recall_report(
    results_by_style: dict[int, list[TrialResult]],
    registry,
    k_values=K_VALUES,
) -> EvalReport:
    """Per-style Recall@k plus the unweighted macro average over styles."""
    if not results_by_style:
        raise ValueError("no trial results to report")
    per_style = {
        registry.name_of(sid): _recall_dict(results, k_values)
        for sid, results in sorted(results_by_style.items())
    }
    overall = {
        f"r{k}": float(np.mean([per_style[name][f"r{k}"] for name in per_style]))
        for k in k_values
    }
    return EvalReport(per_style=per_style, overall=overall)


def duration_bin(duration_s: float) -> str:
    """Left-closed bins; 4.0 s falls in '4-6s'."""
    for edge, label in zip(DURATION_BIN_EDGES, DURATION_BIN_LABELS):
        if duration_s < edge:
            return label
    return DURATION_BIN_LABELS[-1]


def duration_binned_report(
    results_with_durations: Iterable[tuple[float, TrialResult]],
    k_values=K_VALUES,
) -> tuple[dict[str, dict[str, float]], dict[str, int]]:
    """Recall@k per positive-duration bin, plus trial counts per bin."""
    grouped: dict[str, list[TrialResult]] = {label: [] for label in DURATION_BIN_LABELS}
    for duration, result in results_with_durations:
        grouped[duration_bin(duration)].append(result)
    recalls = {
        label: _recall_dict(results, k_values)
        for label, results in grouped.items()
        if results
    }
    counts = {label: len(results) for label, results in grouped.items() if results}
    return recalls, counts


def evaluate(
    index: EmbeddingIndex,
    bundle,
    bank: PromptBank,
    corpus: Corpus,
    n_trials: int = 200,
    n_distractors: int = 50,
    seed: int = 0,
    k_values=K_VALUES,
    with_bins: bool = True,
) -> EvalReport:
    """Full protocol: trials for every style, prompt-averaged ranking, report."""
    durations = {u.id: u.duration_s for u in corpus.utterances}
    results_by_style: dict[int, list[TrialResult]] = {}
    binned: list[tuple[float, TrialResult]] = []
    for sid in sorted(corpus.by_style()):
        style_name = corpus.registry.name_of(sid)
        queries = style_query_embeddings(bundle, bank, style_name)
        full_scores = batch_similarities(index, queries)
        trials = make_trials(corpus, sid, n_trials, n_distractors, seed)
        results = [score_trial_with_queries(index, queries, t, full_scores) for t in trials]
        results_by_style[sid] = results
        binned.extend((durations[t.positive_id], r) for t, r in zip(trials, results))
    report = recall_report(results_by_style, corpus.registry, k_values)
    if with_bins:
        bins, counts = duration_binned_report(binned, k_values)
        report = EvalReport(
            per_style=report.per_style, overall=report.overall, bins=bins, bin_counts=counts
        )
    return report


def report_to_json(report: EvalReport) -> str:
    doc = {"overall": report.overall, "styles": report.per_style}
    if report.bins is not None:
        doc["bins"] = report.bins
        doc["bin_counts"] = report.bin_counts
    return json.dumps(doc, indent=2, sort_keys=True)


def report_table(report: EvalReport) -> str:
    """Human-readable fixed-width table."""
    lines = [f"{'style':<14}" + "".join(f"{f'R@{k}':>8}" for k in K_VALUES)]
    for name, recalls in report.per_style.items():
        lines.append(
            f"{name:<14}" + "".join(f"{recalls[f'r{k}']:>8.4f}" for k in K_VALUES)
        )
    lines.append(
        f"{'overall':<14}" + "".join(f"{report.overall[f'r{k}']:>8.4f}" for k in K_VALUES)
    )
    if report.bins:
        lines.append("")
        lines.append(f"{'duration bin':<14}" + "".join(f"{f'R@{k}':>8}" for k in K_VALUES) + f"{'trials':>8}")
        for label in DURATION_BIN_LABELS:
            if label in report.bins:
                recalls = report.bins[label]
                lines.append(
                    f"{label:<14}"
                    + "".join(f"{recalls[f'r{k}']:>8.4f}" for k in K_VALUES)
                    + f"{report.bin_counts[label]:>8d}"
                )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Embedding export
# ---------------------------------------------------------------------------

def dump_embeddings(
    index: EmbeddingIndex,
    path: str | Path,
    bundle=None,
    bank: PromptBank | None = None,
) -> int:
    """Tab-separated export of index rows (and, optionally, every text-prompt
    embedding from a bank sweep) for external projection tools."""
    if len(index) == 0:
        raise ValueError("cannot dump an empty index")
    header = ["id", "modality", "style"] + [f"v{i}" for i in range(index.d)]
    lines = ["\t".join(header)]
    for uid, row in zip(index.ids, index.vectors):
        style = (index.metadata.get(uid) or {}).get("style") or ""
        lines.append("\t".join([uid, "speech", style] + [repr(float(x)) for x in row]))
    count = len(index)
    if bundle is not None and bank is not None:
        for style_name in bank.styles:
            for i, prompt in enumerate(enumerate_all(bank, style_name)):
                vec = encode_text(bundle.text, tokenize(bundle.vocab, prompt)).vector
                lines.append(
                    "\t".join(
                        [f"text:{style_name}:{i}", "text", style_name]
                        + [repr(float(x)) for x in vec]
                    )
                )
                count += 1
    Path(path).write_text("\n".join(lines) + "\n", "utf-8")
    return count
