"""Retrieval trials, Recall@k reports, duration bins, classifier baseline."""

import json

import numpy as np
import pytest

from stylesearch.corpus import (
    DEFAULT_STYLE_NAMES,
    Corpus,
    StyleRegistry,
    SyntheticCorpusSpec,
    Utterance,
    synth_corpus,
)
from stylesearch.encoders import encode_text
from stylesearch.evalsuite import (
    DURATION_BIN_LABELS,
    EvalReport,
    RetrievalTrial,
    TrialConfigurationError,
    TrialResult,
    classifier_baseline_rank,
    dump_embeddings,
    duration_bin,
    duration_binned_report,
    evaluate,
    make_trials,
    rank_candidates,
    recall_report,
    report_table,
    report_to_json,
    score_trial,
    score_trial_with_queries,
    style_query_embeddings,
)
from stylesearch.index import EmbeddingIndex, batch_similarities
from stylesearch.prompts import build_vocabulary, enumerate_all, load_bank, tokenize
from stylesearch.trainer import TrainerConfig, init_model


def synthetic_embedding_corpus(rng, registry, per_style=8, d=12, spread=0.15):
    """Corpus + index where each style owns a latent direction (no training)."""
    centers = rng.standard_normal((len(registry), d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    utterances = []
    ids = []
    rows = []
    meta = {}
    for sid in range(len(registry)):
        for j in range(per_style):
            uid = f"{registry.name_of(sid)}-{j:03d}"
            vec = centers[sid] + spread * rng.standard_normal(d)
            vec /= np.linalg.norm(vec)
            duration = float(rng.uniform(0.5, 12.0))
            utterances.append(
                Utterance(uid, np.zeros(int(duration * 16000), dtype=np.float32), sid)
            )
            ids.append(uid)
            rows.append(vec.astype(np.float32))
            meta[uid] = {"style": registry.name_of(sid), "duration_s": duration, "path": ""}
    corpus = Corpus(utterances=tuple(utterances), registry=registry)
    index = EmbeddingIndex(d=d, ids=ids, vectors=np.stack(rows), metadata=meta)
    return corpus, index, centers


@pytest.fixture(scope="module")
def bank():
    return load_bank()


@pytest.fixture(scope="module")
def setup():
    rng = np.random.default_rng(0)
    registry = StyleRegistry(DEFAULT_STYLE_NAMES[:6])
    return synthetic_embedding_corpus(rng, registry)


class TestMakeTrials:
    def test_counts_and_candidate_sizes(self, setup):
        corpus, _, _ = setup
        trials = make_trials(corpus, style=2, n_trials=25, n_distractors=10, seed=4)
        assert len(trials) == 25
        for t in trials:
            assert len(t.candidate_ids) == 11
            assert len(set(t.candidate_ids)) == 11

    def test_positive_has_target_style_distractors_do_not(self, setup):
        corpus, _, _ = setup
        style_of = {u.id: u.style for u in corpus.utterances}
        for t in make_trials(corpus, 1, 20, 12, seed=5):
            assert style_of[t.positive_id] == 1
            assert all(style_of[d] != 1 for d in t.distractor_ids)

    def test_deterministic(self, setup):
        corpus, _, _ = setup
        a = make_trials(corpus, 3, 15, 9, seed=6)
        b = make_trials(corpus, 3, 15, 9, seed=6)
        assert a == b

    def test_insufficient_distractors(self, setup):
        corpus, _, _ = setup
        with pytest.raises(TrialConfigurationError):
            make_trials(corpus, 0, 5, n_distractors=10_000, seed=0)

    def test_zero_distractors_rank_one(self, setup):
        corpus, index, _ = setup
        bank = load_bank()
        config = TrainerConfig(d=12, h_s=8, h_t=8, d_cls=8, d_disc=8)
        bundle = init_model(config, corpus.registry, build_vocabulary(bank))
        for t in make_trials(corpus, 0, 5, n_distractors=0, seed=1):
            result = score_trial(index, bundle, bank, t)
            assert result.rank == 1
            assert result.recall_at(1) == 1.0


class TestScoring:
    def test_rank_thresholds(self):
        r = TrialResult(rank=3, n_candidates=51)
        assert r.recall_at(1) == 0.0
        assert r.recall_at(5) == 1.0
        assert r.recall_at(10) == 1.0
        assert r.recall_at(20) == 1.0

    def test_rank_candidates_tie_break(self):
        scores = np.array([0.5, 0.5, 0.9])
        assert rank_candidates(scores, ["b", "a", "c"], "b") == 3
        assert rank_candidates(scores, ["b", "a", "c"], "a") == 2

    def test_matches_end_to_end_oracle(self, setup, bank):
        # independent recomputation: re-encode prompts, re-average, full sort
        corpus, index, _ = setup
        config = TrainerConfig(d=12, h_s=8, h_t=8, d_cls=8, d_disc=8)
        bundle = init_model(config, corpus.registry, build_vocabulary(bank))
        trials = [
            t
            for sid in range(len(corpus.registry))
            for t in make_trials(corpus, sid, 17, 12, seed=sid + 70)
        ]
        assert len(trials) == 102
        for trial in trials:
            got = score_trial(index, bundle, bank, trial)
            # oracle
            name = corpus.registry.name_of(trial.target_style)
            prompts = enumerate_all(bank, name)
            q = np.stack(
                [encode_text(bundle.text, tokenize(bundle.vocab, p)).vector for p in prompts]
            )
            cand = list(trial.candidate_ids)
            means = []
            for uid in cand:
                row = index.vectors64[index.ids.index(uid)]
                means.append(float(np.mean([qi @ row for qi in q])))
            order = sorted(range(len(cand)), key=lambda i: (-means[i], cand[i]))
            expected_rank = order.index(cand.index(trial.positive_id)) + 1
            assert got.rank == expected_rank

    def test_presentation_order_invariance(self, setup, bank):
        corpus, index, _ = setup
        config = TrainerConfig(d=12, h_s=8, h_t=8, d_cls=8, d_disc=8)
        bundle = init_model(config, corpus.registry, build_vocabulary(bank))
        rng = np.random.default_rng(8)
        trial = make_trials(corpus, 2, 1, 15, seed=9)[0]
        base = score_trial(index, bundle, bank, trial).rank
        for _ in range(3):
            shuffled = RetrievalTrial(
                target_style=trial.target_style,
                positive_id=trial.positive_id,
                distractor_ids=tuple(rng.permutation(trial.distractor_ids)),
            )
            assert score_trial(index, bundle, bank, shuffled).rank == base

    def test_extra_distractor_never_improves_rank(self, setup, bank):
        corpus, index, _ = setup
        config = TrainerConfig(d=12, h_s=8, h_t=8, d_cls=8, d_disc=8)
        bundle = init_model(config, corpus.registry, build_vocabulary(bank))
        style_of = {u.id: u.style for u in corpus.utterances}
        pool = [u.id for u in corpus.utterances if style_of[u.id] != 0]
        trial = RetrievalTrial(0, corpus.utterances[0].id, tuple(pool[:10]))
        base = score_trial(index, bundle, bank, trial).rank
        for extra in pool[10:20]:
            grown = RetrievalTrial(0, trial.positive_id, trial.distractor_ids + (extra,))
            assert score_trial(index, bundle, bank, grown).rank >= base

    def test_single_prompt_bank_equals_query_ranking(self, setup):
        from stylesearch.prompts import PromptBank
        from stylesearch.index import query

        corpus, index, _ = setup
        single = PromptBank(
            ("Speech that is <style>.",), {n: (n,) for n in corpus.registry}
        )
        config = TrainerConfig(d=12, h_s=8, h_t=8, d_cls=8, d_disc=8)
        bundle = init_model(config, corpus.registry, build_vocabulary(single))
        trial = make_trials(corpus, 4, 1, 20, seed=10)[0]
        result = score_trial(index, bundle, single, trial)
        emb = encode_text(
            bundle.text,
            tokenize(bundle.vocab, enumerate_all(single, corpus.registry.name_of(4))[0]),
        )
        full = query(index, emb, k=len(index))
        restricted = [uid for uid, _ in full if uid in set(trial.candidate_ids)]
        assert restricted.index(trial.positive_id) + 1 == result.rank

    def test_missing_id_raises(self, setup, bank):
        corpus, index, _ = setup
        config = TrainerConfig(d=12, h_s=8, h_t=8, d_cls=8, d_disc=8)
        bundle = init_model(config, corpus.registry, build_vocabulary(bank))
        trial = RetrievalTrial(0, "ghost", (index.ids[0],))
        with pytest.raises(KeyError):
            score_trial(index, bundle, bank, trial)


class TestReports:
    def test_perfect_retrieval(self):
        registry = StyleRegistry(DEFAULT_STYLE_NAMES[:2])
        results = {0: [TrialResult(1, 51)] * 10, 1: [TrialResult(1, 51)] * 10}
        report = recall_report(results, registry)
        assert all(v == 1.0 for v in report.overall.values())

    def test_macro_average(self):
        registry = StyleRegistry(DEFAULT_STYLE_NAMES[:2])
        results = {
            0: [TrialResult(1, 51)] * 4 + [TrialResult(50, 51)] * 6,  # r1 = 0.4
            1: [TrialResult(1, 51)] * 8 + [TrialResult(50, 51)] * 2,  # r1 = 0.8
        }
        report = recall_report(results, registry)
        np.testing.assert_allclose(report.overall["r1"], 0.6, atol=1e-12)

    def test_monotone_in_k(self):
        rng = np.random.default_rng(11)
        registry = StyleRegistry(DEFAULT_STYLE_NAMES[:3])
        results = {
            sid: [TrialResult(int(rng.integers(1, 52)), 51) for _ in range(30)]
            for sid in range(3)
        }
        report = recall_report(results, registry)
        for scope in [report.overall, *report.per_style.values()]:
            assert scope["r1"] <= scope["r5"] <= scope["r10"] <= scope["r20"]

    def test_empty_results_rejected(self):
        with pytest.raises(ValueError):
            recall_report({}, StyleRegistry(DEFAULT_STYLE_NAMES[:2]))

    def test_json_report_shape(self, setup, bank):
        corpus, index, _ = setup
        config = TrainerConfig(d=12, h_s=8, h_t=8, d_cls=8, d_disc=8)
        bundle = init_model(config, corpus.registry, build_vocabulary(bank))
        report = evaluate(index, bundle, bank, corpus, n_trials=5, n_distractors=8, seed=3)
        doc = json.loads(report_to_json(report))
        assert set(doc["overall"]) == {"r1", "r5", "r10", "r20"}
        assert set(doc["styles"]) == set(corpus.registry.names)
        assert sum(doc["bin_counts"].values()) == 5 * len(corpus.registry)
        assert report_table(report)  # renders without error

    def test_evaluate_deterministic(self, setup, bank):
        corpus, index, _ = setup
        config = TrainerConfig(d=12, h_s=8, h_t=8, d_cls=8, d_disc=8)
        bundle = init_model(config, corpus.registry, build_vocabulary(bank))
        a = evaluate(index, bundle, bank, corpus, n_trials=6, n_distractors=8, seed=5)
        b = evaluate(index, bundle, bank, corpus, n_trials=6, n_distractors=8, seed=5)
        assert report_to_json(a) == report_to_json(b)


class TestDurationBins:
    def test_bin_assignment(self):
        assert duration_bin(5.2) == "4-6s"
        assert duration_bin(4.0) == "4-6s"  # left-closed boundary
        assert duration_bin(3.999) == "<4s"
        assert duration_bin(8.0) == "8-10s"
        assert duration_bin(10.0) == ">10s"
        assert duration_bin(11.7) == ">10s"

    def test_counts_partition_trials(self):
        rng = np.random.default_rng(12)
        pairs = [
            (float(rng.uniform(0.5, 12)), TrialResult(int(rng.integers(1, 10)), 20))
            for _ in range(200)
        ]
        bins, counts = duration_binned_report(pairs)
        assert sum(counts.values()) == 200
        assert set(counts) <= set(DURATION_BIN_LABELS)

    def test_binned_recall_values(self):
        pairs = [(1.0, TrialResult(1, 10)), (1.5, TrialResult(7, 10)), (9.0, TrialResult(1, 10))]
        bins, counts = duration_binned_report(pairs)
        np.testing.assert_allclose(bins["<4s"]["r1"], 0.5)
        np.testing.assert_allclose(bins["8-10s"]["r1"], 1.0)
        assert counts == {"<4s": 2, "8-10s": 1}


class TestClassifierBaseline:
    def test_perfect_classifier_ranks_first(self, setup):
        corpus, index, centers = setup
        from stylesearch.autodiff import Tensor
        from stylesearch.objectives import StyleClassifier

        d = index.d
        n_styles = len(corpus.registry)
        # logits = 100 * (embedding @ centers.T): center-matched candidates win
        cls = StyleClassifier(
            w1=Tensor(np.eye(d) * 100.0),
            b1=Tensor(np.full(d, 100.0)),  # keep relu inactive-free
            w2=Tensor(centers.T),
            b2=Tensor(np.zeros(n_styles)),
        )
        for sid in range(n_styles):
            for trial in make_trials(corpus, sid, 5, 15, seed=sid):
                assert classifier_baseline_rank(cls, index, trial).rank == 1

    def test_matches_logit_sort_oracle(self, setup):
        corpus, index, _ = setup
        from stylesearch.objectives import init_classifier

        rng = np.random.default_rng(13)
        cls = init_classifier(index.d, 9, len(corpus.registry), rng)
        trials = [
            t
            for sid in range(len(corpus.registry))
            for t in make_trials(corpus, sid, 17, 10, seed=sid + 40)
        ]
        for trial in trials[:100]:
            got = classifier_baseline_rank(cls, index, trial)
            cand = list(trial.candidate_ids)
            emb = index.vectors64[[index.ids.index(u) for u in cand]]
            h = np.maximum(emb @ cls.w1.values + cls.b1.values, 0.0)
            logits = (h @ cls.w2.values + cls.b2.values)[:, trial.target_style]
            order = sorted(range(len(cand)), key=lambda i: (-logits[i], cand[i]))
            assert got.rank == order.index(cand.index(trial.positive_id)) + 1

    def test_registry_mismatch(self, setup):
        corpus, index, _ = setup
        from stylesearch.objectives import init_classifier

        cls = init_classifier(index.d, 6, 2, np.random.default_rng(0))
        trial = RetrievalTrial(5, index.ids[0], (index.ids[1],))
        with pytest.raises(TrialConfigurationError):
            classifier_baseline_rank(cls, index, trial)


class TestDumpEmbeddings:
    def test_speech_rows_and_header(self, setup, tmp_path):
        _, index, _ = setup
        path = tmp_path / "dump.tsv"
        count = dump_embeddings(index, path)
        lines = path.read_text().strip().split("\n")
        assert count == len(index)
        assert len(lines) == len(index) + 1
        header = lines[0].split("\t")
        assert header[:3] == ["id", "modality", "style"]
        assert len(header) == 3 + index.d

    def test_floats_round_trip(self, setup, tmp_path):
        _, index, _ = setup
        path = tmp_path / "dump.tsv"
        dump_embeddings(index, path)
        lines = path.read_text().strip().split("\n")[1:]
        for i, line in enumerate(lines[:10]):
            cells = line.split("\t")
            parsed = np.array([float(x) for x in cells[3:]], dtype=np.float32)
            np.testing.assert_array_equal(parsed, index.vectors[i])

    def test_text_sweep_rows(self, setup, bank, tmp_path):
        corpus, index, _ = setup
        config = TrainerConfig(d=12, h_s=8, h_t=8, d_cls=8, d_disc=8)
        bundle = init_model(config, corpus.registry, build_vocabulary(bank))
        path = tmp_path / "dump.tsv"
        count = dump_embeddings(index, path, bundle, bank)
        lines = path.read_text().strip().split("\n")[1:]
        text_rows = [l for l in lines if l.split("\t")[1] == "text"]
        assert len(text_rows) == 22 * 66
        assert count == len(index) + 22 * 66

    def test_empty_index_rejected(self, tmp_path):
        idx = EmbeddingIndex(d=4, ids=[], vectors=np.zeros((0, 4), dtype=np.float32))
        with pytest.raises(ValueError):
            dump_embeddings(idx, tmp_path / "no.tsv")
