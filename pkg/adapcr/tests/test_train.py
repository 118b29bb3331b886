import math

import numpy as np
import pytest

from conftest import make_example
from utils.corpus import Corpus, Passage, QAExample
from utils.embed import DualEncoder, HashEmbeddingProvider, ProjectionHead
from utils.exceptions import ConfigError, TrainingDivergedError
from utils.fixtures import generate
from utils.gradcheck import check_gradient, random_batch, random_head
from utils.lmscore import LmScore, MockLmScorer, ScoreCache
from utils.models import EmbeddingProviderSpec, FixtureSpec, RetrievalConfig, TrainingConfig
from utils.retrieval import CandidateSet, Combination
from utils.train import (
    HeadGradient,
    NegativeSampler,
    TrainingExample,
    build_training_set,
    candidate_scores,
    ce_loss,
    clamp_counter,
    grad_loss,
    kl_loss,
    marginal_answer_probability,
    normalize_pret,
    optimal_retriever,
    positive_filter,
    rag_loss,
    sample_batches,
    train_loop,
    write_loss_curve,
)


RAG = TrainingConfig(loss="rag")
KL = TrainingConfig(loss="kl", beta=1.0)
CE = TrainingConfig(loss="ce")


@pytest.fixture(scope="module")
def fixture_training_set():
    spec = FixtureSpec(kind="two_hop", n_questions=12, corpus_size=60, vocab_size=2000, seed=5)
    embedder = EmbeddingProviderSpec(kind="deterministic-hash", dim=64)
    bundle = generate(spec, embedder)
    provider = HashEmbeddingProvider(dim=64)
    encoder = DualEncoder(provider, ProjectionHead.identity(64))
    scorer, cache = MockLmScorer(), ScoreCache()
    examples, _ = build_training_set(
        bundle.dataset, bundle.corpus, encoder, scorer, cache, RetrievalConfig(k=3), RAG)
    return examples, NegativeSampler(encoder, bundle.corpus, scorer, cache)


class TestNormalizePret:
    def test_equal_scores_are_uniform(self):
        np.testing.assert_allclose(normalize_pret([0.3] * 4, 0.1).probabilities, 0.25)

    def test_two_candidates(self):
        probs = normalize_pret([1.0, 0.0], 1.0).probabilities
        np.testing.assert_allclose(probs, [math.e / (math.e + 1), 1 / (math.e + 1)], atol=1e-12)

    def test_small_temperature_sharpens(self):
        assert normalize_pret([0.2, 0.1, 0.0], 0.001).probabilities[0] > 0.999

    @pytest.mark.parametrize("gamma", [0.0, -1.0])
    def test_non_positive_temperature(self, gamma):
        with pytest.raises(ConfigError):
            normalize_pret([0.1, 0.2], gamma)

    def test_shift_and_scale_invariance(self, rng):
        scores = rng.normal(size=7)
        base = normalize_pret(scores, 0.1).probabilities
        np.testing.assert_allclose(normalize_pret(scores + 3.0, 0.1).probabilities, base, atol=1e-12)
        np.testing.assert_allclose(normalize_pret(scores * 4.0, 0.4).probabilities, base, atol=1e-12)
        assert abs(base.sum() - 1.0) < 1e-9


class TestLosses:
    def test_rag_single_certain_candidate(self):
        assert rag_loss([make_example([0.5], [0.0])], RAG) == pytest.approx(0.0, abs=1e-15)

    def test_rag_two_candidates(self):
        example = make_example([0.2, 0.2], [math.log(0.2), math.log(0.4)])
        assert abs(rag_loss([example], RAG) - (-math.log(0.3))) < 1e-9

    def test_rag_batch_is_a_sum(self):
        example = make_example([0.1, 0.4, 0.3], [-1.0, -2.0, -0.5])
        assert rag_loss([example, example], RAG) == pytest.approx(2 * rag_loss([example], RAG), rel=1e-15)

    def test_rag_marginal_uses_top_k_only(self):
        example = make_example([0.3, 0.2, 0.1], [-5.0, -5.0, 0.0])
        probs = normalize_pret([0.3, 0.2, 0.1], RAG.gamma).probabilities
        config = TrainingConfig(loss="rag", top_k_marginal=2)
        expected = -math.log(probs[0] * math.exp(-5.0) + probs[1] * math.exp(-5.0))
        assert rag_loss([example], config) == pytest.approx(expected, rel=1e-12)

    def test_balanced_stages_bring_a_pair_into_the_marginal(self):
        singles = make_example([0.9, 0.8], [-9.0, -9.0]).pool.singles
        pool = CandidateSet(question="q", k=2, singles=singles, pairs=[
            Combination(passages=("p0", "p1"), score=0.1, stage="pair")])
        example = TrainingExample(
            example=QAExample(question="q", answers=["a"]), pool=pool,
            lm_scores=[LmScore(log_likelihood=v, token_count=1) for v in (-9.0, -9.0, 0.0)])
        plain = rag_loss([example], TrainingConfig(loss="rag", top_k_marginal=2))
        balanced = rag_loss([example], TrainingConfig(loss="rag", top_k_marginal=2, balance_stages=True))
        assert balanced < plain

    def test_rag_clamps_vanishing_marginal(self):
        clamp_counter.reset()
        example = make_example([0.0], [-800.0])
        assert rag_loss([example], RAG) == pytest.approx(-math.log(1e-300))
        assert clamp_counter.count == 1

    def test_kl_worked_example(self):
        example = make_example([0.0, 0.0], [math.log(0.8), math.log(0.2)])
        expected = 0.8 * math.log(0.8 / 0.5) + 0.2 * math.log(0.2 / 0.5)
        assert kl_loss([example], KL) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.19274, abs=1e-5)

    def test_kl_zero_when_distributions_match(self, rng):
        q = rng.dirichlet(np.ones(5))
        example = make_example(KL.gamma * np.log(q), np.log(q))
        assert abs(kl_loss([example], KL)) < 1e-9

    def test_kl_positive_on_mismatch(self, rng):
        for _ in range(20):
            example = make_example(rng.normal(size=4), -rng.uniform(0.1, 5.0, size=4))
            assert kl_loss([example], KL) > 0

    def test_ce_uniform_is_log_n(self):
        example = make_example([0.1] * 4, [-3.0, -1.0, -2.0, -4.0])
        assert ce_loss([example], CE) == pytest.approx(math.log(4))
        assert ce_loss([example], CE) == pytest.approx(1.38629, abs=1e-5)

    def test_ce_one_hot_on_gold(self):
        example = make_example([10.0, 0.0], [-0.1, -3.0])
        assert ce_loss([example], CE) < 1e-12

    def test_ce_ties_pick_the_lowest_index(self):
        example = make_example([0.0, 0.1], [-1.0, -1.0])
        probs = normalize_pret([0.0, 0.1], CE.gamma).probabilities
        assert ce_loss([example], CE) == pytest.approx(-math.log(probs[0]))


class TestGradients:
    def test_symmetric_pool_has_zero_rag_gradient(self, rng):
        q = np.tile(rng.normal(size=6), (4, 1))
        p = np.tile(rng.normal(size=6), (4, 1))
        example = make_example([0.0] * 4, [-1.0] * 4, vectors=(q, p))
        grad = grad_loss([example], TrainingConfig(loss="rag", top_k_marginal=2), ProjectionHead.identity(6))
        np.testing.assert_allclose(grad.flatten(), 0.0, atol=1e-12)

    def test_single_candidate_ce_gradient_is_zero(self, rng):
        example = make_example([0.0], [-1.0], vectors=(rng.normal(size=(1, 5)), rng.normal(size=(1, 5))))
        grad = grad_loss([example], CE, ProjectionHead.identity(5))
        np.testing.assert_allclose(grad.flatten(), 0.0, atol=1e-15)

    @pytest.mark.parametrize("loss", ["rag", "kl", "ce"])
    @pytest.mark.parametrize("dim", [4, 16])
    def test_matches_central_differences(self, loss, dim):
        rng = np.random.default_rng(dim)
        batch = random_batch(rng, dim, pool_size=6, batch_size=4)
        head = random_head(rng, dim)
        report = check_gradient(batch, TrainingConfig(loss=loss), head, step=1e-5)
        assert report.max_rel_diff < 1e-4


class TestAnswerProbabilityBound:
    def test_mixture_never_beats_the_best_candidate(self):
        spec = FixtureSpec(kind="single_hop", n_questions=100, corpus_size=200, vocab_size=3000, seed=11)
        bundle = generate(spec, EmbeddingProviderSpec(kind="deterministic-hash", dim=64))
        encoder = DualEncoder(HashEmbeddingProvider(dim=64), ProjectionHead.identity(64))
        examples, _ = build_training_set(
            bundle.dataset, bundle.corpus, encoder, MockLmScorer(), ScoreCache(),
            RetrievalConfig(k=5), TrainingConfig(positive_filter=False))
        assert len(examples) == 100
        rng = np.random.default_rng(0)
        for example in examples:
            lm = np.exp(example.log_likelihoods)
            distributions = rng.dirichlet(np.ones(lm.size), size=1000)
            assert np.all(distributions @ lm <= lm.max() + 1e-15)
            best = marginal_answer_probability(optimal_retriever(lm), lm)
            assert abs(best - lm.max()) < 1e-12


class TestPositiveFilter:
    def _corpus(self):
        passages = [Passage(id=f"p{i:02d}", text=f"filler text number {i}") for i in range(40)]
        passages[37] = Passage(id="p37", text="During the May Revolution of Argentina")
        return Corpus.from_passages(passages)

    def test_retains_present_and_normalized_answers(self):
        corpus = self._corpus()
        ids = [f"p{i:02d}" for i in range(40)]
        dataset = [
            QAExample(question="q1", answers=["May Revolution of Argentina"], subcorpus_ids=ids),
            QAExample(question="q2", answers=["Tiananmen"], subcorpus_ids=ids),
            QAExample(question="q3", answers=["the may revolution"], subcorpus_ids=ids),
        ]
        result = positive_filter(dataset, corpus)
        assert result.kept_indices == [0, 2]
        assert (result.retained, result.dropped) == (2, 1)


class TestBatches:
    def test_same_seed_same_batches(self, fixture_training_set):
        examples, _ = fixture_training_set
        first = [[e.question_idx for e in b] for b in sample_batches(examples, 5, seed=3)]
        second = [[e.question_idx for e in b] for b in sample_batches(examples, 5, seed=3)]
        assert first == second
        assert sorted(i for b in first for i in b) == sorted(e.question_idx for e in examples)

    def test_oversized_batch_becomes_one_batch(self, fixture_training_set):
        examples, _ = fixture_training_set
        batches = list(sample_batches(examples, len(examples) + 10, seed=0))
        assert len(batches) == 1
        assert len(batches[0]) == len(examples)

    def test_negatives_bounded_by_batch(self, fixture_training_set):
        examples, sampler = fixture_training_set
        for batch in sample_batches(examples, 4, seed=1, sampler=sampler):
            for member in batch:
                original = next(e for e in examples if e.question_idx == member.question_idx)
                assert len(member.pool.negatives) <= len(batch) - 1
                assert len(member.lm_scores) == len(member.pool)
                assert member.query_vectors.shape[0] == len(member.pool)
                assert len(member.pool) == len(original.pool) + len(member.pool.negatives)

    def test_batch_of_one_adds_nothing(self, fixture_training_set):
        examples, sampler = fixture_training_set
        for batch in sample_batches(examples, 1, seed=1, sampler=sampler):
            assert batch[0].pool.negatives == []

    def test_negatives_follow_the_current_head(self, fixture_training_set):
        examples, sampler = fixture_training_set
        rng = np.random.default_rng(8)
        head = ProjectionHead(W_q=rng.normal(size=(64, 64)), W_d=rng.normal(size=(64, 64)))
        moved = NegativeSampler(
            sampler.encoder.with_head(head), sampler.corpus, sampler.scorer, sampler.cache)

        def winner(example, under):
            own = [*example.pool.singles, *example.pool.pairs]
            scores = candidate_scores(example, under)[:len(own)]
            return own[int(np.argmax(scores))].passages

        stale = {e.question_idx: winner(e, None) for e in examples}
        fresh = {e.question_idx: winner(e, head) for e in examples}
        assert stale != fresh

        by_idx = {e.question_idx: e for e in examples}
        for batch in sample_batches(examples, 4, seed=1, sampler=moved):
            for member in batch:
                own = {c.passages for c in by_idx[member.question_idx].pool.combinations}
                expected = {
                    fresh[other.question_idx] for other in batch
                    if other.question_idx != member.question_idx
                } - own
                assert {c.passages for c in member.pool.negatives} == expected


class TestTrainLoop:
    def test_zero_learning_rate_keeps_head(self, fixture_training_set):
        examples, _ = fixture_training_set
        head = ProjectionHead.identity(64)
        config = TrainingConfig(learning_rate=0.0, epochs=2, batch_size=4, in_batch_negatives=False)
        result = train_loop(examples, config, head)
        np.testing.assert_array_equal(result.head.W_q, head.W_q)
        np.testing.assert_array_equal(result.head.W_d, head.W_d)
        assert [r.epoch for r in result.curve] == [1, 2]

    def test_loss_decreases_on_separable_batch(self):
        rng = np.random.default_rng(21)
        batch = random_batch(rng, 8, pool_size=6, batch_size=6)
        config = TrainingConfig(
            loss="rag", top_k_marginal=6, learning_rate=1e-3, epochs=5, batch_size=6,
            in_batch_negatives=False)
        result = train_loop(batch, config, random_head(rng, 8))
        losses = [r.loss for r in result.curve]
        assert all(later < earlier for earlier, later in zip(losses, losses[1:]))

    def test_nan_loss_aborts(self, monkeypatch, fixture_training_set):
        examples, _ = fixture_training_set
        zero = HeadGradient(grad_q=np.zeros((64, 64)), grad_d=np.zeros((64, 64)))
        monkeypatch.setattr("utils.train.loss_and_grad", lambda batch, config, head: (float("nan"), zero))
        with pytest.raises(TrainingDivergedError):
            train_loop(examples, TrainingConfig(epochs=1, in_batch_negatives=False),
                       ProjectionHead.identity(64))

    def test_loss_curve_csv(self, tmp_path, fixture_training_set):
        examples, _ = fixture_training_set
        config = TrainingConfig(epochs=2, batch_size=6, in_batch_negatives=False)
        result = train_loop(examples, config, ProjectionHead.identity(64))
        path = tmp_path / "curve.csv"
        write_loss_curve(result.curve, path)
        lines = path.read_text(encoding="utf-8").strip().splitlines()
        assert lines[0] == "epoch,loss,retained_examples"
        assert len(lines) == 3
        assert lines[1].endswith(f",{len(examples)}")
