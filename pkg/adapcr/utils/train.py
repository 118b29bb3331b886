from pathlib import Path
from typing import Callable, Iterator, List, Sequence, Tuple

import numpy as np
import polars as pl
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .corpus import Corpus, QAExample
from .embed import DualEncoder, EmbeddingProvider, ProjectionHead, concat_query
from .evaluate import answer_in_passages
from .exceptions import ConfigError, PreconditionError, TrainingDivergedError
from .lmscore import LmScore, LmScorer, ScoreCache, score_combinations, score_pool
from .logger import logger
from .models import CONSTS, RetrievalConfig, TrainingConfig
from .retrieval import CandidateSet, Combination, retrieve, select_best, subcorpus_for
from .seeding import derive_rng
from .storage import write_csv_atomic


class RetrieverDistribution(BaseModel):
    """P_ret over a candidate pool at temperature γ."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    probabilities: np.ndarray
    temperature: float = Field(gt=0)

    @field_validator("probabilities")
    def is_distribution(cls, v):
        if v.ndim != 1 or v.size == 0:
            raise ValueError("probabilities must be a non-empty vector")
        if np.any(v < 0) or np.any(v > 1) or not np.all(np.isfinite(v)):
            raise ValueError("probabilities must lie in [0, 1]")
        if abs(float(np.sum(v)) - 1.0) > 1e-9:
            raise ValueError("probabilities must sum to 1")
        return v


class TrainingExample(BaseModel):
    """
    One question with its fixed candidate pool and aligned LM scores.

    `query_vectors` / `passage_vectors` hold the provider (pre-head) embeddings
    of each candidate's query side (question, or d_i ⊕ x for pairs) and its
    scored passage (the single, or the pair's second passage). Without them the
    stored pool scores are used as-is.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    example: QAExample
    question_idx: int = 0
    pool: CandidateSet
    lm_scores: List[LmScore]
    query_vectors: np.ndarray | None = None
    passage_vectors: np.ndarray | None = None

    @model_validator(mode="after")
    def aligned(self):
        n = len(self.pool)
        if len(self.lm_scores) != n:
            raise ValueError(f"{len(self.lm_scores)} LM scores for a pool of {n}")
        if (self.query_vectors is None) != (self.passage_vectors is None):
            raise ValueError("query and passage vectors come together")
        if self.query_vectors is not None:
            if self.query_vectors.shape[0] != n or self.passage_vectors.shape != self.query_vectors.shape:
                raise ValueError("candidate vectors must be one row per pool entry")
        return self

    @property
    def log_likelihoods(self) -> np.ndarray:
        return np.array([s.log_likelihood for s in self.lm_scores], dtype=np.float64)

    @property
    def stages(self) -> List[str]:
        return [c.stage for c in self.pool.combinations]


class HeadGradient(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    grad_q: np.ndarray
    grad_d: np.ndarray

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.grad_q.ravel(), self.grad_d.ravel()])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.grad_q)) and np.all(np.isfinite(self.grad_d)))


class ClampCounter:
    """Counts how often a marginal answer probability hit the numeric floor."""

    def __init__(self):
        self.count = 0

    def reset(self) -> None:
        self.count = 0


clamp_counter = ClampCounter()


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x)
    return shifted - np.log(np.sum(np.exp(shifted)))


def _logsumexp(x: np.ndarray) -> float:
    m = np.max(x)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(x - m))))


def normalize_pret(scores: Sequence[float], gamma: float) -> RetrieverDistribution:
    """Softmax of scores / γ with max subtraction."""
    if gamma <= 0:
        raise ConfigError(f"Temperature must be positive, got {gamma}")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0 or not np.all(np.isfinite(scores)):
        raise PreconditionError("Scores must be a non-empty finite vector.")
    return RetrieverDistribution(
        probabilities=np.exp(_log_softmax(scores / gamma)), temperature=gamma)


def marginal_answer_probability(probabilities: np.ndarray, lm_probabilities: np.ndarray) -> float:
    """Σ_d P_ret(d) · P_LM(y | [d; x]) over the whole pool."""
    return float(np.dot(probabilities, lm_probabilities))


def optimal_retriever(lm_probabilities: np.ndarray) -> np.ndarray:
    """One-hot distribution on the first candidate with maximal P_LM."""
    one_hot = np.zeros_like(lm_probabilities, dtype=np.float64)
    one_hot[int(np.argmax(lm_probabilities))] = 1.0
    return one_hot


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise cosine plus the norms; rows with a zero side score 0."""
    a_norm = np.linalg.norm(a, axis=1)
    b_norm = np.linalg.norm(b, axis=1)
    valid = (a_norm > 0) & (b_norm > 0)
    denom = np.where(valid, a_norm * b_norm, 1.0)
    scores = np.where(valid, np.sum(a * b, axis=1) / denom, 0.0)
    return scores, a_norm, b_norm, valid


def candidate_scores(example: TrainingExample, head: ProjectionHead | None = None) -> np.ndarray:
    if head is None or example.query_vectors is None:
        return example.pool.scores
    a = example.query_vectors @ head.W_q.T
    b = example.passage_vectors @ head.W_d.T
    return _cosine_rows(a, b)[0]


def _marginal_indices(
    probabilities: np.ndarray, stages: Sequence[str], m: int, balance: bool
) -> np.ndarray:
    """Top-m candidates by P_ret (ties by canonical index), optionally holding both stages."""
    order = [int(i) for i in np.argsort(-probabilities, kind="stable")]
    chosen = order[:m]
    if balance and m >= 2:
        for stage in ("single", "pair"):
            if any(stages[i] == stage for i in chosen):
                continue
            best = next((i for i in order if stages[i] == stage), None)
            if best is None:
                continue
            # Evict the lowest-ranked member of the over-represented stage.
            chosen[-1] = best
            chosen = sorted(chosen, key=order.index)
    return np.array(sorted(chosen), dtype=np.int64)


def _rag_terms(
    scores: np.ndarray, log_likelihoods: np.ndarray, stages: Sequence[str], config: TrainingConfig
) -> Tuple[float, np.ndarray]:
    gamma = config.gamma
    log_p = _log_softmax(scores / gamma)
    p = np.exp(log_p)
    m = min(config.top_k_marginal, scores.size)
    top = _marginal_indices(p, stages, m, config.balance_stages)
    log_terms = log_p[top] + log_likelihoods[top]
    log_marginal = _logsumexp(log_terms)
    floor = float(np.log(config.clamp_floor))
    if not log_marginal > floor:
        clamp_counter.count += 1
        return -floor, np.zeros_like(scores)
    weights = np.zeros_like(scores)
    weights[top] = np.exp(log_terms - log_marginal)
    return -log_marginal, -(weights - p) / gamma


def _kl_terms(
    scores: np.ndarray, log_likelihoods: np.ndarray, stages: Sequence[str], config: TrainingConfig
) -> Tuple[float, np.ndarray]:
    log_p = _log_softmax(scores / config.gamma)
    log_q = _log_softmax(log_likelihoods / config.beta)
    q = np.exp(log_q)
    loss = float(np.sum(np.where(q > 0, q * (log_q - log_p), 0.0)))
    return loss, (np.exp(log_p) - q) / config.gamma


def _ce_terms(
    scores: np.ndarray, log_likelihoods: np.ndarray, stages: Sequence[str], config: TrainingConfig
) -> Tuple[float, np.ndarray]:
    log_p = _log_softmax(scores / config.gamma)
    gold = int(np.argmax(log_likelihoods))
    target = np.zeros_like(scores)
    target[gold] = 1.0
    return float(-log_p[gold]), (np.exp(log_p) - target) / config.gamma


LOSS_TERMS: dict[str, Callable] = {
    "rag": _rag_terms,
    "kl": _kl_terms,
    "ce": _ce_terms,
}


def _example_terms(
    example: TrainingExample, config: TrainingConfig, head: ProjectionHead | None
) -> Tuple[float, np.ndarray]:
    if len(example.pool) == 0:
        raise PreconditionError(f"Question {example.question_idx} has an empty pool.")
    scores = candidate_scores(example, head)
    return LOSS_TERMS[config.loss](scores, example.log_likelihoods, example.stages, config)


def batch_loss(
    batch: Sequence[TrainingExample], config: TrainingConfig, head: ProjectionHead | None = None
) -> float:
    """Selected loss summed over the batch in fixed order."""
    before = clamp_counter.count
    total = 0.0
    for example in batch:
        total += _example_terms(example, config, head)[0]
    if clamp_counter.count > before:
        logger.warning("Marginal answer probability clamped.", extra={"fields": {
            "events": clamp_counter.count - before, "floor": config.clamp_floor}})
    return total


def rag_loss(
    batch: Sequence[TrainingExample], config: TrainingConfig, head: ProjectionHead | None = None
) -> float:
    """−Σ log Σ_{top-k} P_ret(d|x) P_LM(y|[d;x]); P_LM enters un-normalised."""
    return batch_loss(batch, config.model_copy(update={"loss": "rag"}), head)


def kl_loss(
    batch: Sequence[TrainingExample], config: TrainingConfig, head: ProjectionHead | None = None
) -> float:
    """Σ KL(softmax(log P_LM / β) ‖ P_ret) over the batch."""
    return batch_loss(batch, config.model_copy(update={"loss": "kl"}), head)


def ce_loss(
    batch: Sequence[TrainingExample], config: TrainingConfig, head: ProjectionHead | None = None
) -> float:
    """Σ −log P_ret(gold), gold = arg-max P_LM (lowest index on ties)."""
    return batch_loss(batch, config.model_copy(update={"loss": "ce"}), head)


def loss_and_grad(
    batch: Sequence[TrainingExample], config: TrainingConfig, head: ProjectionHead
) -> Tuple[float, HeadGradient]:
    """
    Loss and its analytic gradient w.r.t. (W_q, W_d).

    With a = W_q q and b = W_d p per candidate and s = cos(a, b):
    ∂s/∂a = b/(|a||b|) − s·a/|a|², ∂s/∂b = a/(|a||b|) − s·b/|b|²,
    and ∂L/∂W_q = Σ_c (∂L/∂s_c)(∂s_c/∂a_c) q_cᵀ (same for W_d with p_c).
    P_LM is constant.
    """
    grad_q = np.zeros((head.dim, head.dim))
    grad_d = np.zeros((head.dim, head.dim))
    total = 0.0
    before = clamp_counter.count
    for example in batch:
        if example.query_vectors is None:
            raise PreconditionError("Gradients need cached candidate embeddings.")
        q = example.query_vectors
        p = example.passage_vectors
        a = q @ head.W_q.T
        b = p @ head.W_d.T
        scores, a_norm, b_norm, valid = _cosine_rows(a, b)
        loss, d_scores = LOSS_TERMS[config.loss](
            scores, example.log_likelihoods, example.stages, config)
        total += loss

        g = np.where(valid, d_scores, 0.0)[:, None]
        safe_a = np.where(valid, a_norm, 1.0)[:, None]
        safe_b = np.where(valid, b_norm, 1.0)[:, None]
        s = scores[:, None]
        ds_da = b / (safe_a * safe_b) - s * a / safe_a ** 2
        ds_db = a / (safe_a * safe_b) - s * b / safe_b ** 2
        grad_q += (g * ds_da).T @ q
        grad_d += (g * ds_db).T @ p
    if clamp_counter.count > before:
        logger.warning("Marginal answer probability clamped.", extra={"fields": {
            "events": clamp_counter.count - before, "floor": config.clamp_floor}})
    return total, HeadGradient(grad_q=grad_q, grad_d=grad_d)


def grad_loss(
    batch: Sequence[TrainingExample], config: TrainingConfig, head: ProjectionHead
) -> HeadGradient:
    return loss_and_grad(batch, config, head)[1]


class PositiveFilterResult(BaseModel, frozen=True):
    examples: List[QAExample]
    kept_indices: List[int]
    retained: int
    dropped: int


def positive_filter(
    dataset: Sequence[QAExample],
    corpus: Corpus,
    answer_matcher: Callable[[Sequence[str], Sequence[str]], bool] = answer_in_passages,
) -> PositiveFilterResult:
    """Keep questions whose answer occurs in at least one of their pre-retrieved passages."""
    kept: List[int] = []
    for idx, example in enumerate(dataset):
        texts = [p.text for p in subcorpus_for(example, corpus)]
        if answer_matcher(example.answers, texts):
            kept.append(idx)
    result = PositiveFilterResult(
        examples=[dataset[i] for i in kept],
        kept_indices=kept,
        retained=len(kept),
        dropped=len(dataset) - len(kept),
    )
    logger.info("Positive filtering finished.", extra={"fields": {
        "retained": result.retained, "dropped": result.dropped}})
    return result


def candidate_texts(combination: Combination, question: str, corpus: Corpus) -> Tuple[str, str]:
    """(query-side text, scored passage text) for a candidate."""
    if combination.stage == "single":
        return question, corpus.get(combination.passages[0]).text
    first, second = corpus.resolve(list(combination.passages))
    return concat_query(first.text, question), second.text


def candidate_vectors(
    combinations: Sequence[Combination], question: str, corpus: Corpus, provider: EmbeddingProvider
) -> Tuple[np.ndarray, np.ndarray]:
    texts = [candidate_texts(c, question, corpus) for c in combinations]
    query_vectors = provider.embed([t[0] for t in texts], "query")
    passage_vectors = provider.embed([t[1] for t in texts], "passage")
    return query_vectors, passage_vectors


class NegativeSampler:
    """Appends other examples' winning combinations to a pool, scored for this question."""

    def __init__(
        self,
        encoder: DualEncoder,
        corpus: Corpus,
        scorer: LmScorer,
        cache: ScoreCache,
    ):
        self.encoder = encoder
        self.corpus = corpus
        self.scorer = scorer
        self.cache = cache

    def set_head(self, head: ProjectionHead) -> None:
        self.encoder = self.encoder.with_head(head)

    def augment(self, example: TrainingExample, negatives: Sequence[Combination]) -> TrainingExample:
        present = {c.passages for c in example.pool.combinations}
        fresh: List[Combination] = []
        for combination in negatives:
            if combination.passages in present:
                continue
            present.add(combination.passages)
            fresh.append(combination)
        if not fresh:
            return example

        question = example.example.question
        q_vecs, p_vecs = candidate_vectors(fresh, question, self.corpus, self.encoder.provider)
        head = self.encoder.head
        scores = _cosine_rows(q_vecs @ head.W_q.T, p_vecs @ head.W_d.T)[0]
        rescored = [
            Combination(passages=c.passages, score=float(s), stage=c.stage)
            for c, s in zip(fresh, scores)
        ]
        lm_scores = score_combinations(
            rescored, example.example, example.question_idx, self.scorer, self.cache, self.corpus)

        pool = example.pool.model_copy(update={"negatives": [*example.pool.negatives, *rescored]})
        query_vectors = example.query_vectors
        passage_vectors = example.passage_vectors
        if query_vectors is not None:
            query_vectors = np.vstack([query_vectors, q_vecs])
            passage_vectors = np.vstack([passage_vectors, p_vecs])
        return TrainingExample(
            example=example.example,
            question_idx=example.question_idx,
            pool=pool,
            lm_scores=[*example.lm_scores, *lm_scores],
            query_vectors=query_vectors,
            passage_vectors=passage_vectors,
        )


def current_winner(example: TrainingExample, head: ProjectionHead) -> Combination:
    """Best own candidate (negatives excluded) under `head`, first maximum wins."""
    own = [*example.pool.singles, *example.pool.pairs]
    scores = candidate_scores(example, head)[:len(own)]
    rescored = [
        Combination(passages=c.passages, score=float(s), stage=c.stage)
        for c, s in zip(own, scores)
    ]
    n_singles = len(example.pool.singles)
    return select_best(CandidateSet(
        question=example.pool.question, k=example.pool.k,
        singles=rescored[:n_singles], pairs=rescored[n_singles:],
        allows_self_pairs=example.pool.allows_self_pairs))


def sample_batches(
    dataset: Sequence[TrainingExample],
    batch_size: int,
    seed: int,
    sampler: NegativeSampler | None = None,
) -> Iterator[List[TrainingExample]]:
    """
    Seeded shuffle into batches; with a sampler, each example also receives the
    other batch members' winning combinations, rescored under
    the sampler's current head, as negatives.
    """
    if not dataset:
        raise PreconditionError("Cannot batch an empty dataset.")
    if batch_size > len(dataset):
        logger.warning("Batch size exceeds dataset size; using a single smaller batch.",
                       extra={"fields": {"batch_size": batch_size, "dataset_size": len(dataset)}})
        batch_size = len(dataset)
    order = derive_rng(seed, "sample_batches").permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        batch = [dataset[int(i)] for i in order[start:start + batch_size]]
        if sampler is None or len(batch) < 2:
            yield batch
            continue
        winners = [current_winner(member, sampler.encoder.head) for member in batch]
        yield [
            sampler.augment(member, [w for j, w in enumerate(winners) if j != i])
            for i, member in enumerate(batch)
        ]


class EpochRecord(BaseModel, frozen=True):
    epoch: int
    loss: float
    retained_examples: int


class TrainingResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    head: ProjectionHead
    curve: List[EpochRecord]


def _dump_batch(batch: Sequence[TrainingExample], config: TrainingConfig, head: ProjectionHead) -> dict:
    return {
        "loss": config.loss,
        "question_idx": [ex.question_idx for ex in batch],
        "scores": [candidate_scores(ex, head).tolist() for ex in batch],
        "log_likelihoods": [ex.log_likelihoods.tolist() for ex in batch],
    }


def train_loop(
    dataset: Sequence[TrainingExample],
    config: TrainingConfig,
    head: ProjectionHead,
    sampler: NegativeSampler | None = None,
) -> TrainingResult:
    """
    Plain gradient descent on the selected loss.

    Each step moves the head by learning_rate × the batch-mean gradient. The
    epoch loss is the mean per-example loss over the epoch's batches, each
    measured before its update.
    """
    if not dataset:
        raise PreconditionError("Training needs at least one example.")
    curve: List[EpochRecord] = []
    for epoch in range(1, config.epochs + 1):
        total, seen = 0.0, 0
        for batch in sample_batches(
            dataset, config.batch_size, config.seed + epoch,
            sampler if config.in_batch_negatives else None,
        ):
            loss, grad = loss_and_grad(batch, config, head)
            if not np.isfinite(loss) or not grad.is_finite():
                logger.error("Non-finite loss; aborting training.",
                             extra={"fields": {"epoch": epoch, **_dump_batch(batch, config, head)}})
                raise TrainingDivergedError(f"Non-finite loss in epoch {epoch}")
            total += loss
            seen += len(batch)
            head = head.step(grad.grad_q / len(batch), grad.grad_d / len(batch),
                             config.learning_rate)
            if sampler is not None:
                sampler.set_head(head)
        record = EpochRecord(epoch=epoch, loss=total / seen, retained_examples=len(dataset))
        curve.append(record)
        logger.info(f"Epoch {epoch} finished.", extra={"fields": record.model_dump()})
    return TrainingResult(head=head, curve=curve)


def build_training_example(
    example: QAExample,
    question_idx: int,
    pool: CandidateSet,
    corpus: Corpus,
    provider: EmbeddingProvider,
    scorer: LmScorer,
    cache: ScoreCache,
    workers: int = CONSTS.lm.workers,
) -> TrainingExample:
    scored = score_pool(pool, example, question_idx, scorer, cache, corpus, workers)
    query_vectors, passage_vectors = candidate_vectors(
        pool.combinations, example.question, corpus, provider)
    return TrainingExample(
        example=example,
        question_idx=question_idx,
        pool=pool,
        lm_scores=[score for _, score in scored],
        query_vectors=query_vectors,
        passage_vectors=passage_vectors,
    )


def build_training_set(
    dataset: Sequence[QAExample],
    corpus: Corpus,
    encoder: DualEncoder,
    scorer: LmScorer,
    cache: ScoreCache,
    retrieval_config: RetrievalConfig = CONSTS.retrieval,
    training_config: TrainingConfig = CONSTS.training,
    workers: int = CONSTS.lm.workers,
) -> Tuple[List[TrainingExample], PositiveFilterResult]:
    """Positive filtering, retrieval with the current head, then LM scoring of every pool."""
    if training_config.positive_filter:
        filtered = positive_filter(dataset, corpus)
    else:
        filtered = PositiveFilterResult(
            examples=list(dataset), kept_indices=list(range(len(dataset))),
            retained=len(dataset), dropped=0)
    examples: List[TrainingExample] = []
    for idx, example in zip(filtered.kept_indices, filtered.examples):
        _, pool = retrieve(example.question, subcorpus_for(example, corpus), retrieval_config, encoder)
        examples.append(build_training_example(
            example, idx, pool, corpus, encoder.provider, scorer, cache, workers))
    logger.info(f"Built {len(examples)} training examples.")
    return examples, filtered


def write_loss_curve(curve: Sequence[EpochRecord], path: Path | str) -> None:
    df = pl.DataFrame(
        [record.model_dump() for record in curve],
        schema={"epoch": pl.Int64, "loss": pl.Float64, "retained_examples": pl.Int64},
    )
    write_csv_atomic(df, path)
