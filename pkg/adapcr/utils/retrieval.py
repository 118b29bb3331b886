from pathlib import Path
from typing import List, Literal, Sequence, Tuple

import numpy as np
import polars as pl
from pydantic import BaseModel, Field, field_validator, model_validator

from .corpus import Corpus, Passage, QAExample
from .embed import DualEncoder, concat_query
from .exceptions import PreconditionError
from .logger import logger
from .models import CONSTS, RetrievalConfig
from .storage import write_ndjson_atomic


Stage = Literal["single", "pair"]


class Combination(BaseModel, frozen=True):
    passages: Tuple[str, ...]
    score: float
    stage: Stage

    @field_validator("score")
    def finite_score(cls, v):
        if not np.isfinite(v):
            raise ValueError("combination score must be finite")
        return v

    @model_validator(mode="after")
    def stage_matches_length(self):
        expected = {1: "single", 2: "pair"}.get(len(self.passages))
        if expected is None:
            raise ValueError("a combination holds one or two passages")
        if self.stage != expected:
            raise ValueError(f"stage {self.stage!r} inconsistent with {len(self.passages)} passages")
        return self

    @property
    def is_self_pair(self) -> bool:
        return len(self.passages) == 2 and self.passages[0] == self.passages[1]


class CandidateSet(BaseModel, frozen=True):
    """Scored pool D = D1 ∪ D2 for one question, in canonical order."""

    question: str
    k: int = Field(gt=0)
    singles: List[Combination]
    pairs: List[Combination] = Field(default_factory=list)
    negatives: List[Combination] = Field(default_factory=list)
    allows_self_pairs: bool = False

    @model_validator(mode="after")
    def sized_by_k(self):
        if len(self.singles) > self.k:
            raise ValueError(f"{len(self.singles)} singles exceed k={self.k}")
        if len(self.pairs) > self.k * self.k:
            raise ValueError(f"{len(self.pairs)} pairs exceed k*k={self.k * self.k}")
        if any(c.stage != "single" for c in self.singles):
            raise ValueError("singles list holds a pair")
        if any(c.stage != "pair" for c in self.pairs):
            raise ValueError("pairs list holds a single")
        if not self.allows_self_pairs and any(c.is_self_pair for c in self.pairs):
            raise ValueError("self pairs are only kept when dedupe_self_pairs is off")
        return self

    @property
    def combinations(self) -> List[Combination]:
        return [*self.singles, *self.pairs, *self.negatives]

    @property
    def scores(self) -> np.ndarray:
        return np.array([c.score for c in self.combinations], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.singles) + len(self.pairs) + len(self.negatives)


def cosine_matrix(queries: np.ndarray, passages: np.ndarray) -> np.ndarray:
    """Row-wise cosine; any zero vector scores 0."""
    q_norm = np.linalg.norm(queries, axis=1, keepdims=True)
    p_norm = np.linalg.norm(passages, axis=1, keepdims=True)
    q_safe = np.divide(queries, q_norm, out=np.zeros_like(queries), where=q_norm > 0)
    p_safe = np.divide(passages, p_norm, out=np.zeros_like(passages), where=p_norm > 0)
    return np.clip(q_safe @ p_safe.T, -1.0, 1.0)


def score_single(query_vector: np.ndarray, passage_vector: np.ndarray) -> float:
    """cos(E_q(x), E_d(d)); a zero vector on either side is degenerate and scores 0."""
    if query_vector.shape != passage_vector.shape:
        raise PreconditionError(
            f"Dimension mismatch: {query_vector.shape} vs {passage_vector.shape}")
    q_norm = np.linalg.norm(query_vector)
    p_norm = np.linalg.norm(passage_vector)
    if q_norm == 0 or p_norm == 0:
        logger.debug("Degenerate cosine on a zero vector.")
        return 0.0
    return float(np.clip(query_vector @ passage_vector / (q_norm * p_norm), -1.0, 1.0))


def _rank(scores: np.ndarray, ids: Sequence[str], limit: int) -> List[int]:
    """Indices of the `limit` best scores; ties by ascending id."""
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return order[:limit]


def first_stage(
    question: str,
    subcorpus: Sequence[Passage],
    config: RetrievalConfig,
    encoder: DualEncoder,
    passage_vectors: np.ndarray | None = None,
) -> List[Combination]:
    """D1: top-k single passages by cosine against the question."""
    if not subcorpus:
        raise PreconditionError("First stage needs a non-empty sub-corpus.")
    if passage_vectors is None:
        passage_vectors = encoder.encode_passages([p.text for p in subcorpus])
    query_vector = encoder.encode_queries([question])
    scores = cosine_matrix(query_vector, passage_vectors)[0]
    ids = [p.id for p in subcorpus]
    return [
        Combination(passages=(ids[i],), score=float(scores[i]), stage="single")
        for i in _rank(scores, ids, config.k)
    ]


def second_stage(
    question: str,
    d1: Sequence[Combination],
    subcorpus: Sequence[Passage],
    config: RetrievalConfig,
    encoder: DualEncoder,
    passage_vectors: np.ndarray | None = None,
) -> List[Combination]:
    """D2: for each first-stage passage d_i, the top-k partners for the query d_i ⊕ x."""
    if not d1:
        return []
    if passage_vectors is None:
        passage_vectors = encoder.encode_passages([p.text for p in subcorpus])
    by_id = {p.id: p for p in subcorpus}
    ids = [p.id for p in subcorpus]
    concat_vectors = encoder.encode_queries(
        [concat_query(by_id[c.passages[0]].text, question) for c in d1])
    scores = cosine_matrix(concat_vectors, passage_vectors)

    pairs: List[Combination] = []
    for row, single in enumerate(d1):
        head_id = single.passages[0]
        candidates = [
            i for i in _rank(scores[row], ids, len(ids))
            if not (config.dedupe_self_pairs and ids[i] == head_id)
        ]
        for i in candidates[:config.k]:
            pairs.append(Combination(
                passages=(head_id, ids[i]), score=float(scores[row, i]), stage="pair"))
    return pairs


def assemble_candidates(
    question: str,
    d1: Sequence[Combination],
    d2: Sequence[Combination],
    k: int,
    allows_self_pairs: bool = False,
) -> CandidateSet:
    """D = D1 ∪ D2, singles by rank then pairs by (i, j) rank."""
    return CandidateSet(
        question=question, k=k, singles=list(d1), pairs=list(d2),
        allows_self_pairs=allows_self_pairs)


def select_best(candidates: CandidateSet) -> Combination:
    """Arg-max score; ties go to the earliest candidate in canonical order (singles first)."""
    combinations = candidates.combinations
    if not combinations:
        raise PreconditionError("Cannot select from an empty candidate set.")
    best = combinations[0]
    for combination in combinations[1:]:
        if combination.score > best.score:
            best = combination
    return best


def retrieve(
    question: str,
    subcorpus: Sequence[Passage],
    config: RetrievalConfig,
    encoder: DualEncoder,
) -> Tuple[Combination, CandidateSet]:
    """Both stages, then selection. Returns the winner and the scored pool."""
    passage_vectors = encoder.encode_passages([p.text for p in subcorpus])
    d1 = first_stage(question, subcorpus, config, encoder, passage_vectors)
    d2 = second_stage(question, d1, subcorpus, config, encoder, passage_vectors)
    pool = assemble_candidates(
        question, d1, d2, config.k, allows_self_pairs=not config.dedupe_self_pairs)
    return select_best(pool), pool


def subcorpus_for(example: QAExample, corpus: Corpus) -> List[Passage]:
    return corpus.resolve(example.subcorpus_ids)


def retrieve_dataset(
    dataset: Sequence[QAExample],
    corpus: Corpus,
    encoder: DualEncoder,
    config: RetrievalConfig = CONSTS.retrieval,
) -> List[Tuple[Combination, CandidateSet]]:
    """Run `retrieve` over every question; each example must carry its sub-corpus ids."""
    results = []
    for idx, example in enumerate(dataset):
        subcorpus = subcorpus_for(example, corpus)
        if not subcorpus:
            raise PreconditionError(f"Question {idx} has an empty sub-corpus.")
        results.append(retrieve(example.question, subcorpus, config, encoder))
    logger.info(f"Retrieved combinations for {len(results)} questions.")
    return results


RETRIEVAL_SCHEMA = {
    "question_idx": pl.Int64,
    "winner": pl.Struct({"passage_ids": pl.List(pl.Utf8), "score": pl.Float64}),
    "pool_size": pl.Int64,
}


def write_retrievals(results: Sequence[Tuple[Combination, CandidateSet]], path: Path | str) -> None:
    """One JSONL row per question: {"question_idx", "winner": {"passage_ids", "score"}, "pool_size"}."""
    df = pl.DataFrame(
        {
            "question_idx": list(range(len(results))),
            "winner": [
                {"passage_ids": list(winner.passages), "score": winner.score}
                for winner, _ in results
            ],
            "pool_size": [len(pool) for _, pool in results],
        },
        schema=RETRIEVAL_SCHEMA,
    )
    write_ndjson_atomic(df, path)
