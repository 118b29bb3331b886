import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Protocol, Sequence, Tuple

import httpx
import numpy as np
import polars as pl
from pydantic import BaseModel, Field, ValidationError, field_validator

from .corpus import Corpus, QAExample, tokenize
from .exceptions import ContractError
from .logger import logger
from .models import CONSTS, LmConfig
from .retrieval import CandidateSet, Combination
from .storage import read_ndjson, write_ndjson_atomic
from .transport import post_json_with_retry


CACHE_SCHEMA = {
    "passage_ids": pl.List(pl.Utf8),
    "question_idx": pl.Int64,
    "answer": pl.Utf8,
    "log_likelihood": pl.Float64,
    "token_count": pl.Int64,
}

CacheKey = Tuple[Tuple[str, ...], int, str]


class LmScore(BaseModel, frozen=True):
    log_likelihood: float = Field(le=0)
    token_count: int = Field(gt=0)

    @field_validator("log_likelihood")
    def finite(cls, v):
        if not np.isfinite(v):
            raise ValueError("log_likelihood must be finite")
        return v

    @property
    def probability(self) -> float:
        return float(np.exp(self.log_likelihood))


class ScoreRequest(BaseModel, frozen=True):
    context_passages: List[str] = Field(default_factory=list)
    question: str
    answer: str

    @field_validator("answer")
    def answer_not_empty(cls, v):
        if not v.strip():
            raise ValueError("answer must be non-empty")
        return v


class LmScorer(Protocol):
    calls: int

    def score(self, request: ScoreRequest) -> LmScore:
        ...


def token_log_probs(request: ScoreRequest, epsilon: float = CONSTS.lm.epsilon) -> np.ndarray:
    """Per-answer-token log p_i with p_i = ε + (1 − 2ε)·covered_i."""
    seen = set(tokenize(" ".join([*request.context_passages, request.question])))
    answer_tokens = tokenize(request.answer)
    covered = np.array([token in seen for token in answer_tokens], dtype=np.float64)
    return np.log(epsilon + (1.0 - 2.0 * epsilon) * covered)


def mock_lm_score(request: ScoreRequest, epsilon: float = CONSTS.lm.epsilon) -> LmScore:
    """Token-coverage likelihood: a product of per-token probabilities, summed in log space."""
    log_probs = token_log_probs(request, epsilon)
    if log_probs.size == 0:
        raise ContractError(f"Answer {request.answer!r} has no scorable tokens")
    return LmScore(log_likelihood=float(np.sum(log_probs)), token_count=int(log_probs.size))


class RemoteScoreResponse(BaseModel):
    log_likelihood: float
    token_count: int


def remote_lm_score(
    endpoint: str,
    request: ScoreRequest,
    client: httpx.Client | None = None,
    attempts: int = CONSTS.lm.attempts,
    backoff_seconds: float = CONSTS.lm.backoff_seconds,
    timeout: float = CONSTS.lm.timeout,
) -> LmScore:
    """
    Fetch P_LM(y | [d; x]) from a frozen external scorer.

    Params:
    -------
    endpoint: str
        Base URL; the request goes to {endpoint}/score.
    request: ScoreRequest
        Context passages, question and answer.
    client: httpx.Client | None
        Shared client; a new one with `timeout` is created when omitted.
    attempts: int
        Transport retries before a RetryableError.
    backoff_seconds: float
        Initial backoff, doubled per failed attempt.

    Returns:
    --------
    LmScore
        Validated remote log-likelihood.
    """
    owned = client is None
    client = client or httpx.Client(timeout=timeout)
    try:
        body = post_json_with_retry(
            client,
            f"{endpoint.rstrip('/')}/score",
            {
                "context": list(request.context_passages),
                "question": request.question,
                "answer": request.answer,
            },
            attempts=attempts,
            backoff_seconds=backoff_seconds,
        )
    finally:
        if owned:
            client.close()
    try:
        response = RemoteScoreResponse.model_validate(body)
        return LmScore(log_likelihood=response.log_likelihood, token_count=response.token_count)
    except ValidationError as e:
        raise ContractError(f"Malformed score response {body}: {e.errors()[0]['msg']}")


class MockLmScorer:
    def __init__(self, epsilon: float = CONSTS.lm.epsilon):
        self.epsilon = epsilon
        self.calls = 0
        self._lock = threading.Lock()

    def score(self, request: ScoreRequest) -> LmScore:
        with self._lock:
            self.calls += 1
        return mock_lm_score(request, self.epsilon)


class RemoteLmScorer:
    def __init__(
        self,
        endpoint: str,
        client: httpx.Client | None = None,
        attempts: int = CONSTS.lm.attempts,
        backoff_seconds: float = CONSTS.lm.backoff_seconds,
        timeout: float = CONSTS.lm.timeout,
    ):
        self.endpoint = endpoint
        self.client = client or httpx.Client(timeout=timeout)
        self.attempts = attempts
        self.backoff_seconds = backoff_seconds
        self.calls = 0
        self._lock = threading.Lock()

    def score(self, request: ScoreRequest) -> LmScore:
        with self._lock:
            self.calls += 1
        return remote_lm_score(
            self.endpoint, request, self.client, self.attempts, self.backoff_seconds)


def build_scorer(config: LmConfig = CONSTS.lm, client: httpx.Client | None = None) -> LmScorer:
    if config.kind == "remote":
        return RemoteLmScorer(
            config.endpoint, client=client, attempts=config.attempts,
            backoff_seconds=config.backoff_seconds, timeout=config.timeout)
    return MockLmScorer(config.epsilon)


class ScoreCache:
    """(combination ids, question idx, answer) → LmScore, optionally backed by a JSONL file."""

    def __init__(self, path: Path | str | None = None):
        self.path = Path(path) if path is not None else None
        self._entries: Dict[CacheKey, LmScore] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: CacheKey) -> bool:
        return key in self._entries

    def get(self, key: CacheKey) -> LmScore | None:
        return self._entries.get(key)

    def put(self, key: CacheKey, score: LmScore) -> None:
        with self._lock:
            self._entries[key] = score

    def put_many(self, items: Dict[CacheKey, LmScore]) -> None:
        with self._lock:
            self._entries.update(items)

    def entries(self) -> Dict[CacheKey, LmScore]:
        return dict(self._entries)

    def to_frame(self) -> pl.DataFrame:
        keys = sorted(self._entries)
        return pl.DataFrame(
            {
                "passage_ids": [list(key[0]) for key in keys],
                "question_idx": [key[1] for key in keys],
                "answer": [key[2] for key in keys],
                "log_likelihood": [self._entries[key].log_likelihood for key in keys],
                "token_count": [self._entries[key].token_count for key in keys],
            },
            schema=CACHE_SCHEMA,
        )

    def save(self, path: Path | str | None = None) -> None:
        path = path or self.path
        if path is None:
            raise ContractError("Score cache has no backing file.")
        with self._lock:
            frame = self.to_frame()
        write_ndjson_atomic(frame, path)

    @classmethod
    def load(cls, path: Path | str) -> "ScoreCache":
        cache = cls(path)
        if not Path(path).exists():
            logger.info(f"No score cache at {path}; starting cold.")
            return cache
        frame = read_ndjson(path, CACHE_SCHEMA)
        for row in frame.iter_rows(named=True):
            key = (tuple(row["passage_ids"]), row["question_idx"], row["answer"])
            cache._entries[key] = LmScore(
                log_likelihood=row["log_likelihood"], token_count=row["token_count"])
        logger.info(f"Loaded {len(cache)} cached LM scores from {path}.")
        return cache


def cache_key(passage_ids: Sequence[str], question_idx: int, answer: str) -> CacheKey:
    return (tuple(passage_ids), int(question_idx), answer)


def score_combinations(
    combinations: Sequence[Combination | None],
    example: QAExample,
    question_idx: int,
    scorer: LmScorer,
    cache: ScoreCache,
    corpus: Corpus,
    workers: int = CONSTS.lm.workers,
) -> List[LmScore]:
    """
    One LmScore per combination, cache first. `None` stands for the empty context.

    All missing scores are computed before the cache is touched, so a scorer
    failure leaves the cache exactly as it was.
    """
    answer = example.answers[0]
    keys = [
        cache_key(c.passages if c is not None else (), question_idx, answer)
        for c in combinations
    ]
    missing = list(dict.fromkeys(key for key in keys if key not in cache))
    if missing:
        requests = [
            ScoreRequest(
                context_passages=[corpus.get(pid).text for pid in key[0]],
                question=example.question,
                answer=answer,
            )
            for key in missing
        ]
        if workers > 1 and len(requests) > 1:
            with ThreadPoolExecutor(max_workers=workers) as executor:
                fresh = list(executor.map(scorer.score, requests))
        else:
            fresh = [scorer.score(request) for request in requests]
        cache.put_many(dict(zip(missing, fresh)))
    return [cache.get(key) for key in keys]


def score_pool(
    candidates: CandidateSet,
    example: QAExample,
    question_idx: int,
    scorer: LmScorer,
    cache: ScoreCache,
    corpus: Corpus,
    workers: int = CONSTS.lm.workers,
) -> List[Tuple[Combination, LmScore]]:
    """Score every candidate of the pool; fails as a whole if any scorer call fails."""
    combinations = candidates.combinations
    scores = score_combinations(
        combinations, example, question_idx, scorer, cache, corpus, workers)
    return list(zip(combinations, scores))
