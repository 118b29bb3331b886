import unicodedata
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterator, List

import numpy as np
import polars as pl
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    computed_field,
    field_validator,
    model_validator,
)
from rank_bm25 import BM25Okapi

from .exceptions import ConflictError, ParseError, PassageLookupError, PreconditionError
from .logger import logger
from .models import CONSTS
from .storage import iter_lines, read_ndjson, write_ndjson_atomic


SUBCORPUS_SCHEMA = {"question_idx": pl.Int64, "passage_ids": pl.List(pl.Utf8)}


def tokenize(text: str) -> List[str]:
    """Lowercase, drop Unicode punctuation, split on whitespace."""
    stripped = "".join(
        ch for ch in text.lower()
        if not unicodedata.category(ch).startswith("P")
    )
    return stripped.split()


class Passage(BaseModel, frozen=True):
    id: str
    text: str

    @field_validator("text")
    def text_not_blank(cls, v):
        if not v.strip():
            raise ValueError("passage text is empty after trimming")
        return v

    @computed_field
    @property
    def token_count(self) -> int:
        return len(tokenize(self.text))


class QAExample(BaseModel, frozen=True):
    question: str
    answers: List[str] = Field(min_length=1)
    subcorpus_ids: List[str] = Field(default_factory=list, max_length=100)

    @field_validator("answers")
    def answers_have_tokens(cls, v):
        if any(not tokenize(answer) for answer in v):
            raise ValueError("every answer must contain at least one token")
        return v

    @field_validator("subcorpus_ids")
    def no_duplicate_ids(cls, v):
        if len(set(v)) != len(v):
            raise ValueError("subcorpus_ids contains duplicates")
        return v


class Corpus(BaseModel, frozen=True):
    """Passages keyed by id, in ingestion order."""

    passages: Dict[str, Passage] = Field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.passages)

    def __contains__(self, passage_id: str) -> bool:
        return passage_id in self.passages

    def __iter__(self) -> Iterator[Passage]:
        return iter(self.passages.values())

    def get(self, passage_id: str) -> Passage:
        try:
            return self.passages[passage_id]
        except KeyError:
            raise PassageLookupError(f"Unknown passage id: {passage_id}")

    def resolve(self, passage_ids: List[str]) -> List[Passage]:
        return [self.get(pid) for pid in passage_ids]

    @classmethod
    def from_passages(cls, passages: List[Passage]) -> "Corpus":
        indexed: Dict[str, Passage] = {}
        for passage in passages:
            if passage.id in indexed:
                raise ConflictError(f"Duplicate passage id: {passage.id}", passage.id)
            indexed[passage.id] = passage
        return cls(passages=indexed)


def ingest_corpus(path: Path | str) -> Corpus:
    """
    Load a JSONL corpus of {"id", "text"} objects.

    Params:
    -------
    path: Path | str
        Corpus file, one JSON object per line. Blank lines are skipped.

    Returns:
    --------
    Corpus
        Passages indexed by id.
    """
    logger.info(f"Loading corpus: {path}")
    passages: Dict[str, Passage] = {}
    for line_number, line in iter_lines(path):
        try:
            passage = Passage.model_validate_json(line)
        except ValidationError as e:
            raise ParseError(
                f"Malformed corpus line {line_number}: {e.errors()[0]['msg']}",
                line_number=line_number)
        if passage.id in passages:
            raise ConflictError(f"Duplicate passage id: {passage.id}", passage.id)
        passages[passage.id] = passage
    logger.info(f"Loaded {len(passages)} passages.")
    return Corpus(passages=passages)


def ingest_dataset(path: Path | str, corpus: Corpus | None = None) -> List[QAExample]:
    """Load a JSONL dataset of {"question", "answers"} objects, optionally checking sub-corpus ids."""
    logger.info(f"Loading dataset: {path}")
    dataset: List[QAExample] = []
    for line_number, line in iter_lines(path):
        try:
            example = QAExample.model_validate_json(line)
        except ValidationError as e:
            raise ParseError(
                f"Malformed dataset line {line_number}: {e.errors()[0]['msg']}",
                line_number=line_number)
        if corpus is not None:
            missing = [pid for pid in example.subcorpus_ids if pid not in corpus]
            if missing:
                raise PassageLookupError(
                    f"Dataset line {line_number} references unknown passage ids: {missing[:5]}")
        dataset.append(example)
    logger.info(f"Loaded {len(dataset)} questions.")
    return dataset


class LuceneBM25(BM25Okapi):
    """Okapi BM25 scored with the Lucene idf log(1 + (N − df + 0.5) / (df + 0.5)), never negative."""

    def _calc_idf(self, nd: Dict[str, int]) -> None:
        self.doc_freqs_by_term = dict(nd)
        for word, freq in nd.items():
            self.idf[word] = float(np.log(1.0 + (self.corpus_size - freq + 0.5) / (freq + 0.5)))


class Bm25Index(BaseModel):
    """Validated view over a `LuceneBM25` engine; passage ids follow the engine's row order."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    engine: LuceneBM25
    passage_ids: List[str]
    k1: float = Field(gt=0)
    b: float = Field(ge=0, le=1)

    @model_validator(mode="after")
    def consistent_counts(self):
        if self.total_docs != len(self.passage_ids) or len(set(self.passage_ids)) != self.total_docs:
            raise ValueError("total_docs must equal the number of indexed passages")
        if self.avg_doc_length <= 0:
            raise ValueError("avg_doc_length must be positive")
        mean_length = sum(self.engine.doc_len) / self.total_docs
        if abs(mean_length - self.avg_doc_length) > 1e-9:
            raise ValueError("avg_doc_length must equal the mean document length")
        return self

    @property
    def total_docs(self) -> int:
        return self.engine.corpus_size

    @property
    def avg_doc_length(self) -> float:
        return float(self.engine.avgdl)

    @property
    def doc_lengths(self) -> Dict[str, int]:
        return dict(zip(self.passage_ids, self.engine.doc_len))

    @property
    def doc_frequencies(self) -> Dict[str, int]:
        return dict(self.engine.doc_freqs_by_term)

    def position(self, passage_id: str) -> int:
        try:
            return self.positions[passage_id]
        except KeyError:
            raise PassageLookupError(f"Passage not indexed: {passage_id}")

    @cached_property
    def positions(self) -> Dict[str, int]:
        return {pid: i for i, pid in enumerate(self.passage_ids)}

    def idf(self, term: str) -> float:
        if term in self.engine.idf:
            return self.engine.idf[term]
        return float(np.log(1.0 + (self.total_docs + 0.5) / 0.5))


def build_index(
    corpus: Corpus,
    k1: float = CONSTS.corpus.k1,
    b: float = CONSTS.corpus.b,
) -> Bm25Index:
    """Tokenize every passage once and hand the term lists to rank_bm25."""
    if len(corpus) == 0:
        raise PreconditionError("Cannot index an empty corpus.")
    passage_ids = [passage.id for passage in corpus]
    tokenized = [tokenize(passage.text) for passage in corpus]
    if not any(tokenized):
        raise PreconditionError("Corpus has no indexable terms.")
    engine = LuceneBM25(tokenized, k1=k1, b=b)
    logger.info("BM25 index built.", extra={"fields": {
        "passages": len(passage_ids), "vocabulary": len(engine.idf), "k1": k1, "b": b}})
    return Bm25Index(engine=engine, passage_ids=passage_ids, k1=k1, b=b)


def bm25_score(index: Bm25Index, query_terms: List[str], passage_id: str) -> float:
    """Okapi BM25 summed per query-term occurrence."""
    position = index.position(passage_id)
    return float(index.engine.get_batch_scores(list(query_terms), [position])[0])


def preretrieve_subcorpus(
    index: Bm25Index,
    question: str,
    limit: int = CONSTS.corpus.subcorpus_limit,
) -> List[str]:
    """Top-`limit` passage ids by descending BM25; ties by ascending id."""
    scores = index.engine.get_scores(tokenize(question))
    ranked = sorted(
        zip((float(s) for s in scores), index.passage_ids),
        key=lambda item: (-item[0], item[1]),
    )
    return [pid for _, pid in ranked[:limit]]


def preretrieve_dataset(
    index: Bm25Index,
    dataset: List[QAExample],
    limit: int = CONSTS.corpus.subcorpus_limit,
) -> List[QAExample]:
    logger.info(f"Pre-retrieving top {limit} passages for {len(dataset)} questions...")
    return [
        example.model_copy(update={
            "subcorpus_ids": preretrieve_subcorpus(index, example.question, limit)})
        for example in dataset
    ]


def write_subcorpus_cache(dataset: List[QAExample], path: Path | str) -> None:
    df = pl.DataFrame(
        {
            "question_idx": list(range(len(dataset))),
            "passage_ids": [example.subcorpus_ids for example in dataset],
        },
        schema=SUBCORPUS_SCHEMA,
    )
    write_ndjson_atomic(df, path)


def attach_subcorpus_cache(
    dataset: List[QAExample], path: Path | str, corpus: Corpus | None = None
) -> List[QAExample]:
    """Fill each example's subcorpus_ids from a cache file written by `write_subcorpus_cache`."""
    df = read_ndjson(path, SUBCORPUS_SCHEMA)
    by_idx = {row["question_idx"]: row["passage_ids"] for row in df.iter_rows(named=True)}
    attached = []
    for idx, example in enumerate(dataset):
        if idx not in by_idx:
            raise PassageLookupError(f"Sub-corpus cache has no entry for question {idx}")
        ids = list(by_idx[idx])
        if corpus is not None:
            corpus.resolve(ids)
        attached.append(QAExample(
            question=example.question, answers=example.answers, subcorpus_ids=ids))
    return attached
