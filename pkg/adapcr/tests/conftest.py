import json

import numpy as np
import pytest

from utils.corpus import Corpus, Passage, QAExample
from utils.embed import DualEncoder, HashEmbeddingProvider, ProjectionHead
from utils.lmscore import LmScore
from utils.retrieval import CandidateSet, Combination
from utils.train import TrainingExample


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(row) + "\n" for row in rows), encoding="utf-8")
    return path


def make_example(scores, log_likelihoods, vectors=None):
    """Singles-only training example; `vectors` is (query_vectors, passage_vectors)."""
    n = len(scores)
    singles = [
        Combination(passages=(f"p{i}",), score=float(s), stage="single")
        for i, s in enumerate(scores)
    ]
    query_vectors, passage_vectors = vectors if vectors is not None else (None, None)
    return TrainingExample(
        example=QAExample(question="q", answers=["a"]),
        pool=CandidateSet(question="q", k=n, singles=singles),
        lm_scores=[LmScore(log_likelihood=float(ll), token_count=1) for ll in log_likelihoods],
        query_vectors=query_vectors,
        passage_vectors=passage_vectors,
    )


def random_corpus(rng, n_passages, vocab=200, length=(5, 12)):
    words = [f"t{i:04d}" for i in range(vocab)]
    passages = []
    for i in range(n_passages):
        size = int(rng.integers(length[0], length[1] + 1))
        tokens = [words[int(j)] for j in rng.choice(vocab, size=size, replace=False)]
        passages.append(Passage(id=f"d{i:03d}", text=" ".join(tokens)))
    return Corpus.from_passages(passages), words


@pytest.fixture
def provider():
    return HashEmbeddingProvider(dim=64, seed=0)


@pytest.fixture
def encoder(provider):
    return DualEncoder(provider, ProjectionHead.identity(provider.dim))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_corpus():
    return Corpus.from_passages([
        Passage(id="p1", text="apple banana"),
        Passage(id="p2", text="apple cherry cherry"),
        Passage(id="p3", text="date"),
    ])
