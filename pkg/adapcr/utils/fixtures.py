import math
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import polars as pl
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .corpus import Corpus, Passage, QAExample, build_index, preretrieve_subcorpus
from .embed import DualEncoder, ProjectionHead, build_provider
from .exceptions import ConfigError, PassageLookupError
from .logger import logger
from .models import CONSTS, CorpusConfig, EmbeddingProviderSpec, FixtureSpec
from .retrieval import retrieve
from .seeding import derive_rng
from .storage import write_ndjson_atomic


TRUTH_SCHEMA = {
    "question_idx": pl.Int64,
    "passage_ids": pl.List(pl.Utf8),
    "answerable": pl.Boolean,
}

QUESTION_TOKENS = 3
BRIDGE_TOKENS = 5
ANSWER_TOKENS = 2
NOISE_LENGTH = (6, 10)
PASSAGES_PER_GENERIC = 50

# Gold passages each question occupies, per kind.
SLOTS = {"single_hop": 1, "redundant": 4, "two_hop": 2}
PRIVATE_TOKENS = {
    "single_hop": QUESTION_TOKENS + ANSWER_TOKENS,
    "redundant": QUESTION_TOKENS + ANSWER_TOKENS,
    "two_hop": QUESTION_TOKENS + BRIDGE_TOKENS + ANSWER_TOKENS,
}


class PlantedTruth(BaseModel, frozen=True):
    """Gold passage ids per question: one for single-hop kinds, ⟨A, B⟩ for two-hop."""

    gold: Dict[int, List[str]]
    unanswerable: List[int] = Field(default_factory=list)
    verified: Dict[int, bool] = Field(default_factory=dict)

    @field_validator("gold")
    def one_or_two_ids(cls, v):
        for idx, ids in v.items():
            if not 1 <= len(ids) <= 2:
                raise ValueError(f"question {idx} must have 1 or 2 gold ids, got {len(ids)}")
        return v

    def check(self, corpus: Corpus) -> None:
        for idx, ids in self.gold.items():
            missing = [pid for pid in ids if pid not in corpus]
            if missing:
                raise PassageLookupError(f"Planted ids for question {idx} not in corpus: {missing}")

    @property
    def verified_fraction(self) -> float:
        if not self.verified:
            return 1.0
        return sum(self.verified.values()) / len(self.verified)


class FixtureBundle(BaseModel):
    model_config = ConfigDict(frozen=True)

    corpus: Corpus
    dataset: List[QAExample]
    truth: PlantedTruth


class _Vocabulary:
    """Synthetic word list split into generic, noise and private (one-use) tokens."""

    def __init__(self, rng: np.random.Generator, vocab_size: int, n_generic: int, n_noise: int):
        words = [f"w{int(i):05d}" for i in rng.permutation(vocab_size)]
        self.generic = words[:n_generic]
        self.noise = words[n_generic:n_generic + n_noise]
        self._private = words[n_generic + n_noise:]
        self._cursor = 0

    def private(self, n: int) -> List[str]:
        if self._cursor + n > len(self._private):
            raise ConfigError("vocab_size too small for the requested fixture; raise vocab_size")
        tokens = self._private[self._cursor:self._cursor + n]
        self._cursor += n
        return tokens

    @property
    def remaining(self) -> int:
        return len(self._private) - self._cursor


class _Plant(BaseModel, frozen=True):
    question: str
    answer: str
    texts: Dict[str, str]
    gold: List[str]


def _text(rng: np.random.Generator, tokens: List[str]) -> str:
    return " ".join(tokens[int(i)] for i in rng.permutation(len(tokens)))


def _noise_tokens(rng: np.random.Generator, vocab: _Vocabulary, n: int, exclude: List[str] = ()) -> List[str]:
    pool = [w for w in vocab.noise if w not in exclude]
    return [pool[int(i)] for i in rng.choice(len(pool), size=n, replace=False)]


def _plant_single_hop(rng, vocab, slots, answerable) -> _Plant:
    q = vocab.private(QUESTION_TOKENS)
    ans = vocab.private(ANSWER_TOKENS)
    g = vocab.generic[int(rng.integers(len(vocab.generic)))]
    gold = [*q, *(ans if answerable else []), *_noise_tokens(rng, vocab, 3)]
    return _Plant(
        question=" ".join([*q, g]),
        answer=" ".join(ans),
        texts={slots[0]: _text(rng, gold)},
        gold=[slots[0]],
    )


def _plant_redundant(rng, vocab, slots, answerable) -> _Plant:
    q = vocab.private(QUESTION_TOKENS)
    ans = vocab.private(ANSWER_TOKENS)
    g = vocab.generic[int(rng.integers(len(vocab.generic)))]
    filler = _noise_tokens(rng, vocab, 4)
    popular = [*q, *filler]
    swaps = _noise_tokens(rng, vocab, 2, exclude=filler)
    duplicates = []
    for swap in swaps:
        copy = list(popular)
        copy[QUESTION_TOKENS + int(rng.integers(len(filler)))] = swap
        duplicates.append(copy)
    gold = [*q[:2], *(ans if answerable else []), *_noise_tokens(rng, vocab, 2)]
    return _Plant(
        question=" ".join([*q, g]),
        answer=" ".join(ans),
        texts={
            slots[0]: _text(rng, gold),
            slots[1]: _text(rng, popular),
            slots[2]: _text(rng, duplicates[0]),
            slots[3]: _text(rng, duplicates[1]),
        },
        gold=[slots[0]],
    )


def _plant_two_hop(rng, vocab, slots, answerable) -> _Plant:
    """
    A bridges the question to B; only B holds the answer.

    B shares only the generic token g with the question, so BM25 can pull it into the sub-corpus.
    """
    q = vocab.private(QUESTION_TOKENS)
    bridge = vocab.private(BRIDGE_TOKENS)
    ans = vocab.private(ANSWER_TOKENS)
    g = vocab.generic[int(rng.integers(len(vocab.generic)))]
    first = [q[0], q[1], *bridge]
    second = [*bridge, *(ans if answerable else []), g]
    return _Plant(
        question=" ".join([*q, g]),
        answer=" ".join(ans),
        texts={slots[0]: _text(rng, first), slots[1]: _text(rng, second)},
        gold=[slots[0], slots[1]],
    )


PLANTERS = {
    "single_hop": _plant_single_hop,
    "redundant": _plant_redundant,
    "two_hop": _plant_two_hop,
}


def _assemble(noise: Dict[str, str], plants: List[_Plant]) -> Corpus:
    texts = dict(noise)
    for plant in plants:
        texts.update(plant.texts)
    return Corpus.from_passages([Passage(id=pid, text=texts[pid]) for pid in sorted(texts)])


def _verify_two_hop(
    plants: List[_Plant],
    subcorpora: List[List[str]],
    corpus: Corpus,
    spec: FixtureSpec,
    encoder: DualEncoder,
) -> List[bool]:
    """B inside the BM25 sub-corpus, B outside the first-stage top-k, winner exactly ⟨A, B⟩."""
    results = []
    for plant, sub_ids in zip(plants, subcorpora):
        a_id, b_id = plant.gold
        if b_id not in sub_ids:
            results.append(False)
            continue
        winner, pool = retrieve(plant.question, corpus.resolve(sub_ids), spec, encoder)
        in_first_stage = any(c.passages == (b_id,) for c in pool.singles)
        results.append(not in_first_stage and winner.passages == (a_id, b_id))
    return results


def generate(
    spec: FixtureSpec = CONSTS.fixture,
    embedder: EmbeddingProviderSpec = CONSTS.embedder,
    corpus_config: CorpusConfig = CONSTS.corpus,
) -> FixtureBundle:
    """
    Build a seeded synthetic corpus and question set with planted structure.

    Params:
    -------
    spec: FixtureSpec
        Kind, sizes, seed and the retrieval settings used for self-verification.
    embedder: EmbeddingProviderSpec
        Embedder the two-hop plants are verified against (identity head).
    corpus_config: CorpusConfig
        BM25 parameters for the sub-corpus pre-retrieval.

    Returns:
    --------
    FixtureBundle
        Corpus, dataset with sub-corpus ids attached, and the planted truth.
    """
    slots_per_question = SLOTS[spec.kind]
    n_noise_passages = spec.corpus_size - slots_per_question * spec.n_questions
    if n_noise_passages < 0:
        raise ConfigError(
            f"corpus_size={spec.corpus_size} cannot hold {spec.n_questions} {spec.kind} questions")
    n_generic = max(1, math.ceil(spec.corpus_size / PASSAGES_PER_GENERIC))
    n_noise_vocab = max(20, spec.vocab_size // 10)
    needed = n_generic + n_noise_vocab + PRIVATE_TOKENS[spec.kind] * spec.n_questions
    if spec.vocab_size < needed:
        raise ConfigError(f"vocab_size={spec.vocab_size} too small, need at least {needed}")

    rng = derive_rng(spec.seed, f"fixture:{spec.kind}")
    vocab = _Vocabulary(rng, spec.vocab_size, n_generic, n_noise_vocab)
    ids = [f"p{i:05d}" for i in range(spec.corpus_size)]
    order = [ids[int(i)] for i in rng.permutation(spec.corpus_size)]
    slots = [
        order[i * slots_per_question:(i + 1) * slots_per_question] for i in range(spec.n_questions)]
    n_unanswerable = int(round(spec.unanswerable_fraction * spec.n_questions))
    unanswerable = sorted(int(i) for i in rng.choice(spec.n_questions, size=n_unanswerable, replace=False))
    answerable = [i not in set(unanswerable) for i in range(spec.n_questions)]

    noise = {}
    for pid in order[slots_per_question * spec.n_questions:]:
        length = int(rng.integers(NOISE_LENGTH[0], NOISE_LENGTH[1] + 1))
        tokens = [*_noise_tokens(rng, vocab, length), vocab.generic[int(rng.integers(n_generic))]]
        noise[pid] = _text(rng, tokens)

    planter = PLANTERS[spec.kind]
    plants = [planter(rng, vocab, slots[i], answerable[i]) for i in range(spec.n_questions)]

    logger.info("=" * 50)
    logger.info(f"Generating {spec.kind} fixture.", extra={"fields": {
        "n_questions": spec.n_questions, "corpus_size": spec.corpus_size, "seed": spec.seed}})

    encoder = DualEncoder(build_provider(embedder), ProjectionHead.identity(embedder.dim))
    attempts = [1] * spec.n_questions
    verified: Dict[int, bool] = {}
    while True:
        corpus = _assemble(noise, plants)
        index = build_index(corpus, corpus_config.k1, corpus_config.b)
        subcorpora = [
            preretrieve_subcorpus(index, plant.question, spec.subcorpus_limit) for plant in plants]
        if spec.kind != "two_hop":
            break
        passed = _verify_two_hop(plants, subcorpora, corpus, spec, encoder)
        verified = dict(enumerate(passed))
        retry = [i for i, ok in enumerate(passed) if not ok and attempts[i] < spec.max_attempts]
        retry = retry[:vocab.remaining // PRIVATE_TOKENS[spec.kind]]
        logger.info("Two-hop verification round.", extra={"fields": {
            "verified": sum(passed), "resampled": len(retry)}})
        if not retry:
            break
        for i in retry:
            attempts[i] += 1
            plants[i] = planter(rng, vocab, slots[i], answerable[i])

    truth = PlantedTruth(
        gold={i: plant.gold for i, plant in enumerate(plants)},
        unanswerable=unanswerable,
        verified=verified,
    )
    truth.check(corpus)
    if truth.verified_fraction < 1.0:
        logger.warning("Some plants failed verification after max_attempts.", extra={"fields": {
            "verified_fraction": truth.verified_fraction, "max_attempts": spec.max_attempts}})
    dataset = [
        QAExample(question=plant.question, answers=[plant.answer], subcorpus_ids=sub_ids)
        for plant, sub_ids in zip(plants, subcorpora)
    ]
    logger.info(f"Fixture ready: {len(corpus)} passages, {len(dataset)} questions.")
    return FixtureBundle(corpus=corpus, dataset=dataset, truth=truth)


def write_fixture(bundle: FixtureBundle, out_dir: Path | str) -> Tuple[Path, Path, Path]:
    """Write corpus.jsonl, dataset.jsonl and truth.jsonl; returns their paths."""
    out_dir = Path(out_dir)
    corpus_path = out_dir / "corpus.jsonl"
    dataset_path = out_dir / "dataset.jsonl"
    truth_path = out_dir / "truth.jsonl"
    write_ndjson_atomic(
        pl.DataFrame(
            {"id": [p.id for p in bundle.corpus], "text": [p.text for p in bundle.corpus]},
            schema={"id": pl.Utf8, "text": pl.Utf8},
        ),
        corpus_path,
    )
    write_ndjson_atomic(
        pl.DataFrame(
            {
                "question": [e.question for e in bundle.dataset],
                "answers": [e.answers for e in bundle.dataset],
                "subcorpus_ids": [e.subcorpus_ids for e in bundle.dataset],
            },
            schema={"question": pl.Utf8, "answers": pl.List(pl.Utf8), "subcorpus_ids": pl.List(pl.Utf8)},
        ),
        dataset_path,
    )
    unanswerable = set(bundle.truth.unanswerable)
    indices = sorted(bundle.truth.gold)
    write_ndjson_atomic(
        pl.DataFrame(
            {
                "question_idx": indices,
                "passage_ids": [bundle.truth.gold[i] for i in indices],
                "answerable": [i not in unanswerable for i in indices],
            },
            schema=TRUTH_SCHEMA,
        ),
        truth_path,
    )
    return corpus_path, dataset_path, truth_path


def read_truth(path: Path | str) -> PlantedTruth:
    frame = pl.read_ndjson(path, schema=TRUTH_SCHEMA)
    return PlantedTruth(
        gold={row["question_idx"]: list(row["passage_ids"]) for row in frame.iter_rows(named=True)},
        unanswerable=[row["question_idx"] for row in frame.iter_rows(named=True) if not row["answerable"]],
    )
