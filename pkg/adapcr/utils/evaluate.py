from collections import Counter
from pathlib import Path
from typing import Dict, List, Sequence

import polars as pl
from pydantic import BaseModel, Field

from .constant import ARTICLES
from .corpus import Corpus, Passage, QAExample, tokenize
from .embed import DualEncoder, EmbeddingProvider, ProjectionHead
from .exceptions import ConfigError, PreconditionError
from .lmscore import LmScorer, ScoreCache, score_combinations
from .logger import logger
from .models import CONSTS, RetrievalConfig, SystemName
from .retrieval import Combination, first_stage, retrieve, subcorpus_for
from .storage import write_text_atomic


def normalize_answer(s: str) -> str:
    """Lowercase, strip punctuation, drop articles, collapse whitespace."""
    return " ".join(token for token in tokenize(s) if token not in ARTICLES)


def exact_match(pred: str, golds: Sequence[str]) -> int:
    normalized = normalize_answer(pred)
    return int(any(normalized == normalize_answer(gold) for gold in golds))


def _token_f1(pred_tokens: List[str], gold_tokens: List[str]) -> float:
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    common = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if common == 0:
        return 0.0
    precision = common / len(pred_tokens)
    recall = common / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def answer_f1(pred: str, golds: Sequence[str]) -> float:
    """Best multiset token F1 against any gold."""
    pred_tokens = normalize_answer(pred).split()
    return max(_token_f1(pred_tokens, normalize_answer(gold).split()) for gold in golds)


def _contains_run(haystack: List[str], needle: List[str]) -> bool:
    width = len(needle)
    return any(haystack[i:i + width] == needle for i in range(len(haystack) - width + 1))


def answer_in_passages(answers: Sequence[str], texts: Sequence[str]) -> bool:
    """True when some normalized answer occurs as a token run in some normalized passage."""
    needles = [normalize_answer(a).split() for a in answers]
    needles = [n for n in needles if n]
    if not needles:
        return False
    for text in texts:
        haystack = normalize_answer(text).split()
        if any(_contains_run(haystack, needle) for needle in needles):
            return True
    return False


class MetricResult(BaseModel, frozen=True):
    em: float = Field(ge=0, le=1)
    f1: float = Field(ge=0, le=1)
    n_examples: int = Field(gt=0)
    system_label: str


class PredictionRecord(BaseModel, frozen=True):
    question_idx: int
    predicted: str
    winner: Combination | None = None
    gold: List[str] = Field(min_length=1)


def mock_reader(context_texts: Sequence[str], question: str, answer: str) -> str:
    """Reads off, in order, the answer tokens that the context or question supplies."""
    seen = set(tokenize(" ".join([*context_texts, question])))
    return " ".join(token for token in tokenize(answer) if token in seen)


def predict(
    example: QAExample,
    question_idx: int,
    winner: Combination | None,
    corpus: Corpus,
) -> PredictionRecord:
    context = [corpus.get(pid).text for pid in winner.passages] if winner is not None else []
    return PredictionRecord(
        question_idx=question_idx,
        predicted=mock_reader(context, example.question, example.answers[0]),
        winner=winner,
        gold=example.answers,
    )


def evaluate_system(predictions: Sequence[PredictionRecord], system_label: str = "system") -> MetricResult:
    if not predictions:
        raise PreconditionError("Cannot evaluate an empty prediction list.")
    em = sum(exact_match(p.predicted, p.gold) for p in predictions)
    f1 = sum(answer_f1(p.predicted, p.gold) for p in predictions)
    n = len(predictions)
    return MetricResult(em=em / n, f1=f1 / n, n_examples=n, system_label=system_label)


def baseline_fixed_topk(
    question: str,
    subcorpus: Sequence[Passage],
    encoder: DualEncoder,
    k_out: int = CONSTS.evaluation.k_out,
    config: RetrievalConfig = CONSTS.retrieval,
) -> Combination:
    """
    Top-k_out passages ranked independently, no second stage.

    With two passages the combination score is the mean of the two single scores.
    """
    singles = first_stage(question, subcorpus, config.model_copy(update={"k": k_out}), encoder)
    if len(singles) == 1:
        return singles[0]
    return Combination(
        passages=(singles[0].passages[0], singles[1].passages[0]),
        score=(singles[0].score + singles[1].score) / 2.0,
        stage="pair",
    )


class SystemRow(BaseModel, frozen=True):
    system: str
    em: float
    f1: float
    mean_log_likelihood: float
    gold_hits: int | None = None
    n_examples: int


class ComparisonReport(BaseModel, frozen=True):
    rows: List[SystemRow]
    predictions: Dict[str, List[PredictionRecord]] = Field(default_factory=dict)

    def row(self, system: str) -> SystemRow:
        for row in self.rows:
            if row.system == system:
                return row
        raise KeyError(system)

    def to_frame(self) -> pl.DataFrame:
        return pl.DataFrame([row.model_dump() for row in self.rows])


def _winners_for(
    system: SystemName,
    dataset: Sequence[QAExample],
    corpus: Corpus,
    heads: Dict[str, ProjectionHead],
    provider: EmbeddingProvider,
    config: RetrievalConfig,
    k_out: int,
) -> List[Combination | None]:
    if system == "no_retrieval":
        return [None] * len(dataset)
    head_name = "trained" if system.endswith("_rerank") else "identity"
    if head_name not in heads:
        raise ConfigError(f"System {system!r} needs a {head_name} head")
    encoder = DualEncoder(provider, heads[head_name])
    winners: List[Combination | None] = []
    for example in dataset:
        subcorpus = subcorpus_for(example, corpus)
        if not subcorpus:
            raise PreconditionError(f"Question {example.question!r} has an empty sub-corpus.")
        if system.startswith("icralm"):
            winners.append(baseline_fixed_topk(example.question, subcorpus, encoder, k_out, config))
        else:
            winners.append(retrieve(example.question, subcorpus, config, encoder)[0])
    return winners


def compare_systems(
    dataset: Sequence[QAExample],
    corpus: Corpus,
    heads: Dict[str, ProjectionHead],
    scorer: LmScorer,
    provider: EmbeddingProvider,
    cache: ScoreCache | None = None,
    systems: Sequence[SystemName] = CONSTS.evaluation.systems,
    config: RetrievalConfig = CONSTS.retrieval,
    k_out: int = CONSTS.evaluation.k_out,
    truth: Dict[int, List[str]] | None = None,
    question_indices: Sequence[int] | None = None,
) -> ComparisonReport:
    """
    Run every configured system over the dataset.

    Params:
    -------
    heads: Dict[str, ProjectionHead]
        "identity" for the untrained arms, "trained" for the *_rerank arms.
    truth: Dict[int, List[str]] | None
        Planted gold ids per question; when given, each row counts the winners
        holding all of them.
    question_indices: Sequence[int] | None
        Dataset positions used as cache keys; defaults to 0..n-1.

    Returns:
    --------
    ComparisonReport
        One row per system in the requested order.
    """
    if not dataset:
        raise PreconditionError("Cannot compare systems on an empty dataset.")
    cache = cache if cache is not None else ScoreCache()
    indices = list(question_indices) if question_indices is not None else list(range(len(dataset)))
    rows: List[SystemRow] = []
    predictions: Dict[str, List[PredictionRecord]] = {}
    for system in systems:
        winners = _winners_for(system, dataset, corpus, heads, provider, config, k_out)
        records, total_ll, hits = [], 0.0, 0
        for example, idx, winner in zip(dataset, indices, winners):
            records.append(predict(example, idx, winner, corpus))
            total_ll += score_combinations([winner], example, idx, scorer, cache, corpus)[0].log_likelihood
            if truth is not None and winner is not None and set(truth.get(idx, [])) <= set(winner.passages):
                hits += 1
        metrics = evaluate_system(records, system)
        rows.append(SystemRow(
            system=system,
            em=metrics.em,
            f1=metrics.f1,
            mean_log_likelihood=total_ll / len(dataset),
            gold_hits=hits if truth is not None else None,
            n_examples=metrics.n_examples,
        ))
        predictions[system] = records
        logger.info(f"System {system} evaluated.", extra={"fields": rows[-1].model_dump()})
    return ComparisonReport(rows=rows, predictions=predictions)


def write_report_json(report: ComparisonReport, path: Path | str) -> None:
    write_text_atomic(report.model_dump_json(include={"rows"}, indent=2), path)
    logger.info(f"Report saved into {path}.")


def render_markdown(report: ComparisonReport) -> str:
    frame = report.to_frame().with_columns(
        pl.col("em").round(4), pl.col("f1").round(4), pl.col("mean_log_likelihood").round(4))
    with pl.Config(
        tbl_formatting="MARKDOWN",
        tbl_hide_dataframe_shape=True,
        tbl_hide_column_data_types=True,
        tbl_rows=-1,
    ):
        return f"{frame}\n"


def write_report_markdown(report: ComparisonReport, path: Path | str) -> None:
    write_text_atomic(render_markdown(report), path)
    logger.info(f"Markdown report saved into {path}.")
