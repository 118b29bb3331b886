import yaml
from pathlib import Path
from typing import List, Literal, Optional
from pydantic import (
    BaseModel,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)
from .constant import CONFIG_FILE_PATH
from .logger import logger


LossName = Literal["rag", "kl", "ce"]
SystemName = Literal[
    "no_retrieval", "icralm", "icralm_rerank", "adapcr", "adapcr_rerank"]
FixtureKind = Literal["single_hop", "redundant", "two_hop"]


class JobConfig(BaseModel, frozen=True):
    title: str


class CorpusConfig(BaseModel, frozen=True):
    k1: float = Field(gt=0)
    b: float = Field(ge=0, le=1)
    subcorpus_limit: int = Field(gt=0, le=100)


class EmbeddingProviderSpec(BaseModel, frozen=True):
    kind: Literal["deterministic-hash", "remote"]
    dim: int = Field(ge=2)
    seed: int = 0
    endpoint: Optional[str] = None
    timeout: float = Field(default=30.0, gt=0)
    cache_size: int = Field(default=50000, gt=0)

    @model_validator(mode="after")
    def remote_needs_endpoint(self):
        if self.kind == "remote" and not self.endpoint:
            raise ValueError("remote embedding provider requires an endpoint")
        return self


# Shared settings block (the anchor)
class RetrievalConfig(BaseModel, frozen=True):
    k: int = Field(default=5, gt=0)
    subcorpus_limit: int = Field(default=100, gt=0, le=100)
    dedupe_self_pairs: bool = True

    @model_validator(mode="after")
    def k_within_limit(self):
        if self.k > self.subcorpus_limit:
            raise ValueError(
                f"k={self.k} exceeds subcorpus_limit={self.subcorpus_limit}")
        return self


class LmConfig(BaseModel, frozen=True):
    kind: Literal["mock", "remote"]
    epsilon: float = Field(default=0.05, gt=0, lt=0.5)
    endpoint: Optional[str] = None
    attempts: int = Field(default=3, gt=0)
    backoff_seconds: float = Field(default=0.5, ge=0)
    timeout: float = Field(default=30.0, gt=0)
    workers: int = Field(default=1, gt=0)

    @model_validator(mode="after")
    def remote_needs_endpoint(self):
        if self.kind == "remote" and not self.endpoint:
            raise ValueError("remote LM scorer requires an endpoint")
        return self


class TrainingConfig(BaseModel, frozen=True):
    loss: LossName = "rag"
    gamma: float = Field(default=0.1, gt=0)
    beta: float = Field(default=1.0, gt=0)
    top_k_marginal: int = Field(default=5, gt=0)
    learning_rate: float = Field(default=1e-2, ge=0)
    epochs: int = Field(default=10, gt=0)
    batch_size: int = Field(default=8, gt=0)
    seed: int = 13
    balance_stages: bool = False
    in_batch_negatives: bool = True
    positive_filter: bool = True
    clamp_floor: float = Field(default=1e-300, gt=0)


class GradcheckConfig(BaseModel, frozen=True):
    dim: int = Field(default=8, ge=2)
    pool_size: int = Field(default=6, ge=2)
    batch_size: int = Field(default=4, gt=0)
    step: float = Field(default=1e-5, gt=0)
    threshold: float = Field(default=1e-4, gt=0)
    rel_floor: float = Field(default=1e-2, gt=0)
    gamma: float = Field(default=0.1, gt=0)
    beta: float = Field(default=1.0, gt=0)
    seed: int = 7


class EvaluationConfig(BaseModel, frozen=True):
    systems: List[SystemName]
    k_out: int = Field(default=2, ge=1, le=2)

    @field_validator("systems")
    def systems_not_empty(cls, v):
        if not v:
            raise ValueError("at least one system is required")
        return v


class FixtureSpec(RetrievalConfig, frozen=True):
    kind: FixtureKind
    n_questions: int = Field(ge=1)
    corpus_size: int = Field(ge=10)
    vocab_size: int = Field(gt=0)
    seed: int = 0
    max_attempts: int = Field(default=100, gt=0)
    unanswerable_fraction: float = Field(default=0.0, ge=0, lt=1)


class PathsConfig(BaseModel, frozen=True):
    output_dir: Path | str
    score_cache: Path | str


class AppConfig(BaseModel, frozen=True):
    job: JobConfig
    corpus: CorpusConfig
    embedder: EmbeddingProviderSpec
    retrieval: RetrievalConfig
    lm: LmConfig
    training: TrainingConfig
    gradcheck: GradcheckConfig
    evaluation: EvaluationConfig
    fixture: FixtureSpec
    paths: PathsConfig


class RunConfig(BaseModel, frozen=True):
    """Merged view of the YAML parameters and command-line overrides for one run."""

    corpus: CorpusConfig
    embedder: EmbeddingProviderSpec
    retrieval: RetrievalConfig
    lm: LmConfig
    training: TrainingConfig
    gradcheck: GradcheckConfig
    evaluation: EvaluationConfig
    fixture: FixtureSpec
    paths: PathsConfig
    seed: Optional[int] = None

    @model_validator(mode="after")
    def consistent_slices(self):
        max_pool = self.retrieval.k + self.retrieval.k ** 2
        if self.training.top_k_marginal > max_pool:
            raise ValueError(
                f"top_k_marginal={self.training.top_k_marginal} exceeds the largest "
                f"possible pool ({max_pool}) for k={self.retrieval.k}")
        return self


def load_constants(
    path: Path | str = CONFIG_FILE_PATH
) -> AppConfig | None:
    try:
        with open(path, "r") as f:
            data = yaml.safe_load(f)
        return AppConfig(**data)
    except ValidationError as e:
        logger.error(f"Parameter validation failed: {e}")
        return None
    except Exception as e:
        logger.exception(f"Error loading params: {e}")
        return None


CONSTS = load_constants()
if CONSTS is None:
    raise RuntimeError("Failed to load config.")
