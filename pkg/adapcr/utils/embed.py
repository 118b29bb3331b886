import hashlib
import os
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Hashable, List, Literal, Protocol, Sequence

import httpx
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .constant import SEP_TOKEN
from .corpus import tokenize
from .exceptions import ContractError
from .logger import logger
from .models import CONSTS, EmbeddingProviderSpec
from .storage import ensure_parent, tmp_path_for
from .transport import post_json_with_retry


Side = Literal["query", "passage"]


def _token_hash(token: str, seed: int) -> int:
    digest = hashlib.blake2b(f"{seed}:{token}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def deterministic_hash_embed(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """
    Signed feature hashing of the token bag, L2-normalised.

    Each token lands in bucket `h mod dim` with sign from bit 32 of its
    BLAKE2b hash and magnitude in [0.75, 1.25) from bits 33-56. Text with no
    tokens maps to the zero vector.
    """
    if dim < 2:
        raise ContractError(f"Hash embedding needs dim >= 2, got {dim}")
    vector = np.zeros(dim, dtype=np.float64)
    for token in tokenize(text):
        h = _token_hash(token, seed)
        sign = 1.0 if (h >> 32) & 1 else -1.0
        magnitude = 0.75 + 0.5 * ((h >> 33) & 0xFFFFFF) / float(1 << 24)
        vector[h % dim] += sign * magnitude
    norm = np.linalg.norm(vector)
    if norm > 0:
        vector /= norm
    return vector


class EmbeddingProvider(Protocol):
    dim: int

    def embed(self, texts: Sequence[str], side: Side) -> np.ndarray:
        """Base embeddings, one row per text."""
        ...


class BoundedCache:
    """Least-recently-used map holding at most `max_size` vectors."""

    def __init__(self, max_size: int):
        if max_size < 1:
            raise ContractError(f"Cache size must be positive, got {max_size}")
        self.max_size = max_size
        self._entries: "OrderedDict[Hashable, np.ndarray]" = OrderedDict()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: Hashable) -> bool:
        return key in self._entries

    def get(self, key: Hashable) -> np.ndarray | None:
        vector = self._entries.get(key)
        if vector is not None:
            self._entries.move_to_end(key)
        return vector

    def put(self, key: Hashable, vector: np.ndarray) -> None:
        self._entries[key] = vector
        self._entries.move_to_end(key)
        while len(self._entries) > self.max_size:
            self._entries.popitem(last=False)


class HashEmbeddingProvider:
    """Deterministic desk-scale stand-in for a dense encoder; same map for both sides."""

    def __init__(
        self,
        dim: int = CONSTS.embedder.dim,
        seed: int = CONSTS.embedder.seed,
        cache_size: int = CONSTS.embedder.cache_size,
    ):
        if dim < 2:
            raise ContractError(f"Hash embedding needs dim >= 2, got {dim}")
        self.dim = dim
        self.seed = seed
        self._cache = BoundedCache(cache_size)

    def embed(self, texts: Sequence[str], side: Side = "query") -> np.ndarray:
        rows = []
        for text in texts:
            vector = self._cache.get(text)
            if vector is None:
                vector = deterministic_hash_embed(text, self.dim, self.seed)
                vector.setflags(write=False)
                self._cache.put(text, vector)
            rows.append(vector)
        if not rows:
            return np.zeros((0, self.dim))
        return np.stack(rows)


class EmbedResponse(BaseModel):
    vectors: List[List[float]]
    dim: int = Field(gt=0)


class RemoteEmbeddingProvider:
    """Client for POST {endpoint}/embed."""

    def __init__(
        self,
        endpoint: str,
        dim: int,
        client: httpx.Client | None = None,
        timeout: float = CONSTS.embedder.timeout,
        attempts: int = CONSTS.lm.attempts,
        backoff_seconds: float = CONSTS.lm.backoff_seconds,
        cache_size: int = CONSTS.embedder.cache_size,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.dim = dim
        self.client = client or httpx.Client(timeout=timeout)
        self.attempts = attempts
        self.backoff_seconds = backoff_seconds
        self._cache = BoundedCache(cache_size)

    def embed(self, texts: Sequence[str], side: Side = "query") -> np.ndarray:
        found: Dict[str, np.ndarray] = {}
        for text in dict.fromkeys(texts):
            vector = self._cache.get((side, text))
            if vector is not None:
                found[text] = vector
        missing = [t for t in dict.fromkeys(texts) if t not in found]
        if missing:
            body = post_json_with_retry(
                self.client,
                f"{self.endpoint}/embed",
                {"texts": missing, "side": side},
                attempts=self.attempts,
                backoff_seconds=self.backoff_seconds,
            )
            try:
                response = EmbedResponse.model_validate(body)
            except ValidationError as e:
                raise ContractError(f"Malformed embedding response: {e}")
            if response.dim != self.dim or len(response.vectors) != len(missing):
                raise ContractError(
                    f"Embedding response shape mismatch: dim={response.dim}, "
                    f"rows={len(response.vectors)}, expected dim={self.dim}, rows={len(missing)}")
            for text, values in zip(missing, response.vectors):
                vector = np.asarray(values, dtype=np.float64)
                if vector.shape != (self.dim,) or not np.all(np.isfinite(vector)):
                    raise ContractError("Embedding vector has wrong length or non-finite entries")
                vector.setflags(write=False)
                self._cache.put((side, text), vector)
                found[text] = vector
        if not texts:
            return np.zeros((0, self.dim))
        return np.stack([found[t] for t in texts])


def build_provider(
    spec: EmbeddingProviderSpec = CONSTS.embedder,
    client: httpx.Client | None = None,
    attempts: int = CONSTS.lm.attempts,
    backoff_seconds: float = CONSTS.lm.backoff_seconds,
) -> EmbeddingProvider:
    """Provider named by `spec`; the remote one retries with the run's LM retry settings."""
    if spec.kind == "remote":
        return RemoteEmbeddingProvider(
            spec.endpoint, spec.dim, client=client, timeout=spec.timeout,
            attempts=attempts, backoff_seconds=backoff_seconds, cache_size=spec.cache_size)
    return HashEmbeddingProvider(spec.dim, spec.seed, spec.cache_size)


class ProjectionHead(BaseModel):
    """Trainable linear maps applied on top of the frozen provider embeddings."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    W_q: np.ndarray
    W_d: np.ndarray

    @field_validator("W_q", "W_d", mode="before")
    def as_float_matrix(cls, v):
        matrix = np.array(v, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError(f"projection matrix must be square, got shape {matrix.shape}")
        if not np.all(np.isfinite(matrix)):
            raise ValueError("projection matrix has non-finite entries")
        matrix.setflags(write=False)
        return matrix

    @model_validator(mode="after")
    def same_dim(self):
        if self.W_q.shape != self.W_d.shape:
            raise ValueError("query and passage heads must share a dimension")
        return self

    @property
    def dim(self) -> int:
        return self.W_q.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "ProjectionHead":
        return cls(W_q=np.eye(dim), W_d=np.eye(dim))

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.W_q.ravel(), self.W_d.ravel()])

    @classmethod
    def from_flat(cls, flat: np.ndarray, dim: int) -> "ProjectionHead":
        size = dim * dim
        return cls(W_q=flat[:size].reshape(dim, dim), W_d=flat[size:].reshape(dim, dim))

    def step(self, grad_q: np.ndarray, grad_d: np.ndarray, learning_rate: float) -> "ProjectionHead":
        if learning_rate == 0:
            return self
        return ProjectionHead(
            W_q=self.W_q - learning_rate * grad_q,
            W_d=self.W_d - learning_rate * grad_d,
        )


class MatrixBlock(BaseModel):
    side: Side
    dim: int = Field(gt=0)
    values: List[List[float]]


class HeadCheckpoint(BaseModel):
    dim: int = Field(gt=0)
    blocks: List[MatrixBlock]


def save_head(head: ProjectionHead, path: Path | str) -> None:
    path = ensure_parent(path)
    tmp_path = tmp_path_for(path)
    checkpoint = HeadCheckpoint(
        dim=head.dim,
        blocks=[
            MatrixBlock(side="query", dim=head.dim, values=head.W_q.tolist()),
            MatrixBlock(side="passage", dim=head.dim, values=head.W_d.tolist()),
        ],
    )
    with open(tmp_path, "w", encoding="utf-8") as f:
        f.write(checkpoint.model_dump_json())
    # Atomic replace (POSIX-safe)
    os.replace(tmp_path, path)
    logger.info(f"Head checkpoint saved into {path}.", extra={"fields": {"dim": head.dim}})


def load_head(path: Path | str) -> ProjectionHead:
    with open(path, "r", encoding="utf-8") as f:
        raw = f.read()
    try:
        checkpoint = HeadCheckpoint.model_validate_json(raw)
        blocks = {block.side: block for block in checkpoint.blocks}
        head = ProjectionHead(W_q=blocks["query"].values, W_d=blocks["passage"].values)
    except (ValidationError, KeyError) as e:
        raise ContractError(f"Malformed head checkpoint {path}: {e}")
    if head.dim != checkpoint.dim:
        raise ContractError(f"Head checkpoint header dim {checkpoint.dim} != matrix dim {head.dim}")
    logger.info(f"Head checkpoint loaded from {path}.", extra={"fields": {"dim": head.dim}})
    return head


def _check_dims(provider: EmbeddingProvider, head: ProjectionHead) -> None:
    if provider.dim != head.dim:
        raise ContractError(f"Provider dim {provider.dim} != head dim {head.dim}")


def embed_query(provider: EmbeddingProvider, head: ProjectionHead, text: str) -> np.ndarray:
    _check_dims(provider, head)
    return head.W_q @ provider.embed([text], "query")[0]


def embed_passage(provider: EmbeddingProvider, head: ProjectionHead, text: str) -> np.ndarray:
    _check_dims(provider, head)
    return head.W_d @ provider.embed([text], "passage")[0]


def concat_query(passage_text: str, question_text: str, separator: str = SEP_TOKEN) -> str:
    """Passage first, then the separator, then the question; empty operands are dropped."""
    return " ".join(part for part in (passage_text, separator, question_text) if part)


class DualEncoder:
    """Provider plus head; the two sides of the bi-encoder."""

    def __init__(self, provider: EmbeddingProvider, head: ProjectionHead):
        _check_dims(provider, head)
        self.provider = provider
        self.head = head

    @property
    def dim(self) -> int:
        return self.head.dim

    def with_head(self, head: ProjectionHead) -> "DualEncoder":
        return DualEncoder(self.provider, head)

    def encode_queries(self, texts: Sequence[str]) -> np.ndarray:
        return self.provider.embed(texts, "query") @ self.head.W_q.T

    def encode_passages(self, texts: Sequence[str]) -> np.ndarray:
        return self.provider.embed(texts, "passage") @ self.head.W_d.T
