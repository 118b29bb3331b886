import hashlib
import json

import httpx
import numpy as np
import pytest
from pydantic import ValidationError

from utils.embed import (
    BoundedCache,
    DualEncoder,
    HashEmbeddingProvider,
    ProjectionHead,
    RemoteEmbeddingProvider,
    build_provider,
    concat_query,
    deterministic_hash_embed,
    embed_passage,
    embed_query,
    load_head,
    save_head,
)
from utils.exceptions import ContractError, RetryableError
from utils.models import EmbeddingProviderSpec
from utils.retrieval import score_single


class TestHashEmbedding:
    def test_deterministic_and_unit_norm(self):
        a = deterministic_hash_embed("alpha beta gamma", dim=256, seed=3)
        b = deterministic_hash_embed("alpha beta gamma", dim=256, seed=3)
        np.testing.assert_array_equal(a, b)
        assert np.linalg.norm(a) == pytest.approx(1.0)

    def test_seed_changes_the_map(self):
        a = deterministic_hash_embed("alpha beta gamma", dim=256, seed=0)
        b = deterministic_hash_embed("alpha beta gamma", dim=256, seed=1)
        assert not np.array_equal(a, b)

    def test_no_tokens_gives_zero_vector(self):
        np.testing.assert_array_equal(deterministic_hash_embed("?!", dim=16), np.zeros(16))

    def test_dim_below_two_is_rejected(self):
        with pytest.raises(ContractError):
            deterministic_hash_embed("x", dim=1)

    def test_disjoint_token_sets_are_near_orthogonal(self):
        left = " ".join(f"left{i}" for i in range(32))
        right = " ".join(f"right{i}" for i in range(32))
        u = deterministic_hash_embed(left, dim=256)
        v = deterministic_hash_embed(right, dim=256)
        assert abs(score_single(u, v)) < 0.3

    def test_shared_tokens_score_higher(self):
        q = deterministic_hash_embed("red fox jumps", dim=256)
        near = deterministic_hash_embed("red fox sleeps", dim=256)
        far = deterministic_hash_embed("blue whale swims", dim=256)
        assert score_single(q, near) > score_single(q, far)

    def test_provider_batches(self):
        provider = HashEmbeddingProvider(dim=32)
        rows = provider.embed(["one", "two"])
        assert rows.shape == (2, 32)
        assert provider.embed([]).shape == (0, 32)

    def test_single_token_matches_its_hash_bucket(self):
        h = int.from_bytes(hashlib.blake2b(b"0:abc", digest_size=8).digest(), "little")
        expected = np.zeros(8)
        expected[h % 8] = 1.0 if (h >> 32) & 1 else -1.0
        np.testing.assert_array_equal(deterministic_hash_embed("abc", dim=8, seed=0), expected)

    def test_random_strings_stay_finite(self, rng):
        alphabet = list("abcdefghijklmnopqrstuvwxyz0123456789 .,!?'-[]éßλ")
        for _ in range(10_000):
            size = int(rng.integers(0, 40))
            text = "".join(alphabet[int(i)] for i in rng.integers(len(alphabet), size=size))
            vector = deterministic_hash_embed(text, dim=16)
            assert np.all(np.isfinite(vector))
            assert np.linalg.norm(vector) == pytest.approx(1.0) or not vector.any()

    def test_provider_cache_is_bounded(self):
        provider = HashEmbeddingProvider(dim=8, cache_size=3)
        texts = [f"word{i}" for i in range(10)]
        rows = provider.embed(texts)
        assert len(provider._cache) == 3
        for text, row in zip(texts, rows):
            np.testing.assert_array_equal(row, deterministic_hash_embed(text, dim=8))
        np.testing.assert_array_equal(provider.embed(["word0"])[0], rows[0])


class TestBoundedCache:
    def test_evicts_least_recently_used(self):
        cache = BoundedCache(2)
        cache.put("a", np.zeros(1))
        cache.put("b", np.ones(1))
        cache.get("a")
        cache.put("c", np.ones(1))
        assert "a" in cache and "c" in cache
        assert "b" not in cache
        assert len(cache) == 2

    def test_size_must_be_positive(self):
        with pytest.raises(ContractError):
            BoundedCache(0)


class TestConcatQuery:
    def test_passage_then_separator_then_question(self):
        assert concat_query("A", "B") == "A [SEP] B"

    def test_empty_passage_is_dropped(self):
        assert concat_query("", "B") == "[SEP] B"


class TestProjectionHead:
    def test_identity_keeps_base_embedding(self, provider):
        head = ProjectionHead.identity(provider.dim)
        np.testing.assert_array_equal(embed_query(provider, head, "some text"),
                                      provider.embed(["some text"])[0])
        np.testing.assert_array_equal(embed_passage(provider, head, "some text"),
                                      provider.embed(["some text"], "passage")[0])

    def test_zero_head_gives_zero_vector(self, provider):
        zeros = np.zeros((provider.dim, provider.dim))
        head = ProjectionHead(W_q=zeros, W_d=zeros)
        np.testing.assert_array_equal(embed_query(provider, head, "some text"), np.zeros(provider.dim))
        np.testing.assert_array_equal(embed_passage(provider, head, "some text"), np.zeros(provider.dim))

    def test_separate_towers_embed_differently(self, provider, rng):
        head = ProjectionHead(W_q=np.eye(provider.dim), W_d=rng.normal(size=(provider.dim, provider.dim)))
        query = embed_query(provider, head, "some text")
        assert not np.allclose(query, embed_passage(provider, head, "some text"))

    def test_non_square_rejected(self):
        with pytest.raises(ValidationError):
            ProjectionHead(W_q=np.zeros((2, 3)), W_d=np.zeros((2, 3)))

    def test_non_finite_rejected(self):
        bad = np.eye(3)
        bad[0, 0] = np.nan
        with pytest.raises(ValidationError):
            ProjectionHead(W_q=bad, W_d=np.eye(3))

    def test_zero_step_returns_same_head(self):
        head = ProjectionHead.identity(4)
        assert head.step(np.ones((4, 4)), np.ones((4, 4)), 0.0) is head

    def test_flat_round_trip(self, rng):
        head = ProjectionHead(W_q=rng.normal(size=(3, 3)), W_d=rng.normal(size=(3, 3)))
        again = ProjectionHead.from_flat(head.flatten(), 3)
        np.testing.assert_array_equal(again.W_q, head.W_q)
        np.testing.assert_array_equal(again.W_d, head.W_d)

    def test_checkpoint_save_and_load(self, tmp_path, rng):
        head = ProjectionHead(W_q=rng.normal(size=(4, 4)), W_d=rng.normal(size=(4, 4)))
        path = tmp_path / "nested" / "head.json"
        save_head(head, path)
        loaded = load_head(path)
        np.testing.assert_array_equal(loaded.W_q, head.W_q)
        np.testing.assert_array_equal(loaded.W_d, head.W_d)

    def test_malformed_checkpoint(self, tmp_path):
        path = tmp_path / "head.json"
        path.write_text('{"dim": 2, "blocks": []}', encoding="utf-8")
        with pytest.raises(ContractError):
            load_head(path)

    def test_dimension_mismatch(self, provider):
        with pytest.raises(ContractError):
            DualEncoder(provider, ProjectionHead.identity(provider.dim + 1))


def _embed_handler(dim, calls):
    def handler(request: httpx.Request) -> httpx.Response:
        calls.append(request)
        body = request.read()
        payload = json.loads(body)
        vectors = [[float(len(t) + i) for i in range(dim)] for t in payload["texts"]]
        return httpx.Response(200, json={"vectors": vectors, "dim": dim})
    return handler


class TestRemoteEmbedding:
    def test_vectors_and_cache(self):
        calls = []
        client = httpx.Client(transport=httpx.MockTransport(_embed_handler(3, calls)))
        provider = RemoteEmbeddingProvider("http://embed.test", dim=3, client=client)
        rows = provider.embed(["ab", "abcd", "ab"], "query")
        np.testing.assert_array_equal(rows[0], [2.0, 3.0, 4.0])
        np.testing.assert_array_equal(rows[0], rows[2])
        provider.embed(["ab"], "query")
        assert len(calls) == 1
        assert calls[0].url.path == "/embed"

    def test_wrong_dimension_is_a_contract_error(self):
        client = httpx.Client(transport=httpx.MockTransport(_embed_handler(4, [])))
        provider = RemoteEmbeddingProvider("http://embed.test", dim=3, client=client)
        with pytest.raises(ContractError):
            provider.embed(["x"], "passage")

    def test_retries_then_gives_up(self):
        attempts = []

        def handler(request):
            attempts.append(request)
            return httpx.Response(503)

        client = httpx.Client(transport=httpx.MockTransport(handler))
        provider = RemoteEmbeddingProvider(
            "http://embed.test", dim=3, client=client, attempts=3, backoff_seconds=0.0)
        with pytest.raises(RetryableError):
            provider.embed(["x"], "query")
        assert len(attempts) == 3

    def test_build_provider_threads_retry_settings(self):
        attempts = []

        def handler(request):
            attempts.append(request)
            return httpx.Response(503)

        client = httpx.Client(transport=httpx.MockTransport(handler))
        spec = EmbeddingProviderSpec(kind="remote", dim=3, endpoint="http://embed.test")
        provider = build_provider(spec, client=client, attempts=5, backoff_seconds=0.0)
        with pytest.raises(RetryableError):
            provider.embed(["x"], "query")
        assert len(attempts) == 5

    def test_more_texts_than_cache_slots(self):
        calls = []
        client = httpx.Client(transport=httpx.MockTransport(_embed_handler(3, calls)))
        provider = RemoteEmbeddingProvider("http://embed.test", dim=3, client=client, cache_size=2)
        rows = provider.embed(["a", "bb", "ccc", "a"], "passage")
        np.testing.assert_array_equal(rows[:, 0], [1.0, 2.0, 3.0, 1.0])
        assert len(calls) == 1
