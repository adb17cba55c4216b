import json
import urllib.error

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disco.concepts import (PROMPT_TEMPLATE, Caption, ClientConfig, EmbedderParams, bucket_counts, dedup,
                            embed_concepts, extract_rule_based, extract_via_client, fnv1a_64,
                            load_nouns, normalize_concept, parse_completion, read_concept_file,
                            write_concept_file)
from disco.errors import ConfigError, ParseError, TransportError
from disco.tensor import Graph, finite_diff_check


def _rule(text):
    return extract_rule_based(Caption("v", text)).concepts


def test_simple_caption():
    assert _rule("A man is holding a pot") == ["man", "pot"]


def test_repeated_phrase_is_deduplicated():
    assert _rule("the red car and the red car") == ["red car"]


def test_plural_and_case_fold_into_one_concept():
    assert _rule("Two dogs. A dog.") == ["two dog", "dog"]


def test_punctuation_splits_lists():
    assert _rule("a video with tree, ball, car") == ["tree", "ball", "car"]


def test_only_stopwords_yields_nothing():
    assert _rule("it is the one that was there") == ["one"]
    assert _rule("it is there") == []


def test_empty_caption_rejected():
    with pytest.raises(ValueError):
        Caption("v", "")


def test_custom_lists():
    found = extract_rule_based(Caption("v", "red ball bounces"), stoplist=frozenset(), verb_list=frozenset({"bounces"}))
    assert found.concepts == ["red ball"]


def test_normalize_and_dedup():
    assert normalize_concept("  The  Cats! ") == "the cat"
    assert normalize_concept("glass") == "glass"
    assert normalize_concept("bus") == "bus"
    assert dedup(["Cups", "cup", "bowl", "", "!!"]) == ["cup", "bowl"]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(list(load_nouns())), min_size=1, max_size=6))
def test_caption_listing_recovers_unique_nouns(names):
    caption = "a video with " + ", ".join(names)
    out = _rule(caption)
    assert out == list(dict.fromkeys(names))
    assert len(out) == len(set(out))


def test_prompt_template_mentions_repeats():
    assert "Do not include repetitive objects" in PROMPT_TEMPLATE
    assert "{caption}" in PROMPT_TEMPLATE


# ---- client ------------------------------------------------------------------


CFG = ClientConfig(url="http://llm.invalid/v1", key="k", attempts=3, backoff=0.5)


def test_client_parses_and_dedups():
    calls = []

    def post(url, headers, body, timeout):
        calls.append((url, headers, json.loads(body)))
        return json.dumps({"completion": json.dumps(["Dog", "ball", "dogs"])})

    found = extract_via_client(Caption("v1", "a dog and a ball"), CFG, post=post)
    assert found.concepts == ["dog", "ball"]
    assert found.source == "external"
    url, headers, body = calls[0]
    assert headers["Authorization"] == "Bearer k"
    assert "a dog and a ball" in body["prompt"]


def test_parse_completion_variants():
    assert parse_completion('["a", "b"]') == ["a", "b"]
    assert parse_completion(json.dumps({"choices": [{"message": {"content": '["x"]'}}]})) == ["x"]
    assert parse_completion(json.dumps({"choices": [{"text": '["y"]'}]})) == ["y"]


@pytest.mark.parametrize("raw", ["not json", '{"completion": "nope"}', '{"other": 1}', "[1, 2]", '"str"'])
def test_malformed_response_carries_raw_body(raw):
    with pytest.raises(ParseError) as info:
        parse_completion(raw)
    assert info.value.raw == raw


def test_client_retries_then_succeeds():
    attempts, sleeps = [], []

    def post(url, headers, body, timeout):
        attempts.append(1)
        if len(attempts) < 3:
            raise urllib.error.URLError("down")
        return '["cup"]'

    found = extract_via_client(Caption("v", "a cup"), CFG, post=post, sleep=sleeps.append)
    assert found.concepts == ["cup"]
    assert sleeps == [0.5, 1.0]


def test_client_gives_up_with_transport_error():
    sleeps = []

    def post(*_):
        raise ConnectionRefusedError("refused")

    with pytest.raises(TransportError):
        extract_via_client(Caption("v", "a cup"), CFG, post=post, sleep=sleeps.append)
    assert sleeps == [0.5, 1.0]


def test_client_config_from_env(monkeypatch):
    monkeypatch.delenv("DISCO_LLM_URL", raising=False)
    monkeypatch.delenv("DISCO_LLM_KEY", raising=False)
    with pytest.raises(ConfigError):
        ClientConfig.from_env()
    monkeypatch.setenv("DISCO_LLM_URL", "http://x")
    monkeypatch.setenv("DISCO_LLM_KEY", "secret")
    cfg = ClientConfig.from_env()
    assert (cfg.url, cfg.key) == ("http://x", "secret")


# ---- embedder ------------------------------------------------------------------


def test_fnv1a_reference_values():
    # published FNV-1a 64-bit test vectors (seed 0 leaves the offset basis unchanged)
    assert fnv1a_64("") == 0xCBF29CE484222325
    assert fnv1a_64("a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64("foobar") == 0x85944171F73967E8
    assert fnv1a_64("a", seed=1) != fnv1a_64("a")


def test_bucket_counts_bag_of_tokens():
    counts = bucket_counts(["red car", "car"], 64)
    assert counts.sum(axis=1).tolist() == [2.0, 1.0]
    assert counts[1, fnv1a_64("car") % 64] == 1.0


def test_embeddings_unit_norm_and_deterministic():
    params = EmbedderParams(width=16, buckets=64)
    a = embed_concepts(["dog", "red ball", "tree"], params)
    b = embed_concepts(["dog", "red ball", "tree"], EmbedderParams(width=16, buckets=64))
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-12)
    assert a.tobytes() == b.tobytes()


def test_embeddings_follow_concept_order():
    params = EmbedderParams(width=16, buckets=64)
    a = embed_concepts(["dog", "ball", "tree"], params)
    b = embed_concepts(["tree", "dog", "ball"], params)
    np.testing.assert_array_equal(b, a[[2, 0, 1]])


def test_word_order_within_phrase_is_ignored():
    params = EmbedderParams(width=16, buckets=64)
    np.testing.assert_array_equal(embed_concepts(["red ball"], params), embed_concepts(["ball red"], params))


def test_embedder_rejects_tiny_bucket_count():
    with pytest.raises(ConfigError):
        EmbedderParams(width=8, buckets=32)


def test_embedder_gradient():
    params = EmbedderParams(width=8, buckets=64)
    g = Graph()
    emb = embed_concepts(["dog", "red ball"], params, graph=g)
    g.sum(g.mul(emb, np.random.default_rng(0).standard_normal((2, 8))))
    assert finite_diff_check(g).max_rel_error <= 1e-4


def test_concept_file_roundtrip(tmp_path):
    path = tmp_path / "c.jsonl"
    write_concept_file(path, [("v0", "a dog", ["dog"]), ("v1", "a cat and a cup", ["cat", "cup"])])
    rows = read_concept_file(path)
    assert rows[1] == {"id": "v1", "caption": "a cat and a cup", "concepts": ["cat", "cup"]}
