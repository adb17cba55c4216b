"""Semantic concept extraction and the learnable concept text embedder.

Concepts are short noun phrases pulled from a caption with repeats removed.
Two extractors share one normalization/dedup pass: a deterministic rule-based
one (stoplist + verb list shipped with the package) and an HTTP client that
asks an external LLM for a JSON array of phrases.
"""

from __future__ import annotations

import json
import os
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ParseError, TransportError
from .tensor import Graph, Tensor

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

_TOKEN_RE = re.compile(r"[a-z0-9']+|[^\sa-z0-9']")


@dataclass(frozen=True)
class Caption:
    video_id: str
    text: str

    def __post_init__(self):
        if not self.text:
            raise ValueError(f"caption for {self.video_id!r} is empty")


@dataclass
class ConceptSet:
    video_id: str
    concepts: list[str]
    embeddings: np.ndarray | None = None
    source: str = "rule"

    def __len__(self) -> int:
        return len(self.concepts)


def _read_word_list(name: str) -> frozenset[str]:
    text = resources.files("disco.data").joinpath(name).read_text(encoding="utf-8")
    return frozenset(
        line.strip().lower() for line in text.splitlines()
        if line.strip() and not line.startswith("#")
    )


@lru_cache(maxsize=None)
def load_stoplist() -> frozenset[str]:
    return _read_word_list("stoplist.txt")


@lru_cache(maxsize=None)
def load_verbs() -> frozenset[str]:
    return _read_word_list("verbs.txt")


@lru_cache(maxsize=None)
def load_nouns() -> tuple[str, ...]:
    text = resources.files("disco.data").joinpath("nouns.txt").read_text(encoding="utf-8")
    return tuple(l.strip() for l in text.splitlines() if l.strip() and not l.startswith("#"))


def _singular(token: str) -> str:
    if len(token) > 3 and token.endswith("s") and not token.endswith("ss"):
        return token[:-1]
    return token


def normalize_concept(phrase: str) -> str:
    """Lowercase, drop punctuation, collapse whitespace, strip plural 's'."""
    words = re.sub(r"[^a-z0-9\s]", "", phrase.lower()).split()
    return " ".join(_singular(w) for w in words)


def dedup(concepts: Iterable[str]) -> list[str]:
    """Normalize and keep the first occurrence of every concept."""
    seen, out = set(), []
    for c in concepts:
        norm = normalize_concept(c)
        if norm and norm not in seen:
            seen.add(norm)
            out.append(norm)
    return out


def extract_rule_based(caption: Caption, stoplist: frozenset[str] | None = None,
                       verb_list: frozenset[str] | None = None) -> ConceptSet:
    """Maximal runs of adjacent content words become phrases.

    Dropped words and punctuation both end a run, so comma-separated lists
    stay separate concepts.
    """
    stoplist = load_stoplist() if stoplist is None else stoplist
    verb_list = load_verbs() if verb_list is None else verb_list
    phrases, run = [], []
    for tok in _TOKEN_RE.findall(caption.text.lower()):
        word = tok.replace("'", "")
        if not word or not word[0].isalnum() or word in stoplist or word in verb_list:
            if run:
                phrases.append(" ".join(run))
                run = []
            continue
        run.append(word)
    if run:
        phrases.append(" ".join(run))
    return ConceptSet(caption.video_id, dedup(phrases), source="rule")


# --------------------------------------------------------------------------
# external LLM client
# --------------------------------------------------------------------------

PROMPT_TEMPLATE = (
    "You are given a description of a video. List the words or phrases in the "
    "description that each refer to one specific entity (object, person, animal "
    "or place) visible in the video. Do not include repetitive objects: an entity "
    "mentioned several times is listed once. Do not include actions or "
    "attributes on their own. Answer with a JSON array of strings and nothing "
    "else.\n\nDescription: {caption}"
)


@dataclass
class ClientConfig:
    url: str
    key: str
    model: str = "gpt-4"
    timeout: float = 30.0
    attempts: int = 3
    backoff: float = 1.0

    @classmethod
    def from_env(cls, model: str = "gpt-4") -> "ClientConfig":
        url, key = os.environ.get("DISCO_LLM_URL"), os.environ.get("DISCO_LLM_KEY")
        if not url or not key:
            raise ConfigError("DISCO_LLM_URL and DISCO_LLM_KEY must be set for external extraction")
        return cls(url=url, key=key, model=model)


def _urllib_post(url: str, headers: dict[str, str], body: bytes, timeout: float) -> str:
    req = urllib.request.Request(url, data=body, headers=headers, method="POST")
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return resp.read().decode("utf-8")


def parse_completion(raw: str) -> list[str]:
    """Pull a JSON string array out of a response body.

    Accepts a bare array, ``{"completion": "<array>"}``, or an OpenAI-style
    ``choices`` payload whose text is the array.
    """
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"response is not JSON: {exc}", raw) from None
    if isinstance(payload, dict):
        text = payload.get("completion")
        if text is None and payload.get("choices"):
            choice = payload["choices"][0]
            text = choice.get("text") or (choice.get("message") or {}).get("content")
        if not isinstance(text, str):
            raise ParseError("no completion text in response", raw)
        try:
            payload = json.loads(text)
        except json.JSONDecodeError:
            raise ParseError("completion is not a JSON array", raw) from None
    if not isinstance(payload, list) or not all(isinstance(x, str) for x in payload):
        raise ParseError("expected a JSON array of strings", raw)
    return payload


def extract_via_client(caption: Caption, config: ClientConfig,
                       post: Callable[[str, dict, bytes, float], str] | None = None,
                       sleep: Callable[[float], None] = time.sleep) -> ConceptSet:
    post = post or _urllib_post
    body = json.dumps({
        "model": config.model,
        "prompt": PROMPT_TEMPLATE.format(caption=caption.text),
    }).encode("utf-8")
    headers = {
        "Content-Type": "application/json",
        "Authorization": f"Bearer {config.key}",
    }
    last_error: Exception | None = None
    for attempt in range(config.attempts):
        try:
            raw = post(config.url, headers, body, config.timeout)
            break
        except (urllib.error.URLError, OSError, TransportError) as exc:
            last_error = exc
            if attempt + 1 < config.attempts:
                sleep(config.backoff * 2**attempt)
    else:
        raise TransportError(
            f"extraction request failed after {config.attempts} attempts: {last_error}"
        )
    return ConceptSet(caption.video_id, dedup(parse_completion(raw)), source="external")


# --------------------------------------------------------------------------
# embedder
# --------------------------------------------------------------------------


def fnv1a_64(text: str, seed: int = 0) -> int:
    h = (_FNV_OFFSET ^ (seed & _MASK64)) & _MASK64
    for b in text.encode("utf-8"):
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return h


@dataclass
class EmbedderParams:
    width: int
    buckets: int = 1024
    hash_seed: int = 0
    projection: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.buckets < 64:
            raise ConfigError("embedder needs at least 64 hash buckets")
        if self.projection is None:
            rng = np.random.default_rng([self.hash_seed, 7])
            self.projection = rng.standard_normal((self.buckets, self.width))
        if self.projection.shape != (self.buckets, self.width):
            raise ConfigError(f"projection must be {(self.buckets, self.width)}")


def bucket_counts(concepts: Sequence[str], buckets: int, seed: int = 0) -> np.ndarray:
    """(M, B) bag-of-hashed-tokens count matrix."""
    counts = np.zeros((len(concepts), buckets))
    for row, phrase in enumerate(concepts):
        for tok in phrase.split():
            counts[row, fnv1a_64(tok, seed) % buckets] += 1.0
    return counts


def embed_concepts(concepts: Sequence[str], params: EmbedderParams,
                   graph: Graph | None = None, projection: Tensor | None = None):
    """Unit-norm concept embeddings, (M, c).

    With ``graph`` the result is a graph tensor differentiable in the
    projection (``projection`` may pass an already-bound parameter);
    without it a plain array is returned.
    """
    counts = bucket_counts(concepts, params.buckets, params.hash_seed)
    if graph is None:
        g = Graph()
        return g.l2_normalize(g.matmul(counts, params.projection)).value
    proj = projection if projection is not None else graph.param("embedder.projection", params.projection)
    return graph.l2_normalize(graph.matmul(counts, proj))


# --------------------------------------------------------------------------
# concept JSONL files
# --------------------------------------------------------------------------


def write_concept_file(path, rows: Iterable[tuple[str, str, Sequence[str]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for vid, caption, concepts in rows:
            fh.write(json.dumps({"id": vid, "caption": caption, "concepts": list(concepts)}) + "\n")


def read_concept_file(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out
