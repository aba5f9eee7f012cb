"""Text embedding, summarization and chat providers.

Offline providers are deterministic stand-ins: ``hash`` embeddings built from
FNV-1a token hashes expanded by splitmix64, and an extractive summarizer.
The HTTP providers speak the common JSON embeddings / chat-completions shape.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import asdict, dataclass, field

import httpx
import numpy as np

log = logging.getLogger(__name__)

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

SUMMARY_PROMPT_VERSION = "v1"
SUMMARY_PROMPT = (
    "Summarize the following cluster of a knowledge graph in at most 200 tokens. "
    "Preserve the named entities and the relationships between them.\n\n"
    "Nodes:\n{nodes}\n\nRelationships:\n{edges}\n\nSummary:"
)


class ProviderError(RuntimeError):
    """A model provider failed or returned an unusable response."""


@dataclass(frozen=True)
class EmbedderSpec:
    kind: str = "hash"
    dim: int = 64
    seed: int = 0
    endpoint: str | None = None
    model: str | None = None
    batch_size: int = 64

    def __post_init__(self):
        if self.kind not in ("hash", "http"):
            raise ValueError(f"unknown embedder kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError("embedding dim must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def provider_id(self) -> str:
        if self.kind == "hash":
            return f"hash-fnv1a-splitmix64/d{self.dim}/s{self.seed}"
        return f"http/{self.model}/d{self.dim}"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SummarizerSpec:
    kind: str = "extractive"
    budget: int = 64
    endpoint: str | None = None
    model: str | None = None
    prompt_version: str = SUMMARY_PROMPT_VERSION

    def __post_init__(self):
        if self.kind not in ("extractive", "http"):
            raise ValueError(f"unknown summarizer kind {self.kind!r}")
        if self.budget < 8:
            raise ValueError("summary budget must be >= 8 tokens")

    @property
    def provider_id(self) -> str:
        if self.kind == "extractive":
            return f"extractive/b{self.budget}"
        return f"http/{self.model}/prompt-{self.prompt_version}"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class HttpSettings:
    """Connection settings; defaults come from the TRET_* environment variables."""

    api_base: str | None = field(default_factory=lambda: os.environ.get("TRET_API_BASE"))
    api_key: str | None = field(default_factory=lambda: os.environ.get("TRET_API_KEY"), repr=False)
    embed_model: str | None = field(default_factory=lambda: os.environ.get("TRET_EMBED_MODEL"))
    chat_model: str | None = field(default_factory=lambda: os.environ.get("TRET_CHAT_MODEL"))
    timeout: float = 30.0
    max_attempts: int = 3
    backoff: float = 0.5


# -- hash embedder ---------------------------------------------------------


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & MASK64
    return h


def splitmix64_stream(state: int, count: int) -> np.ndarray:
    """``count`` successive splitmix64 outputs starting from ``state``."""
    steps = np.arange(1, count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(state) + steps * np.uint64(GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return z


def _token_vector(token: str, dim: int, seed: int) -> np.ndarray:
    h = fnv1a64(token.encode("utf-8")) ^ (seed & MASK64)
    bits = splitmix64_stream(h, dim) >> np.uint64(11)
    # 53-bit integers are exact in float64
    return bits.astype(np.float64) * (2.0 / (1 << 53)) - 1.0


def hash_embed(texts: list[str], spec: EmbedderSpec) -> np.ndarray:
    """Deterministic bag-of-token embeddings, one unit-norm row per text."""
    out = np.zeros((len(texts), spec.dim))
    cache: dict[str, np.ndarray] = {}
    for row, text in enumerate(texts):
        acc = np.zeros(spec.dim)
        for token in text.split():
            vec = cache.get(token)
            if vec is None:
                vec = cache[token] = _token_vector(token, spec.dim, spec.seed)
            acc += vec
        norm = np.linalg.norm(acc)
        if norm == 0:
            out[row, 0] = 1.0
        else:
            out[row] = acc / norm
    return out


# -- extractive summarizer -------------------------------------------------


def extractive_summarize(
    node_texts: list[tuple[str, str]],
    edge_texts: list[tuple[str, str, str | None]],
    budget: int = 64,
) -> str:
    """Canonical ``id: text; ...; edges: a--b: text; ...`` cut to ``budget`` tokens.

    At least the first token is always kept.
    """
    if not node_texts:
        raise ValueError("at least one node text is required")
    parts = [f"{v}: {t}" for v, t in sorted(node_texts)]
    text = "; ".join(parts)
    if edge_texts:
        canon = sorted((min(a, b), max(a, b), t) for a, b, t in edge_texts)
        edges = "; ".join(f"{a}--{b}: {t}" if t else f"{a}--{b}" for a, b, t in canon)
        text = f"{text}; edges: {edges}"
    tokens = text.split()
    return " ".join(tokens[: max(1, budget)])


# -- HTTP clients ----------------------------------------------------------


class HttpModelClient:
    """Minimal client for JSON embedding and chat-completion endpoints.

    Retries transient failures (connection errors, 429, 5xx) with exponential
    backoff; ``retries`` counts the retries performed so far.
    """

    def __init__(self, settings: HttpSettings | None = None, transport: httpx.BaseTransport | None = None):
        self.settings = settings or HttpSettings()
        if not self.settings.api_base:
            raise ProviderError("missing API base URL (set TRET_API_BASE)")
        if not self.settings.api_key:
            raise ProviderError("missing auth: set TRET_API_KEY")
        self.retries = 0
        self._client = httpx.Client(
            base_url=self.settings.api_base.rstrip("/"),
            timeout=self.settings.timeout,
            headers={"Authorization": f"Bearer {self.settings.api_key}"},
            transport=transport,
        )

    def close(self) -> None:
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _post(self, path: str, payload: dict) -> dict:
        s = self.settings
        last: Exception | None = None
        for attempt in range(s.max_attempts):
            if attempt:
                self.retries += 1
                time.sleep(s.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(path, json=payload)
            except httpx.TransportError as exc:
                last = exc
                log.warning("POST %s failed (%s), attempt %d", path, exc, attempt + 1)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = ProviderError(f"HTTP {resp.status_code} from {path}")
                log.warning("POST %s returned %d, attempt %d", path, resp.status_code, attempt + 1)
                continue
            if resp.status_code // 100 != 2:
                raise ProviderError(f"HTTP {resp.status_code} from {path}: {resp.text[:200]}")
            return resp.json()
        raise ProviderError(f"giving up after {s.max_attempts} attempts: {last}")

    def embed(self, texts: list[str], model: str | None = None) -> np.ndarray:
        model = model or self.settings.embed_model
        body = self._post("/embeddings", {"model": model, "input": list(texts)})
        data = sorted(body.get("data", []), key=lambda d: d.get("index", 0))
        if len(data) != len(texts):
            raise ProviderError(f"count mismatch: sent {len(texts)} texts, got {len(data)} vectors")
        rows = np.asarray([d["embedding"] for d in data], dtype=np.float64)
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        if (norms == 0).any():
            raise ProviderError("provider returned a zero vector")
        return rows / norms

    def chat(self, prompt: str, model: str | None = None) -> str:
        model = model or self.settings.chat_model
        body = self._post(
            "/chat/completions",
            {"model": model, "messages": [{"role": "user", "content": prompt}]},
        )
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ProviderError("malformed chat response") from None


def http_embed(texts: list[str], spec: EmbedderSpec, client: HttpModelClient) -> np.ndarray:
    out = []
    for start in range(0, len(texts), spec.batch_size):
        batch = texts[start : start + spec.batch_size]
        try:
            rows = client.embed(batch, spec.model)
        except ProviderError as exc:
            raise ProviderError(f"batch [{start}, {start + len(batch)}): {exc}") from exc
        if rows.shape[1] != spec.dim:
            raise ProviderError(f"dimension mismatch: expected {spec.dim}, got {rows.shape[1]}")
        out.append(rows)
    if not out:
        return np.zeros((0, spec.dim))
    return np.vstack(out)


def http_chat(prompt: str, client: HttpModelClient, model: str | None = None) -> str:
    return client.chat(prompt, model)


def http_summarize(
    node_texts: list[tuple[str, str]],
    edge_texts: list[tuple[str, str, str | None]],
    spec: SummarizerSpec,
    client: HttpModelClient,
) -> str:
    nodes = "\n".join(f"- {v}: {t}" for v, t in sorted(node_texts))
    edges = "\n".join(
        f"- {a} -- {b}: {t or '-'}" for a, b, t in sorted((min(a, b), max(a, b), t) for a, b, t in edge_texts)
    )
    return client.chat(SUMMARY_PROMPT.format(nodes=nodes, edges=edges or "- none"), spec.model).strip()


class Embedder:
    """Callable text embedder bound to a spec (and a client in HTTP mode)."""

    def __init__(self, spec: EmbedderSpec, client: HttpModelClient | None = None):
        self.spec = spec
        self.client = client
        if spec.kind == "http" and client is None:
            self.client = HttpModelClient()

    def __call__(self, texts: list[str]) -> np.ndarray:
        if self.spec.kind == "hash":
            return hash_embed(list(texts), self.spec)
        return http_embed(list(texts), self.spec, self.client)


class Summarizer:
    def __init__(self, spec: SummarizerSpec, client: HttpModelClient | None = None):
        self.spec = spec
        self.client = client
        if spec.kind == "http" and client is None:
            self.client = HttpModelClient()

    def __call__(self, node_texts, edge_texts) -> str:
        if self.spec.kind == "extractive":
            return extractive_summarize(node_texts, edge_texts, self.spec.budget)
        return http_summarize(node_texts, edge_texts, self.spec, self.client)
