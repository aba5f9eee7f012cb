"""End-to-end build, query and evaluation on top of the library modules."""

from __future__ import annotations

import json
import logging
import shutil
import tempfile
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .entropy import EntropyParams, S2Entropy, entropy_breakdown, select_bandwidth
from .graph import TextualAttributedGraph
from .index import IndexBundle, build_index, embed_tree, load_index, save_index, summarize_tree
from .providers import (
    Embedder,
    EmbedderSpec,
    HttpModelClient,
    HttpSettings,
    Summarizer,
    SummarizerSpec,
)
from .retrieval import answer_query, count_tokens, retrieve, textualize
from .tree import SolverConfig, build_encoding_tree

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class BuildConfig:
    levels: int = 3
    lam: float = 1.0
    bandwidth: float | str = "auto"
    k: int = 6
    embedder: EmbedderSpec = field(default_factory=EmbedderSpec)
    summarizer: SummarizerSpec = field(default_factory=SummarizerSpec)
    exact_threshold: int = 12
    subsample_cap: int | None = 2048
    seed: int = 42
    ann: bool = False
    threads: int = 1
    timeout: float = 30.0
    max_attempts: int = 3

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.bandwidth != "auto" and not float(self.bandwidth) > 0:
            raise ValueError(f"bandwidth must be > 0 or 'auto', got {self.bandwidth}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.timeout <= 0 or self.max_attempts < 1:
            raise ValueError("timeout must be > 0 and max_attempts >= 1")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["embedder"] = self.embedder.to_dict()
        out["summarizer"] = self.summarizer.to_dict()
        return out


def _client(endpoint: str | None, **overrides) -> HttpModelClient:
    settings = replace(HttpSettings(), **overrides)
    if endpoint:
        settings = replace(settings, api_base=endpoint)
    return HttpModelClient(settings)


def make_embedder(spec: EmbedderSpec, **http) -> Embedder:
    """``http`` keyword overrides (timeout, max_attempts, ...) apply to HTTP mode only."""
    return Embedder(spec, _client(spec.endpoint, **http) if spec.kind == "http" else None)


def make_summarizer(spec: SummarizerSpec, **http) -> Summarizer:
    return Summarizer(spec, _client(spec.endpoint, **http) if spec.kind == "http" else None)


@dataclass
class BuildResult:
    bundle: IndexBundle
    report: dict


def build(g: TextualAttributedGraph, config: BuildConfig, embedder=None, summarizer=None) -> BuildResult:
    """Embed nodes, build the tree, summarize and embed tree nodes."""
    http = {"timeout": config.timeout, "max_attempts": config.max_attempts}
    embedder = embedder or make_embedder(config.embedder, **http)
    summarizer = summarizer or make_summarizer(config.summarizer, **http)
    timings = {}

    t0 = time.perf_counter()
    try:
        node_emb = np.asarray(embedder(list(g.texts)), dtype=np.float64)
    except Exception as exc:
        raise StageError("embedding", exc) from exc
    if config.bandwidth == "auto":
        h = select_bandwidth(node_emb, cap=config.subsample_cap, seed=config.seed)
    else:
        h = float(config.bandwidth)
    timings["embedding"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    params = EntropyParams(lam=config.lam, bandwidth=h, subsample_cap=config.subsample_cap, seed=config.seed)
    try:
        model = S2Entropy(g, node_emb, params)
        tree = build_encoding_tree(
            g, node_emb, params, config.levels, SolverConfig(exact_threshold=config.exact_threshold, seed=config.seed),
            model=model,
        )
    except Exception as exc:
        raise StageError("partitioning", exc) from exc
    timings["partitioning"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        summaries = summarize_tree(tree, g, summarizer, threads=config.threads)
        tree_emb = embed_tree(summaries, embedder)
        index = build_index(tree, summaries, tree_emb, ann=config.ann, seed=config.seed)
    except Exception as exc:
        raise StageError("summarization", exc) from exc
    timings["summarization_indexing"] = time.perf_counter() - t0

    manifest = {
        "params": {
            "levels": config.levels,
            "lambda": config.lam,
            "bandwidth": h,
            "bandwidth_mode": "auto" if config.bandwidth == "auto" else "fixed",
            "k": config.k,
            "exact_threshold": config.exact_threshold,
            "subsample_cap": config.subsample_cap,
            "seed": config.seed,
        },
        "embedder": {**config.embedder.to_dict(), "provider_id": config.embedder.provider_id},
        "summarizer": {**config.summarizer.to_dict(), "provider_id": config.summarizer.provider_id},
    }
    bundle = IndexBundle(index, tree, summaries, g, manifest)
    levels = {str(d): len(tree.level(d)) for d in range(tree.height + 1)}
    report = {
        "timings_s": timings,
        "entropy": entropy_breakdown(tree, model),
        "tree": {
            "nodes": len(tree),
            "height": tree.height,
            "nodes_per_level": levels,
            "pass_through": sum(tree.is_pass_through(i) for i in tree.nodes),
        },
        "bandwidth": h,
        "graph": {"nodes": g.n, "edges": g.m},
    }
    return BuildResult(bundle, report)


def write_bundle(bundle: IndexBundle, out: str | Path) -> Path:
    """Write atomically: stage in a sibling temp dir, then swap into place."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        save_index(bundle.index, bundle.tree, bundle.summaries, bundle.graph, tmp, bundle.manifest)
        if out.exists():
            shutil.rmtree(out)
        tmp.rename(out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out


def spec_from_manifest(manifest: dict) -> EmbedderSpec:
    fields = {k: v for k, v in manifest["embedder"].items() if k != "provider_id"}
    return EmbedderSpec(**fields)


class QueryEngine:
    """A loaded index plus the embedder that built it."""

    def __init__(self, bundle: IndexBundle, embedder=None, chat=None, chat_id: str | None = None):
        self.bundle = bundle
        self.embedder = embedder or make_embedder(spec_from_manifest(bundle.manifest))
        self.chat = chat
        self.chat_id = chat_id
        self.full_graph_tokens = count_tokens(textualize(bundle.graph))

    @classmethod
    def open(cls, directory: str | Path, embedder_spec: EmbedderSpec | None = None, **kw) -> "QueryEngine":
        bundle = load_index(directory)
        built = spec_from_manifest(bundle.manifest)
        if embedder_spec is not None and embedder_spec.provider_id != built.provider_id:
            raise ValueError(
                f"embedder mismatch: index built with {built.provider_id}, query uses {embedder_spec.provider_id}"
            )
        return cls(bundle, **kw)

    def embed(self, text: str) -> np.ndarray:
        return np.asarray(self.embedder([text]), dtype=np.float64)[0]

    def query(self, text: str, k: int = 6, answer: bool = False):
        result = retrieve(self.bundle, self.embed(text), k, full_graph_tokens=self.full_graph_tokens)
        ans = None
        if answer:
            if self.chat is None:
                raise ValueError("--answer needs a chat provider (set TRET_API_BASE and TRET_API_KEY)")
            ans = answer_query(text, result, self.chat, self.chat_id)
        return result, ans


def read_qa(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                q = rec["q"]
                answers = rec["answers"]
                if not isinstance(q, str) or not isinstance(answers, list) or not answers:
                    raise ValueError("need a string 'q' and a nonempty list 'answers'")
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"qa line {lineno}: malformed ({exc})") from None
            rows.append({"q": q, "answers": [str(a) for a in answers]})
    if not rows:
        raise ValueError(f"qa file {path} has no questions")
    return rows


def _match(text: str, answers: list[str], mode: str) -> bool:
    if mode == "exact":
        return text.strip() in {a.strip() for a in answers}
    low = text.lower()
    return any(a.lower() in low for a in answers)


def _retrieved(result, answers: list[str], mode: str) -> bool:
    if mode == "contains":
        return _match(result.textualization, answers, mode)
    texts = set(result.union_subgraph.texts)
    return any(a.strip() in texts for a in answers)


def evaluate(engine: QueryEngine, qa: list[dict], k: int = 6, mode: str = "contains", answer: bool = False) -> dict:
    """Accuracy of the retrieved context (and of answers when a chat model is set)."""
    if mode not in ("contains", "exact"):
        raise ValueError(f"unknown match mode {mode!r}")
    per_query = []
    for row in qa:
        result, ans = engine.query(row["q"], k, answer=answer)
        rec = {
            "q": row["q"],
            "retrieval_correct": _retrieved(result, row["answers"], mode),
            "tokens": dict(result.token_counts),
        }
        if ans is not None:
            rec["answer"] = ans.text
            rec["answer_correct"] = _match(ans.text, row["answers"], mode)
        per_query.append(rec)
    ratios = [r["tokens"]["context"] / r["tokens"]["full_graph"] for r in per_query]
    report = {
        "questions": len(per_query),
        "k": k,
        "mode": mode,
        "retrieval_accuracy": float(np.mean([r["retrieval_correct"] for r in per_query])),
        "mean_context_tokens": float(np.mean([r["tokens"]["context"] for r in per_query])),
        "full_graph_tokens": engine.full_graph_tokens,
        "mean_context_ratio": float(np.mean(ratios)),
        "mean_context_reduction": float(1 - np.mean(ratios)),
        "per_query": per_query,
    }
    if answer:
        report["answer_accuracy"] = float(np.mean([r["answer_correct"] for r in per_query]))
    return report
