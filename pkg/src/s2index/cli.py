"""Command-line entry point: ``s2index {build,query,eval,entropy,gen}``.

Errors print one line ``error[<kind>]: <message>`` on stderr and exit with
2 (usage), 3 (data), 4 (provider) or 5 (internal).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .entropy import EntropyParams, S2Entropy, entropy_breakdown
from .graph import GraphError, load_graph
from .index import IndexFormatError, load_index
from .pipeline import (
    BuildConfig,
    QueryEngine,
    StageError,
    build,
    evaluate,
    make_embedder,
    read_qa,
    spec_from_manifest,
    write_bundle,
)
from .providers import EmbedderSpec, HttpModelClient, HttpSettings, ProviderError, SummarizerSpec
from .testkit import gen_planted

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PROVIDER, EXIT_INTERNAL = 0, 2, 3, 4, 5

# flag dest -> (type, default); the config file may set any of these
BUILD_OPTIONS = {
    "levels": (int, 3),
    "lam": (float, 1.0),
    "bandwidth": (str, "auto"),
    "k": (int, 6),
    "embedder": (str, "hash"),
    "dim": (int, 64),
    "embed_seed": (int, 0),
    "embed_model": (str, None),
    "summarizer": (str, "extractive"),
    "budget": (int, 64),
    "chat_model": (str, None),
    "endpoint": (str, None),
    "exact_threshold": (int, 12),
    "subsample_cap": (int, 2048),
    "seed": (int, 42),
    "threads": (int, 1),
    "ann": (bool, False),
    "timeout": (float, 30.0),
    "max_attempts": (int, 3),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def read_config(path: str | Path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; dashes and underscores are interchangeable."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in BUILD_OPTIONS:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        out[key] = value
    return out


def _coerce(key: str, value):
    kind, _ = BUILD_OPTIONS[key]
    if value is None or isinstance(value, kind):
        return value
    if kind is bool:
        low = str(value).lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise UsageError(f"{key}: expected a boolean, got {value!r}")
        return low in ("true", "1", "yes")
    try:
        return kind(value)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {value!r}") from None


def resolve_options(args: argparse.Namespace) -> dict:
    """Defaults, overridden by the config file, overridden by flags."""
    merged = {k: default for k, (_, default) in BUILD_OPTIONS.items()}
    if getattr(args, "config", None):
        merged.update(read_config(args.config))
    for key in BUILD_OPTIONS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return {k: _coerce(k, v) for k, v in merged.items()}


def config_from_options(opts: dict) -> BuildConfig:
    bw = opts["bandwidth"]
    if bw != "auto":
        try:
            bw = float(bw)
        except ValueError:
            raise UsageError(f"bandwidth must be a number or 'auto', got {bw!r}") from None
    try:
        return BuildConfig(
            levels=opts["levels"],
            lam=opts["lam"],
            bandwidth=bw,
            k=opts["k"],
            embedder=EmbedderSpec(
                kind=opts["embedder"], dim=opts["dim"], seed=opts["embed_seed"],
                endpoint=opts["endpoint"], model=opts["embed_model"],
            ),
            summarizer=SummarizerSpec(
                kind=opts["summarizer"], budget=opts["budget"], endpoint=opts["endpoint"], model=opts["chat_model"],
            ),
            exact_threshold=opts["exact_threshold"],
            subsample_cap=opts["subsample_cap"],
            seed=opts["seed"],
            ann=opts["ann"],
            threads=opts["threads"],
            timeout=opts["timeout"],
            max_attempts=opts["max_attempts"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _emit(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


# -- commands -----------------------------------------------------------------


def cmd_build(args) -> int:
    config = config_from_options(resolve_options(args))
    g = load_graph(args.graph)
    result = build(g, config)
    write_bundle(result.bundle, args.out)
    result.report["index"] = str(args.out)
    _emit(result.report, args.report)
    return EXIT_OK


def _chat_from_env(model: str | None):
    client = HttpModelClient(HttpSettings())
    return (lambda prompt: client.chat(prompt, model)), f"http/{model or client.settings.chat_model}"


def _engine(args) -> QueryEngine:
    bundle = load_index(args.index)
    built = spec_from_manifest(bundle.manifest)
    if args.embedder is not None or args.dim is not None:
        asked = EmbedderSpec(
            kind=args.embedder or built.kind, dim=args.dim or built.dim, seed=built.seed,
            endpoint=built.endpoint, model=built.model,
        )
        if asked.provider_id != built.provider_id:
            raise ValueError(f"embedder mismatch: index built with {built.provider_id}, requested {asked.provider_id}")
    chat = chat_id = None
    if getattr(args, "answer", False):
        chat, chat_id = _chat_from_env(args.chat_model)
    return QueryEngine(bundle, make_embedder(built), chat=chat, chat_id=chat_id)


def cmd_query(args) -> int:
    if args.k < 1:
        raise UsageError("k must be >= 1")
    engine = _engine(args)
    result, ans = engine.query(args.query, args.k, answer=args.answer)
    if args.json:
        print(json.dumps(result.to_dict(None if ans is None else ans.text), sort_keys=True))
    else:
        for h in result.hits:
            print(f"hit {h.id} level={h.level} sim={h.sim:.4f}")
        print(f"tokens context={result.token_counts['context']} full_graph={result.token_counts['full_graph']}")
        print(result.textualization)
        if ans is not None:
            print(f"answer: {ans.text}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.k < 1:
        raise UsageError("k must be >= 1")
    qa = read_qa(args.qa)
    engine = _engine(args)
    report = evaluate(engine, qa, args.k, mode=args.mode, answer=args.answer)
    _emit(report, args.report)
    return EXIT_OK


def cmd_entropy(args) -> int:
    bundle = load_index(args.index)
    params = bundle.manifest["params"]
    lam = params["lambda"] if args.lam is None else args.lam
    h = params["bandwidth"] if args.bandwidth is None else args.bandwidth
    embedder = make_embedder(spec_from_manifest(bundle.manifest))
    z = np.asarray(embedder(list(bundle.graph.texts)), dtype=np.float64)
    model = S2Entropy(
        bundle.graph, z,
        EntropyParams(lam=lam, bandwidth=h, subsample_cap=params["subsample_cap"], seed=params["seed"]),
    )
    report = entropy_breakdown(bundle.tree, model)
    report["bandwidth"] = h
    _emit(report, args.report)
    return EXIT_OK


def cmd_gen(args) -> int:
    inst = gen_planted(
        args.kind, args.n, args.seed, args.layout,
        blocks=args.blocks, p_in=args.p_in, p_out=args.p_out, noise=args.noise, dim=args.gen_dim,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inst.graph.save(out / "graph.jsonl")
    np.save(out / "embeddings.npy", inst.embeddings)
    ids = list(inst.graph.ids)
    labels = {
        "structural": dict(zip(ids, inst.labels.tolist())),
        "semantic": dict(zip(ids, inst.semantic_labels.tolist())),
    }
    (out / "labels.json").write_text(json.dumps(labels, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    rng = np.random.default_rng(args.seed)
    with open(out / "qa.jsonl", "w", encoding="utf-8") as fh:
        for i in sorted(rng.choice(inst.graph.n, size=min(args.questions, inst.graph.n), replace=False)):
            text = inst.graph.texts[i]
            q = " ".join(text.split()[:-1])
            fh.write(json.dumps({"q": q, "answers": [text.split()[-1]]}) + "\n")
    print(json.dumps({"out": str(out), "nodes": inst.graph.n, "edges": inst.graph.m}))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def _add_index_query_flags(p):
    p.add_argument("index", help="index directory")
    p.add_argument("-k", type=int, default=6)
    p.add_argument("--answer", action="store_true", help="ask the chat model for an answer")
    p.add_argument("--chat-model", dest="chat_model")
    p.add_argument("--embedder", choices=["hash", "http"], help="must match the index")
    p.add_argument("--dim", type=int, help="must match the index")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="s2index", description="Entropy-guided hierarchical graph index for retrieval.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("build", help="build an index from a graph.jsonl")
    b.add_argument("graph")
    b.add_argument("-o", "--out", required=True)
    b.add_argument("--config", help="key = value file; flags override it")
    b.add_argument("--report", help="write the build report here instead of stdout")
    b.add_argument("-L", "--levels", type=int)
    b.add_argument("--lambda", dest="lam", type=float)
    b.add_argument("--bandwidth", help="positive number or 'auto'")
    b.add_argument("-k", type=int, help="default k recorded in the manifest")
    b.add_argument("--embedder", choices=["hash", "http"])
    b.add_argument("--dim", type=int)
    b.add_argument("--embed-seed", dest="embed_seed", type=int)
    b.add_argument("--embed-model", dest="embed_model")
    b.add_argument("--summarizer", choices=["extractive", "http"])
    b.add_argument("--budget", type=int)
    b.add_argument("--chat-model", dest="chat_model")
    b.add_argument("--endpoint")
    b.add_argument("--exact-threshold", dest="exact_threshold", type=int)
    b.add_argument("--subsample-cap", dest="subsample_cap", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--threads", type=int)
    b.add_argument("--ann", action="store_const", const=True)
    b.add_argument("--timeout", type=float, help="HTTP timeout in seconds")
    b.add_argument("--max-attempts", dest="max_attempts", type=int, help="HTTP attempts per request")
    b.set_defaults(func=cmd_build)

    q = sub.add_parser("query", help="retrieve context for a question")
    _add_index_query_flags(q)
    q.add_argument("query")
    q.add_argument("--json", action="store_true")
    q.set_defaults(func=cmd_query)

    e = sub.add_parser("eval", help="score retrieval on a qa.jsonl file")
    _add_index_query_flags(e)
    e.add_argument("qa")
    e.add_argument("--mode", choices=["contains", "exact"], default="contains")
    e.add_argument("--report")
    e.set_defaults(func=cmd_eval)

    t = sub.add_parser("entropy", help="entropy breakdown of an index's tree")
    t.add_argument("index")
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--bandwidth", type=float)
    t.add_argument("--report")
    t.set_defaults(func=cmd_entropy)

    gp = sub.add_parser("gen", help="write a synthetic planted instance")
    gp.add_argument("-o", "--out", required=True)
    gp.add_argument("--kind", choices=["sbm", "barbell", "path"], default="sbm")
    gp.add_argument("-n", type=int, default=200)
    gp.add_argument("--seed", type=int, default=42)
    gp.add_argument("--layout", default="aligned")
    gp.add_argument("--blocks", type=int, default=4)
    gp.add_argument("--p-in", dest="p_in", type=float, default=0.3)
    gp.add_argument("--p-out", dest="p_out", type=float, default=0.02)
    gp.add_argument("--noise", type=float, default=0.05)
    gp.add_argument("--dim", dest="gen_dim", type=int, default=16)
    gp.add_argument("--questions", type=int, default=20)
    gp.set_defaults(func=cmd_gen)
    return parser


def _cause_chain(exc: BaseException | None) -> list[BaseException]:
    out = []
    while exc is not None and exc not in out:
        out.append(exc)
        exc = exc.__cause__
    return out


def _fail(kind: str, code: int, message: str) -> int:
    print(f"error[{kind}]: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except StageError as exc:
        chain = _cause_chain(exc.cause)
        if any(isinstance(c, ProviderError) for c in chain):
            return _fail("provider", EXIT_PROVIDER, exc)
        if any(isinstance(c, ValueError) for c in chain):
            return _fail("data", EXIT_DATA, exc)
        return _fail("internal", EXIT_INTERNAL, exc)
    except ProviderError as exc:
        return _fail("provider", EXIT_PROVIDER, exc)
    except (GraphError, IndexFormatError, FileNotFoundError, ValueError) as exc:
        return _fail("data", EXIT_DATA, exc)
    except Exception as exc:  # pragma: no cover - last resort
        return _fail("internal", EXIT_INTERNAL, f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
