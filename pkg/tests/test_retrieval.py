import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s2index.entropy import EntropyParams
from s2index.graph import TextualAttributedGraph
from s2index.index import IndexBundle, TreeIndex, build_index, embed_tree, summarize_tree
from s2index.providers import EmbedderSpec, Summarizer, SummarizerSpec, hash_embed
from s2index.retrieval import (
    Hit,
    answer_query,
    count_tokens,
    extract_union_subgraph,
    retrieve,
    textualize,
    top_k_nodes,
)
from s2index.testkit import gen_planted, tree_from_nested
from s2index.tree import build_encoding_tree


def toy_index():
    vecs = np.array([[1, 0, 0], [0.6, 0.8, 0], [0, 1, 0], [0, 0.6, 0.8], [0.6, 0.8, 0]], dtype=np.float32)
    return TreeIndex(np.arange(5), vecs, np.array([0, 1, 1, 2, 2]))


def test_top_k_toy_index_matches_full_scan():
    index = toy_index()
    q = np.array([0.8, 0.6, 0.0])
    hits = top_k_nodes(index, q, 3)
    naive = sorted(range(5), key=lambda i: (-float(index.embeddings[i] @ q), i))[:3]
    assert [h.id for h in hits] == naive
    assert hits[0].id == 1 and hits[1].id == 4  # tie on similarity, smaller id first
    assert [h.level for h in hits] == [int(index.levels[i]) for i in naive]


def test_top_k_trivia():
    index = toy_index()
    assert len(top_k_nodes(index, np.array([0, 0, 1.0]), 50)) == 5
    first = top_k_nodes(index, index.embeddings[3].astype(float), 1)[0]
    assert first.id == 3 and first.sim == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(ValueError, match="k must be"):
        top_k_nodes(index, np.array([1.0, 0, 0]), 0)
    with pytest.raises(ValueError, match="empty index"):
        top_k_nodes(TreeIndex(np.arange(0), np.zeros((0, 3), np.float32), np.arange(0)), np.array([1.0, 0, 0]), 1)


def test_union_examples(bridge):
    tree = tree_from_nested(bridge, [["a", "b", "c"], ["d", "e", "f"]])
    assert extract_union_subgraph(tree, bridge, [tree.root]) == bridge
    abc, def_ = tree[tree.root].children
    leaf_a, leaf_d = tree[abc].children[0], tree[def_].children[0]
    two = extract_union_subgraph(tree, bridge, [leaf_a, leaf_d])
    assert (two.n, two.m) == (2, 0)
    both = extract_union_subgraph(tree, bridge, [Hit(abc, 1, 0.5), Hit(def_, 1, 0.4)])
    assert (both.n, both.m) == (6, 6)
    assert ("c", "d") not in {(both.ids[i], both.ids[j]) for i, j in both.edges}


def test_textualize_examples(triangle, bridge):
    one = TextualAttributedGraph([("a", "red apple")], [])
    assert textualize(one) == "node a: red apple"
    shuffled = TextualAttributedGraph(
        [("c", "yellow lemon"), ("a", "red apple"), ("b", "green pear")],
        [("c", "a", "rivals"), ("c", "b", None), ("b", "a", "next to")],
    )
    assert textualize(shuffled) == textualize(triangle) == "\n".join(
        [
            "node a: red apple",
            "node b: green pear",
            "node c: yellow lemon",
            "edge a -- b: next to",
            "edge a -- c: rivals",
            "edge b -- c: -",
        ]
    )
    with pytest.raises(ValueError):
        textualize(TextualAttributedGraph([], []))


def test_answer_offline_and_echo(bridge, bridge_emb):
    bundle = _bundle(bridge, bridge_emb)
    q = hash_embed(["text a"], EmbedderSpec())[0]
    result = retrieve(bundle, q, k=2)
    offline = answer_query("what is a?", result)
    assert offline.text == ""
    assert offline.prompt == f"Context:\n{result.textualization}\n\nQuestion: what is a?\nAnswer:"
    echoed = answer_query("what is a?", result, chat=lambda p: "ECHO " + p, provider_id="mock")
    assert result.textualization in echoed.text and echoed.provider == "mock"


def _bundle(g, z, L=2, lam=0.0):
    tree = build_encoding_tree(g, z, EntropyParams(lam=lam, bandwidth=0.4), L)
    summaries = summarize_tree(tree, g, Summarizer(SummarizerSpec()))
    emb = embed_tree(summaries, lambda t: hash_embed(t, EmbedderSpec()))
    return IndexBundle(build_index(tree, summaries, emb), tree, summaries, g, {})


def test_query_equal_to_leaf_text_ranks_leaf_first(bridge, bridge_emb):
    bundle = _bundle(bridge, bridge_emb)
    result = retrieve(bundle, hash_embed(["text e"], EmbedderSpec())[0], k=1)
    hit = bundle.tree[result.hits[0].id]
    assert result.hits[0].sim == pytest.approx(1.0, abs=1e-6)
    assert [bridge.ids[i] for i in hit.members] == ["e"]


@pytest.fixture(scope="module")
def planted_bundle():
    inst = gen_planted("sbm", n=80, seed=4, blocks=4)
    z = hash_embed(list(inst.graph.texts), EmbedderSpec())
    return _bundle(inst.graph, z, L=3, lam=1.0), inst


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 79), st.integers(1, 12))
def test_retrieval_properties(planted_bundle, node, k):
    bundle, inst = planted_bundle
    q = hash_embed([inst.graph.texts[node].rsplit(" ", 1)[0]], EmbedderSpec())[0]
    result = retrieve(bundle, q, k)
    sims = [h.sim for h in result.hits]
    assert len(result.hits) == min(k, len(bundle.index))
    assert all(a >= b for a, b in zip(sims, sims[1:]))
    clusters = [set(bundle.tree[h.id].members.tolist()) for h in result.hits]
    sub = result.union_subgraph
    assert {inst.graph.index_of(v) for v in sub.ids} == set().union(*clusters)
    for i, j in sub.edges:
        a, b = inst.graph.index_of(sub.ids[i]), inst.graph.index_of(sub.ids[j])
        assert any(a in c and b in c for c in clusters)
    tokens = result.token_counts
    assert tokens["context"] == count_tokens(result.textualization)
    assert tokens["context"] <= tokens["full_graph"]
    if bundle.tree.root not in [h.id for h in result.hits] and sub.n < inst.graph.n:
        assert tokens["context"] < tokens["full_graph"]
    again = retrieve(bundle, q, k)
    assert again.to_dict() == result.to_dict()


def test_result_json_shape(planted_bundle):
    bundle, inst = planted_bundle
    d = retrieve(bundle, hash_embed(["topic1"], EmbedderSpec())[0], 3).to_dict("x")
    assert set(d) == {"hits", "nodes", "edges", "textualization", "tokens", "answer"}
    assert set(d["hits"][0]) == {"id", "level", "sim"}
    assert set(d["tokens"]) == {"context", "full_graph"}
