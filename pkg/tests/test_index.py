import json
import struct

import numpy as np
import pytest

from s2index.entropy import EntropyParams
from s2index.graph import TextualAttributedGraph
from s2index.index import (
    IndexFormatError,
    IVFIndex,
    Summary,
    TreeIndex,
    attach_ann,
    build_index,
    embed_tree,
    exact_top_k,
    load_index,
    read_embeddings,
    save_index,
    summarize_node,
    summarize_tree,
    write_embeddings,
)
from s2index.providers import EmbedderSpec, Summarizer, SummarizerSpec, hash_embed
from s2index.testkit import tree_from_nested
from s2index.tree import build_encoding_tree

EMBED = EmbedderSpec(dim=32)


def embedder(texts):
    return hash_embed(texts, EMBED)


SUMMARIZE = Summarizer(SummarizerSpec())


@pytest.fixture
def built(bridge, bridge_emb):
    tree = build_encoding_tree(bridge, bridge_emb, EntropyParams(lam=0.0), 2)
    summaries = summarize_tree(tree, bridge, SUMMARIZE)
    index = build_index(tree, summaries, embed_tree(summaries, embedder))
    return tree, summaries, index


def test_leaf_and_pass_through_summaries(triangle):
    tree = tree_from_nested(triangle, [["a"], ["b", "c"]])
    leaf_parent = tree[tree.root].children[0]
    leaf = tree[leaf_parent].children[0]
    assert summarize_node(tree, leaf, triangle, SUMMARIZE) == Summary(leaf, "red apple", "leaf-passthrough")
    assert summarize_node(tree, leaf_parent, triangle, SUMMARIZE).text == "red apple"


def test_internal_summary_is_extractive(triangle):
    tree = tree_from_nested(triangle, [["a", "b"], ["c"]])
    ab = tree[tree.root].children[0]
    s = summarize_node(tree, ab, triangle, SUMMARIZE)
    assert s.text == "a: red apple; b: green pear; edges: a--b: next to"
    assert s.source == "generated" and s.token_count == 10


def test_summarizer_failure_names_node(triangle):
    tree = tree_from_nested(triangle, [["a", "b"], ["c"]])

    def broken(nodes, edges):
        raise RuntimeError("offline")

    with pytest.raises(RuntimeError, match="tree node 0"):
        summarize_tree(tree, triangle, broken)


def test_embed_tree_rows(built):
    tree, summaries, index = built
    assert len(index) == len(tree) == 9
    assert np.allclose(np.linalg.norm(index.embeddings, axis=1), 1.0, atol=1e-6)
    for s in summaries:
        node = tree[s.id]
        assert index.levels[s.id] == node.depth
        if tree.is_pass_through(s.id):
            child = node.children[0]
            assert np.array_equal(index.embeddings[s.id], index.embeddings[child])


def test_build_index_errors(built):
    tree, summaries, index = built
    with pytest.raises(ValueError, match="missing summary"):
        build_index(tree, summaries[:-1], index.embeddings[:-1])
    with pytest.raises(ValueError, match="dimension mismatch"):
        build_index(tree, summaries, index.embeddings[:-1])


def test_seven_node_tree_levels():
    g = TextualAttributedGraph([(v, v) for v in "abcd"], [("a", "b", None), ("c", "d", None), ("b", "c", None)])
    tree = tree_from_nested(g, [["a", "b"], ["c", "d"]]).canonicalize()
    tree.validate(4)
    summaries = summarize_tree(tree, g, SUMMARIZE)
    index = build_index(tree, summaries, embed_tree(summaries, embedder))
    assert len(index) == 7
    assert sorted(set(index.levels.tolist())) == [0, 1, 2]


def test_exact_scan_matches_naive_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((50, 8))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    q = x[7] + 0.1 * rng.standard_normal(8)
    ids, sims = exact_top_k(x, q, 5)
    naive = sorted(range(50), key=lambda i: (-float(x[i] @ q), i))[:5]
    assert ids.tolist() == naive


def test_ann_recall_on_ten_thousand_entries():
    rng = np.random.default_rng(1)
    centers = rng.standard_normal((100, 32))
    x = centers[rng.integers(0, 100, 10_000)] + 0.3 * rng.standard_normal((10_000, 32))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    index = TreeIndex(np.arange(10_000), x.astype(np.float32), np.zeros(10_000, dtype=np.int64))
    attach_ann(index, seed=3)
    assert index.ann_recall >= 0.95
    probes = x[rng.choice(10_000, 100, replace=False)] + 0.05 * rng.standard_normal((100, 32))
    assert index.ann.recall(probes, 10, index.ann.nprobe) >= 0.9


def test_ann_unreachable_recall_fails_build():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((400, 64))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    ivf = IVFIndex(x, nlist=20)
    with pytest.raises(RuntimeError, match="ANN recall"):
        ivf.calibrate(x[:20] + 0.5 * rng.standard_normal((20, 64)), target=1.01)


# -- persistence -----------------------------------------------------------------


def test_round_trip(tmp_path, bridge, built):
    tree, summaries, index = built
    save_index(index, tree, summaries, bridge, tmp_path / "idx", {"params": {"seed": 42}})
    bundle = load_index(tmp_path / "idx")
    assert np.array_equal(bundle.index.embeddings, index.embeddings)
    assert np.array_equal(bundle.index.ids, index.ids)
    assert np.array_equal(bundle.index.levels, index.levels)
    assert bundle.summaries == summaries
    assert bundle.tree.to_dict(bridge) == tree.to_dict(bridge)
    assert bundle.graph == bridge
    assert bundle.manifest["counts"]["tree_nodes"] == 9


def test_embedding_file_layout(tmp_path):
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_embeddings(tmp_path / "e.bin", x)
    raw = (tmp_path / "e.bin").read_bytes()
    assert raw[:4] == b"TRET"
    assert struct.unpack("<IIQ", raw[4:20]) == (1, 3, 2)
    assert np.frombuffer(raw[20:], "<f4").tolist() == list(range(6))
    assert np.array_equal(read_embeddings(tmp_path / "e.bin"), x)


@pytest.fixture
def saved(tmp_path, bridge, built):
    tree, summaries, index = built
    return save_index(index, tree, summaries, bridge, tmp_path / "idx")


def test_bad_magic(saved):
    path = saved / "embeddings.bin"
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(IndexFormatError, match="bad magic"):
        load_index(saved)


def test_manifest_dimension_mismatch(saved):
    manifest = json.loads((saved / "manifest.json").read_text())
    manifest["dim"] += 1
    (saved / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(IndexFormatError, match="dimension mismatch"):
        load_index(saved)


def test_truncated_embeddings(saved):
    path = saved / "embeddings.bin"
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(IndexFormatError, match="truncated"):
        load_index(saved)


def test_checksum_failure(saved):
    path = saved / "summaries.jsonl"
    path.write_text(path.read_text().replace("text a", "text z"))
    with pytest.raises(IndexFormatError, match="checksum failure"):
        load_index(saved)


def test_version_mismatch(saved):
    manifest = json.loads((saved / "manifest.json").read_text())
    manifest["manifest_version"] = 99
    (saved / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(IndexFormatError, match="version mismatch"):
        load_index(saved)
    path = saved / "embeddings.bin"
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(IndexFormatError, match="version mismatch"):
        read_embeddings(path)


def test_missing_index(tmp_path):
    with pytest.raises(IndexFormatError, match="manifest.json missing"):
        load_index(tmp_path)
