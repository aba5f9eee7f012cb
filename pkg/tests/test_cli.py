import json

import numpy as np
import pytest

from s2index.cli import main, read_config
from s2index.pipeline import BuildConfig, QueryEngine, build, evaluate, read_qa, write_bundle
from s2index.providers import EmbedderSpec


@pytest.fixture
def bridge_file(tmp_path, bridge):
    path = tmp_path / "bridge.jsonl"
    bridge.save(path)
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_build_bridge_fixture(tmp_path, bridge_file, capsys):
    code, out, err = run(capsys, "build", bridge_file, "-o", tmp_path / "idx", "-L", 2, "--lambda", 0, "--bandwidth", 0.4)
    assert code == 0, err
    report = json.loads(out)
    assert report["tree"]["nodes"] == 9
    assert set(report["timings_s"]) == {"embedding", "partitioning", "summarization_indexing"}
    assert report["entropy"]["structural"] == pytest.approx(1.6995, abs=1e-4)
    tree = json.loads((tmp_path / "idx" / "tree.json").read_text())
    assert len(tree["nodes"]) == 9 and tree["L"] == 2
    assert all(n["depth"] == 2 for n in tree["nodes"] if "leaf_member" in n)


def test_build_is_reproducible(tmp_path, bridge_file, capsys):
    for name in ("one", "two"):
        assert run(capsys, "build", bridge_file, "-o", tmp_path / name)[0] == 0
    for f in ("graph.jsonl", "tree.json", "summaries.jsonl", "embeddings.bin"):
        assert (tmp_path / "one" / f).read_bytes() == (tmp_path / "two" / f).read_bytes()
    m1, m2 = (json.loads((tmp_path / n / "manifest.json").read_text()) for n in ("one", "two"))
    m1.pop("created")
    m2.pop("created")
    assert m1 == m2


def test_negative_lambda_is_a_usage_error(tmp_path, bridge_file, capsys):
    code, out, err = run(capsys, "build", bridge_file, "-o", tmp_path / "idx", "--lambda", -1)
    assert code == 2
    assert err.startswith("error[usage]:") and err.count("\n") == 1
    assert not (tmp_path / "idx").exists()


def test_bad_graph_is_a_data_error(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"kind":"node","id":"a"}\n{"kind":"edge","src":"a","dst":"zz"}\n')
    code, _, err = run(capsys, "build", bad, "-o", tmp_path / "idx")
    assert code == 3 and "unknown endpoint" in err
    code, _, err = run(capsys, "build", tmp_path / "nope.jsonl", "-o", tmp_path / "idx")
    assert code == 3


def test_config_file_and_flag_precedence(tmp_path, bridge_file, capsys):
    cfg = tmp_path / "build.cfg"
    cfg.write_text("# settings\nlevels = 2\nlambda-x = 1\n")
    code, _, err = run(capsys, "build", bridge_file, "-o", tmp_path / "idx", "--config", cfg)
    assert code == 2 and "unknown key" in err
    cfg.write_text("levels = 2\nlam = 0\nbandwidth = 0.4  # fixed\n")
    assert read_config(cfg) == {"levels": "2", "lam": "0", "bandwidth": "0.4"}
    code, out, _ = run(capsys, "build", bridge_file, "-o", tmp_path / "idx", "--config", cfg, "-L", 1)
    assert code == 0
    manifest = json.loads((tmp_path / "idx" / "manifest.json").read_text())
    assert manifest["params"]["levels"] == 1
    assert manifest["params"]["lambda"] == 0.0 and manifest["params"]["bandwidth"] == 0.4


@pytest.fixture
def index_dir(tmp_path, bridge_file, capsys):
    assert run(capsys, "build", bridge_file, "-o", tmp_path / "idx", "-L", 2, "--lambda", 0, "--bandwidth", 0.4)[0] == 0
    return tmp_path / "idx"


def test_query_json(index_dir, capsys):
    code, out, _ = run(capsys, "query", index_dir, "text e", "-k", 3, "--json")
    assert code == 0
    res = json.loads(out)
    assert len(res["hits"]) == 3
    assert res["hits"][0]["sim"] == pytest.approx(1.0, abs=1e-6)
    assert res["answer"] is None
    assert "node e: text e" in res["textualization"]


def test_query_plain_and_errors(index_dir, tmp_path, capsys):
    code, out, _ = run(capsys, "query", index_dir, "text a", "-k", 2)
    assert code == 0 and out.startswith("hit ")
    assert run(capsys, "query", index_dir, "x", "-k", 0)[0] == 2
    code, _, err = run(capsys, "query", index_dir, "x", "--dim", 8)
    assert code == 3 and "embedder mismatch" in err
    code, _, err = run(capsys, "query", tmp_path / "missing", "x")
    assert code == 3 and err.startswith("error[data]")
    assert run(capsys, "frobnicate")[0] == 2


def test_answer_needs_chat_provider(index_dir, capsys, monkeypatch):
    monkeypatch.delenv("TRET_API_BASE", raising=False)
    monkeypatch.delenv("TRET_API_KEY", raising=False)
    code, _, err = run(capsys, "query", index_dir, "x", "--answer")
    assert code == 4 and err.startswith("error[provider]")


def test_answer_with_mock_chat(index_dir, capsys, monkeypatch, mock_server):
    monkeypatch.setenv("TRET_API_BASE", mock_server.url)
    monkeypatch.setenv("TRET_API_KEY", "k")
    code, out, _ = run(capsys, "query", index_dir, "text b", "-k", 1, "--json", "--answer")
    assert code == 0
    res = json.loads(out)
    assert res["answer"].startswith("ECHO Context:\n" + res["textualization"])


def test_eval_and_entropy(index_dir, tmp_path, capsys):
    qa = tmp_path / "qa.jsonl"
    qa.write_text(json.dumps({"q": "text a", "answers": ["text a"]}) + "\n" + json.dumps({"q": "text f", "answers": ["text f"]}) + "\n")
    code, out, _ = run(capsys, "eval", index_dir, qa, "-k", 1)
    assert code == 0
    report = json.loads(out)
    assert report["retrieval_accuracy"] == 1.0
    assert report["mean_context_ratio"] < 1
    code, out, _ = run(capsys, "eval", index_dir, qa, "-k", 1, "--mode", "exact")
    assert json.loads(out)["retrieval_accuracy"] == 1.0
    qa.write_text("")
    code, _, err = run(capsys, "eval", index_dir, qa)
    assert code == 3 and "no questions" in err
    qa.write_text('{"q": 3}\n')
    assert run(capsys, "eval", index_dir, qa)[0] == 3
    code, out, _ = run(capsys, "entropy", index_dir)
    assert code == 0 and json.loads(out)["total"] == pytest.approx(1.6995, abs=1e-4)


def test_gen_then_build_and_eval(tmp_path, capsys):
    code, out, _ = run(capsys, "gen", "-o", tmp_path / "inst", "-n", 60, "--questions", 5)
    assert code == 0
    for f in ("graph.jsonl", "embeddings.npy", "labels.json", "qa.jsonl"):
        assert (tmp_path / "inst" / f).exists()
    assert np.load(tmp_path / "inst" / "embeddings.npy").shape[0] == 60
    labels = json.loads((tmp_path / "inst" / "labels.json").read_text())
    assert len(labels["structural"]) == 60
    assert run(capsys, "build", tmp_path / "inst" / "graph.jsonl", "-o", tmp_path / "idx", "--bandwidth", 1.6)[0] == 0
    code, out, _ = run(capsys, "eval", tmp_path / "idx", tmp_path / "inst" / "qa.jsonl")
    report = json.loads(out)
    assert report["questions"] == 5 and report["retrieval_accuracy"] == 1.0


def test_http_build_against_mock(tmp_path, bridge_file, capsys, monkeypatch, mock_server):
    monkeypatch.setenv("TRET_API_KEY", "k")
    code, _, err = run(
        capsys, "build", bridge_file, "-o", tmp_path / "idx", "-L", 2, "--lambda", 0, "--bandwidth", 0.4,
        "--embedder", "http", "--dim", 4, "--summarizer", "http", "--endpoint", mock_server.url,
    )
    assert code == 0, err
    paths = {p for p, _, _ in mock_server.requests}
    assert paths == {"/embeddings", "/chat/completions"}
    manifest = json.loads((tmp_path / "idx" / "manifest.json").read_text())
    assert manifest["embedder"]["kind"] == "http"
    assert manifest["summarizer"]["prompt_version"] == "v1"


def test_provider_failure_during_build(tmp_path, bridge_file, capsys, monkeypatch, mock_server):
    monkeypatch.setenv("TRET_API_KEY", "k")
    mock_server.script.extend([(500, {})] * 3)
    code, _, err = run(
        capsys, "build", bridge_file, "-o", tmp_path / "idx", "--embedder", "http", "--dim", 4,
        "--endpoint", mock_server.url, "--max-attempts", 3,
    )
    assert code == 4 and "stage embedding" in err
    assert not (tmp_path / "idx").exists()
    assert not list(tmp_path.glob(".idx*"))


def test_library_pipeline(tmp_path, bridge):
    result = build(bridge, BuildConfig(levels=2, lam=0.0, bandwidth=0.4, ann=True))
    assert result.bundle.index.ann is not None
    out = write_bundle(result.bundle, tmp_path / "idx")
    engine = QueryEngine.open(out)
    res, ans = engine.query("text c", 2)
    assert ans is None and res.hits[0].sim == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(ValueError, match="embedder mismatch"):
        QueryEngine.open(out, embedder_spec=EmbedderSpec(dim=8))
    qa = tmp_path / "qa.jsonl"
    qa.write_text(json.dumps({"q": "text d", "answers": ["TEXT D"]}) + "\n")
    report = evaluate(engine, read_qa(qa), k=1)
    assert report["retrieval_accuracy"] == 1.0
    with pytest.raises(ValueError):
        BuildConfig(levels=0)
