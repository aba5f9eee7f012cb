# %% [markdown]
# # Quickstart
#
# Build a three-level index over a small planted graph with the offline hash
# embedder, then query it.

# %%
import tempfile
from pathlib import Path

import numpy as np

from s2index import BuildConfig, QueryEngine, build, load_index
from s2index.pipeline import write_bundle
from s2index.testkit import gen_planted

inst = gen_planted("sbm", n=200, seed=3, blocks=4, p_in=0.15, p_out=0.01)
g = inst.graph
print(f"{g.n} nodes, {g.m} edges")
print("sample text:", g.texts[0])

# %% [markdown]
# A fixed bandwidth keeps the build quick and gives clean top-level clusters
# with diffuse hash embeddings.

# %%
result = build(g, BuildConfig(levels=3, k=6, bandwidth=1.6))
report = result.report
print("timings (s):", {k: round(v, 3) for k, v in report["timings_s"].items()})
print("nodes per level:", report["tree"]["nodes_per_level"])

# %% [markdown]
# Write the index to disk and load it back. Loading checks the manifest,
# embedding header and file checksums.

# %%
out = Path(tempfile.mkdtemp()) / "index"
write_bundle(result.bundle, out)
print(sorted(p.name for p in out.iterdir()))
engine = QueryEngine(load_index(out))

# %%
for query in ["topic0 river stone", "topic2 falcon", "item17"]:
    res, _ = engine.query(query, k=4)
    ratio = res.token_counts["context"] / res.token_counts["full_graph"]
    print(f"{query!r}: {len(res.hits)} hits, context {res.token_counts['context']} tokens ({ratio:.1%} of graph)")
    print("  top hit:", res.hits[0].id, "level", res.hits[0].level, f"sim {res.hits[0].sim:.3f}")

# %%
res, _ = engine.query("topic1 item60", k=2)
print(res.textualization[:600])
