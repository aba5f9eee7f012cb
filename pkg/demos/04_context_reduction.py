# %% [markdown]
# # How much text does retrieval hand over?
#
# Build an index over a 400-node graph, issue partial-text queries and compare
# the retrieved context size with the textualized full graph.

# %%
import numpy as np

from s2index import BuildConfig, QueryEngine, build
from s2index.testkit import gen_planted

inst = gen_planted("sbm", n=400, seed=8, blocks=8, p_in=0.1, p_out=0.004)
engine = QueryEngine(build(inst.graph, BuildConfig(levels=3, bandwidth=1.6)).bundle)
print("full graph tokens:", engine.full_graph_tokens)

# %%
rng = np.random.default_rng(0)
ratios = []
for i in rng.choice(inst.graph.n, size=30, replace=False):
    words = inst.graph.texts[i].split()
    res, _ = engine.query(" ".join(words[:3]), k=6)
    ratios.append(res.token_counts["context"] / res.token_counts["full_graph"])
ratios = np.array(ratios)

# %%
print(f"mean context ratio {ratios.mean():.3f}, median {np.median(ratios):.3f}, max {ratios.max():.3f}")
print(f"queries under half the graph: {(ratios < 0.5).mean():.0%}")
