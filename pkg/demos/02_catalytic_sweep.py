# %% [markdown]
# # Semantic pull across a path
#
# Five nodes on a path where the two endpoints share an embedding. With
# structure alone the best root split cuts the path in the middle. As the
# semantic weight grows, the endpoints land on the same side and drag the
# interior nodes between them along.

# %%
from s2index.testkit import catalytic_sweep, path_instance

inst = path_instance()
print("pair:", inst.pair, "similarity", inst.similarity(), "hops", inst.geodesic())

# %%
report = catalytic_sweep(inst)
for row in report.rows:
    a, b = row.split
    flag = "together" if row.together else "apart"
    print(f"lambda={row.lam:5.2f}  {' '.join(a):>12} | {' '.join(b):<12} {flag:8} bridging={row.bridging}")

# %%
print("first lambda with the endpoints together:", report.lambda0)
print("stays together for larger lambda:", report.monotone)
