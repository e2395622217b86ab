"""Token merging and one-to-one token matching, step by step.

Run: python demos/merge_and_match.py
"""
import numpy as np

from mlip import align
from mlip.merge import (bipartite_soft_match, merge_count, merge_diagnostics, merge_tokens,
                        rank_by_class_attention)
from mlip.tensor import Tensor
from mlip.tokens import TokenSet

rng = np.random.default_rng(1)

# 16 image tokens plus a class token at the end
tokens = rng.standard_normal((1, 17, 8))
ts = TokenSet.fresh(Tensor(tokens), cls_index=16)
print("tokens before:", ts.count, "mergeable:", ts.mergeable_count)

# pretend class attention; the least attended tokens get merged
attn = rng.random((1, 17))
C = merge_count(16, 0.75)
sel = rank_by_class_attention(attn, 0.75, 16, cls_index=16)
print("merge count C =", C, "| candidates (lowest ranked 2C):", sel[0])

plan = bipartite_soft_match(ts, sel)
merged = merge_tokens(ts, plan)
stats = merge_diagnostics(ts, merged, 0.75)
print("tokens after:", merged.count, "removed:", stats.removed)
print("size weights now:", merged.sizes[0])
print("size drift %.1e, weighted centroid drift %.1e" % (stats.size_drift, stats.centroid_drift))

# Kuhn-Munkres on a text x spatial cosine matrix, padded to square
b = rng.standard_normal((3, 6))  # 3 text tokens
c = rng.standard_normal((5, 6))  # 5 spatial tokens
wm = align.build_weight_matrix(Tensor(b), Tensor(c))
print("\nweight matrix (padded to %d):" % wm.size)
print(np.round(wm.values.data, 3))

km = align.km_match(wm)
brute = align.brute_force_assignment(wm.values.data)
print("km matching:", km.match, "total %.6f" % km.total)
print("brute force:", brute.match, "total %.6f" % brute.total)

# scaling the weights by a positive constant does not change the matching
print("x1000 same matching:", (align.km_match(wm.values.data * 1000).match == km.match).all())

loss = align.one_to_one_loss([wm], [km])
print("one-to-one loss: %.4f" % float(loss.data))
