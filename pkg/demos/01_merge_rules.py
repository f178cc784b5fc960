"""Merge two cache entries three ways and watch the attention output.

A convex merge (the usual baseline) shrinks the merged entry's share of
attention. A ZIP merge with votes reproduces the output exactly under the
query whose scores it used, and drifts only slightly under later queries.
"""

import numpy as np

from kvlab.analysis import attention_sag_audit, merged_attention
from kvlab.attention import KvCache, attend, raw_scores
from kvlab.merging import MergeInputs, convex_merge, convex_weights_cosine, zip_merge

rng = np.random.default_rng(0)
d = 8
keys = rng.normal(size=(6, d))
values = rng.normal(size=(6, d))
keys[4] = keys[1] + 0.3 * rng.normal(size=d)  # entry 4 looks a lot like entry 1
cache = KvCache(d)
for k, v in zip(keys, values):
    cache.append(k, v)
q = rng.normal(size=d)
idx = [4, 1]  # evicted member first, retained target last
votes = np.ones(6, dtype=np.int64)
before = attend(cache, q)
print("attention on the pair before merging:", before.attention[idx].sum().round(4))

# convex merge with D2O-style cosine weights
w = convex_weights_cosine(MergeInputs.of(keys[idx], values[idx]))
merged, total, sag = attention_sag_audit(cache, idx, w, q)
k_c, v_c = convex_merge(MergeInputs.of(keys[idx], values[idx]), w)
_, _, _, after = merged_attention(keys, values, votes, idx, (k_c, v_c, 1), q)
print(f"convex : merged entry gets {merged:.4f} of {total:.4f}   sag={sag}   "
      f"|o'-o| = {np.linalg.norm(after.output - before.output):.3e}")

# ZIP merge fed the true scores under q
s = raw_scores(q, keys[idx])
zipped = zip_merge(MergeInputs.of(keys[idx], values[idx], scores=s))
a_r, total, _, after = merged_attention(keys, values, votes, idx, zipped, q)
print(f"zip    : merged entry gets {a_r:.4f} of {total:.4f}   votes={zipped[2]}   "
      f"|o'-o| = {np.linalg.norm(after.output - before.output):.3e}")

# the same ZIP merge judged by queries it never saw
for step in range(1, 4):
    q_later = q + 0.2 * step * rng.normal(size=d)
    o = attend(cache, q_later).output
    _, _, _, after = merged_attention(keys, values, votes, idx, zipped, q_later)
    print(f"  later query {step}: |o'-o| = {np.linalg.norm(after.output - o):.3e}")
