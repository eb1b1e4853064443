"""
Packing documents and counting attended pairs
=============================================

Several short documents share one training window. Different masks decide
which earlier tokens each position may look at; the number of allowed
(query, key) pairs is a rough proxy for attention cost.
"""

from ropelab import compile_plan, pack_documents, pair_cost_ratio, render_ascii

# %%
# Two three-token documents behind a shared anchor, in a window of 7.
(layout,) = pack_documents([3, 3], 7, "anchor")
plan = compile_plan(layout, "anchor")
print(render_ascii(plan))
print("pairs:", plan.pair_count, "position ids:", plan.position_ids.tolist())

# %%
# Resetting positions restarts the count at every document boundary.
(plain,) = pack_documents([3, 3], 6, "intra_doc_reset")
print(compile_plan(plain, "intra_doc_reset").position_ids.tolist())

# %%
# Interleaved chunks: documents are cut and shuffled while each keeps its
# own token order. Visibility still follows document identity.
(mixed,) = pack_documents([4, 4], 9, "interleaved_anchor", max_chunks=2, seed=4)
print("doc of each token:", [t.doc_id for t in mixed.tokens])
print(render_ascii(compile_plan(mixed, "interleaved_anchor")))

# %%
# Cost relative to a plain causal mask for four equal documents.
(four,) = pack_documents([4, 4, 4, 4], 17, "anchor")
print(f"anchor / full causal = {pair_cost_ratio(four, 'anchor'):.4f}")
