"""
One hyper-attention block, step by step
=======================================

Self-attention and image cross-attention run side by side inside one
block.  A per-token gate then mixes the two results.  We check the fast
path against the scalar-loop oracle.
"""

# %%
import numpy as np

from hyperattn.hyperattention import AttentionInputs, BlockParams, HatbParams, hatb_forward
from hyperattn.interleave import build_sequence, image, text
from hyperattn.oracle import compare, dense_hatb_reference

rng = np.random.default_rng(0)
D, heads, patches = 16, 2, 3

# %%
# The extra weights are a stacked visual K/V projection (copied from the
# host block's K and V) and a gate vector.  The gate vector starts at zero, so
# the gate starts at 0.5.
host = BlockParams.init(rng, D, heads, 4 * D)
params = HatbParams.from_host(host)
print("added parameters:", params.added_parameter_count(), "= 2*D^2 + D =", 2 * D * D + D)

# %%
seq = build_sequence([text([1, 2]), image("a"), text([3, 4, 5]), image("b"), text([6])])
inputs = AttentionInputs.from_sequence(
    seq, rng.standard_normal((len(seq), D)), rng.standard_normal((seq.num_slots * patches, D)), patches
)
out = hatb_forward(inputs, params)
print("gate:", np.round(out.gate, 3))
print("bypassed tokens (no image visible yet):", np.flatnonzero(out.bypass))

# %%
# Bypassed rows keep the self-attention result exactly.
print(np.array_equal(out.h_fused[out.bypass], out.h_self[out.bypass]))

# %%
# A learned gate changes the mix per token.
params.w_gate[:] = rng.standard_normal(D) / np.sqrt(D)
out = hatb_forward(inputs, params)
print("gate:", np.round(out.gate, 3))

# %%
# Compare every intermediate against the pure-Python oracle.
ref = dense_hatb_reference(inputs, params)
names = ("h_out", "h_fused", "h_self", "h_cross", "gate")
report = compare({k: getattr(out, k) for k in names},
                 {k: np.asarray(ref[k]).reshape(getattr(out, k).shape) for k in names}, 1e-9)
print(report.to_json())
