"""
Why cross-attention scales better than token concatenation
==========================================================

Splicing visual tokens into the sequence makes self-attention quadratic in
the number of images.  Cross-attention keeps the language sequence at its
text length.
"""

# %%
from hyperattn.bench import Workload, cost_model, measure
from hyperattn.model import ModelConfig

cfg = ModelConfig()
print(f"{'N':>4} {'variant':>15} {'lm_seq_len':>10} {'attn GFLOP':>11} {'kv floats':>10}")
for n in (1, 10, 100, 400):
    for v in ("hyper", "flamingo_dense", "concat"):
        r = cost_model(v, cfg, Workload(n))
        print(f"{n:>4} {v:>15} {r.lm_seq_len:>10} {r.attn_flops / 1e9:>11.3f} {r.kv_cache_floats:>10}")

# %%
# A small timed run (smaller model so it finishes quickly).  The analytic
# counts are checked against what the forward pass actually computed.
small = ModelConfig(hidden_dim=32, n_layers=4)
for v in ("hyper", "concat"):
    for n in (1, 20, 40):
        r = measure(v, small, Workload(n, 16, 128, small, repeats=3))
        print(f"{v:>7} N={n:<3} {r.wall_ms_median:7.1f} ms  seq={r.measured_lm_seq_len}"
              f"  analytic match={r.measured_attn_flops == r.attn_flops}")
