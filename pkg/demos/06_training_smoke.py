"""
Overfitting a two-image prompt
==============================

A sanity check that the gradients are usable: plain gradient descent on
a single interleaved sequence drives the next-token loss towards zero.
"""

# %%
from hyperattn.interleave import build_sequence, image, text
from hyperattn.model import ModelConfig, build_model, encode_images_stub, overfit_step

cfg = ModelConfig()
model = build_model(cfg)
seq = build_sequence([text([3, 17, 42]), image("desc:circle:red:a"), text([8, 99, 7]),
                      image("desc:star:blue:b"), text([55, 21, 4, 9])])
batch = [(seq, encode_images_stub(seq.slot_keys(), cfg.patches_per_slot, 0, cfg.vision_dim))]

for step in range(300):
    loss = overfit_step(model, batch, lr=0.05)
    if step % 50 == 0:
        print(f"step {step:3d}  loss {loss:.4f}")
