"""
Interleaved sequences, crops and the causal image mask
======================================================

Images live in the token stream as a single reserved id.  Everything the
attention layers need (rotary positions for visual keys, which tokens may
look at which image) is derived from where those placeholders sit.
"""

# %%
# Two images between three text runs.  Each image becomes one placeholder.
from hyperattn.interleave import (
    build_cross_mask,
    build_rope_map,
    build_sequence,
    dumps_sequence,
    image,
    select_crop_grid,
    text,
    video,
)

seq = build_sequence([text([11, 12, 13]), image("cat"), text([14, 15]), image("dog"), text([16])])
print("tokens:", seq.tokens)
print("placeholders at", seq.placeholder_positions)

# %%
# The visual keys of an image are rotated as if they sat at the placeholder.
print("visual key positions:", build_rope_map(seq).visual_key_positions)

# %%
# Token t sees image s once the placeholder of s is at or before t.
print(build_cross_mask(seq).visible.astype(int))

# %%
# High-resolution images are cut into a grid chosen by aspect ratio.
for w, h in [(448, 448), (1600, 400), (300, 900), (1000, 700)]:
    g = select_crop_grid(w, h)
    print(f"{w}x{h} -> {g.rows}x{g.cols}")

# %%
# With cropping on, the global view comes first and the crops follow in
# row-major order.  They all share the parent placeholder's position.
wide = build_sequence([text([1]), image("pano", 1600, 400)], crop_policy="on")
for slot in wide.image_slots:
    print(slot.slot_index, slot.crop_role, "at", slot.placeholder_position)

# %%
# A video expands into one placeholder per sampled frame.
clip = build_sequence([text([1, 2]), video("clip", 4)])
print(clip.placeholder_positions, [s.image_id for s in clip.image_slots])

# %%
# The text fixture format used by the golden tests.
print(dumps_sequence(seq))
