"""
Checking hand-written gradients
===============================

Every backward pass in the package is written by hand.  Here the HATB
gradients and a full toy model are compared with central differences.
"""

# %%
from hyperattn.validation import hatb_gradcheck, model_gradcheck, random_hatb_case, small_model_config

case = random_hatb_case(3, dim=8, length=5, n_slots=2, patches=2, toggles={"gate_bias": True})
r = hatb_gradcheck(case)
print(f"HATB: max rel err {r['max_rel_err']:.2e} at {r['worst_location']}")

# %%
# Errors are measured per tensor.  Each tensor is scaled by its largest
# numeric entry, because central differences carry roughly 1e-11 of absolute
# noise, and that noise swamps gradient entries that are nearly zero.
for variant in ("hyper", "pre_cross", "concat"):
    r = model_gradcheck(small_model_config(0, 8, 3, variant))
    print(f"{variant:>10}: max rel err {r['max_rel_err']:.2e}")
