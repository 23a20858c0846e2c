"""
Distractor resistance with circular evaluation
==============================================

Each question points at one image among N.  The harness asks every option
rotation, and a question only counts if all rotations come back right.
"""

# %%
from hyperattn.distractor import EvalConfig, circular_eval, gen_tasks, make_adapter, render_prompt

cfg = EvalConfig(questions=100, n_values=(1, 5, 20, 100))
tasks = gen_tasks(cfg)
print(render_prompt(tasks[1])[0])

# %%
# The oracle reads the descriptor the vision stub encoded for image X.
# The "first-image" adapter ignores X, so more distractors hurt it.
for name in ("oracle", "first-image", "random"):
    res = circular_eval(make_adapter(name), tasks, cfg)
    print(f"{name:>12}:", "  ".join(f"N={r.n_images}:{r.accuracy:.2f}" for r in res))
