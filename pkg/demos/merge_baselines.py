"""Walk-through of the training-free merge baselines.

Fine-tunes one content and one style adapter on the toy model, then shows
what each baseline does to their weight deltas: plain averaging, random
drop-and-rescale (DARE), trim-elect-average (TIES), and their composition.

Run with:  python3 demos/merge_baselines.py
"""

import numpy as np

from loramerge.merging import (dare_sparsify, dare_ties_merge, direct_merge,
                               ties_merge, ties_trim)
from loramerge.model import (BaseModel, FinetuneConfig, ModelDims,
                             finetune_lora)
from loramerge.tasks import gen_task

dims = ModelDims()
model = BaseModel.random(dims, seed=0)

# 1. Two adapters, fine-tuned on a subject task and a style task.
task_c = gen_task("content", 0, dims)
task_s = gen_task("style", 0, dims)
Lc, losses_c = finetune_lora(model, task_c, FinetuneConfig())
Ls, losses_s = finetune_lora(model, task_s, FinetuneConfig())
print(f"fine-tuned {task_c.name!r}: loss {losses_c[0]:.4f} -> {losses_c[-1]:.4f}")
print(f"fine-tuned {task_s.name!r}: loss {losses_s[0]:.4f} -> {losses_s[-1]:.4f}")

dc = Lc.delta(0, "Q")
ds = Ls.delta(0, "Q")
print(f"\nblock 0 Q deltas: |content| = {np.linalg.norm(dc):.4f}, "
      f"|style| = {np.linalg.norm(ds):.4f}")

# 2. Direct merge: the plain 0.5/0.5 average of the two deltas.
avg = direct_merge(dc, ds)
print(f"\ndirect merge |delta| = {np.linalg.norm(avg):.4f} "
      f"(entry [0,0]: 0.5*{dc[0, 0]:+.4f} + 0.5*{ds[0, 0]:+.4f} "
      f"= {avg[0, 0]:+.4f})")

# 3. DARE: drop entries with probability 1-p, rescale survivors by 1/p.
#    The expectation over seeds is the original delta.
p = 0.6
sparse = dare_sparsify(dc, p=p, seed=0)
kept = np.count_nonzero(sparse) / sparse.size
print(f"\nDARE at p={p}: kept {kept:.0%} of entries "
      f"(survivors scaled by 1/p = {1 / p:.3f})")
acc = np.zeros(dc.shape, dtype=np.float64)
n_seeds = 200
for s in range(n_seeds):
    acc += dare_sparsify(dc, p=p, seed=s).astype(np.float64)
rel = np.linalg.norm(acc / n_seeds - dc) / np.linalg.norm(dc)
print(f"mean over {n_seeds} seeds is within {rel:.1%} of the original "
      f"(unbiasedness)")

# 4. TIES on a tiny example: trim small magnitudes, elect the majority sign
#    per entry, average only the entries that agree with it.
a = np.array([[2.0, -3.0, 0.25, 1.0]], dtype=np.float32)
b = np.array([[1.0, 2.0, 4.0, -1.0]], dtype=np.float32)
print(f"\nTIES walk-through on a = {a[0].tolist()}, b = {b[0].tolist()}")
print(f"  trim to top half:     a -> {ties_trim(a, 0.5)[0].tolist()}, "
      f"b -> {ties_trim(b, 0.5)[0].tolist()}")
merged = ties_merge([a, b], k=0.5)
print(f"  elect sign + average: {merged[0].tolist()}")
print("  (entry 1: -3 and +2 disagree; their sum is negative, "
      "so only -3 survives)")

# 5. The composition: DARE each input first, then run TIES on the results.
composed = dare_ties_merge([dc, ds], p=0.7, k=0.5, seed=3)
print(f"\nDARE-TIES on the Q deltas: |delta| = {np.linalg.norm(composed):.4f}, "
      f"{np.count_nonzero(composed) / composed.size:.0%} of entries nonzero")
