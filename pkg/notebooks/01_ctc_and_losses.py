"""
CTC and the distillation losses on hand-sized inputs
====================================================

Run with ``python3 notebooks/01_ctc_and_losses.py``; each cell prints what it checks.
"""

# %%
# Two alignment paths over the alphabet {c, a, t} plus blank collapse to the same word.
import math

import numpy as np

from ctcd.ctc import beam_nbest, brute_force_log_prob, collapse, ctc_loss, greedy_decode
from ctcd.distill import frame_kd_loss, frame_weight_mask, skd_loss
from ctcd.numcore import DenseArray, Rng, softmax_np

C, A, T, EPS = 0, 1, 2, 3
for path in ([EPS, C, C, C, EPS, A, EPS, EPS, T, T, EPS], [C, C, EPS, EPS, A, A, EPS, EPS, EPS, EPS, T]):
    print(path, "->", "".join("cat"[i] for i in collapse(path, EPS)))

# %%
# The forward recursion agrees with summing every path that collapses to the target.
logits = Rng(0).normal_array((5, 4), 2.0)
grid = softmax_np(logits, axis=1)
for target in [(C,), (C, A), (C, A, T), (A, A)]:
    fast = -ctc_loss(DenseArray(logits), target).item()
    slow = brute_force_log_prob(grid, target)
    print(target, f"forward {fast:.12f}  enumeration {slow:.12f}")

# %%
# Greedy decoding vs the beam n-best list on the same grid.
print("greedy", greedy_decode(grid))
for hyp, logp in beam_nbest(grid, beam_width=8, n=3):
    print("beam", hyp, f"{logp:.4f}")

# %%
# Frame weights: one sigmoid of the frame mean per row, copied across the hidden axis.
w = Rng(1).normal_array((4, 3))
print(frame_weight_mask(w))
print(1 / (1 + np.exp(-w.mean(axis=1))))

# %%
# Teacher is sure of 'a', student is sure of blank. Frame-level cross-entropy hits the
# log floor on every frame while the l2 distance between softmax outputs stays below 2.
frames = 4
f_tea = np.tile([60.0, -60.0], (frames, 1))
f_stu = DenseArray(np.tile([-60.0, 60.0], (frames, 1)))
print("frame KD per frame", frame_kd_loss(softmax_np(f_tea, axis=-1), f_stu).item() / frames)
print("-ln 1e-12         ", -math.log(1e-12))
print("SKD per frame     ", skd_loss(f_tea, f_stu).item() / frames)
