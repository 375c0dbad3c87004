"""
Normalizing recurrent features and projecting inputs
====================================================

Sequence-wise batch normalization pools statistics over every unpadded
(episode, time) position, while layer normalization works per position.
A sparse random projection shrinks the input features first.
"""

import numpy as np

from stackalign.normalization import LnState, SbnState, ln_forward, sbn_forward
from stackalign.projection import rp_apply, rp_new
from stackalign.tensorcore import Rng

rng = np.random.default_rng(0)

# Three sequences of different lengths, padded to 6 steps, 4 features each.
x = rng.normal(3.0, 2.0, (3, 6, 4))
lengths = np.array([6, 4, 2])
mask = np.arange(6)[None, :] < lengths[:, None]

sbn = SbnState.create("demo", 4)
y, _ = sbn_forward(sbn, x, mask)
print("SBN mean per feature", y[mask].mean(0).round(12))
print("SBN variance per feature", y[mask].var(0).round(6))
print("padded outputs are zero:", not y[~mask].any())

###############################################################################
# Every training batch also nudges running averages of the statistics. Once
# they have settled, eval mode uses them instead and the map becomes a fixed
# affine transform that no longer depends on the batch.

for _ in range(100):
    sbn_forward(sbn, rng.normal(3.0, 2.0, (3, 6, 4)), mask)
sbn.training = False
y_eval, _ = sbn_forward(sbn, x[:1])
print("eval output for one sequence", y_eval[0, 0].round(4))

ln = LnState.create("demo", 4)
z, _ = ln_forward(ln, x)
print("LN mean over features at each step", np.abs(z.mean(-1)).max())

###############################################################################
# Random projection
# -----------------
# Entries are +-sqrt(3) with probability 1/6 each and 0 otherwise, so squared
# lengths grow by the target dimension on average.

proj = rp_new(Rng(0), 768, 300)
a, b = rng.standard_normal((2, 768))
ratio = np.sum(rp_apply(proj, a - b) ** 2) / (300 * np.sum((a - b) ** 2))
print("distance ratio", round(float(ratio), 3))
