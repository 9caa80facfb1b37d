"""
The four training losses, one at a time
=======================================

Each loss is shown at a point where its value is known in closed form, then
at a generic point.
"""

import numpy as np

from lifereid.autodiff import Tensor
from lifereid.losses import (
    loss_ce,
    loss_cmcl,
    loss_pcl,
    loss_triplet,
    mine_hard_pairs,
)

rng = np.random.default_rng(0)

# Identity cross-entropy.  With uniform logits over Z classes the loss is
# exactly ln Z -- a quick sanity anchor for the fused softmax.
Z = 751
uniform = loss_ce(Tensor(np.zeros((4, Z))), rng.integers(0, Z, size=4))
print(f"uniform-logit cross-entropy: {uniform.item():.6f}  (ln {Z} = {np.log(Z):.6f})")

# Batch-hard triplet.  Mining picks, per anchor, the farthest same-identity
# row and the nearest other-identity row by squared Euclidean distance.
feats = rng.normal(size=(8, 16))
labels = np.repeat([0, 1, 2, 3], 2)
pos, neg = mine_hard_pairs(feats, labels)
print("\nhardest positive per anchor:", pos)
print("hardest negative per anchor:", neg)

# With every feature identical both distances vanish and the hinge sits at
# the margin.
same = Tensor(np.tile(rng.normal(size=16), (6, 1)))
print("all-identical-feature triplet loss:",
      round(loss_triplet(same, np.repeat([0, 1, 2], 2), margin=0.3).item(), 6))

# Compatibility loss.  Anchors are replay images embedded by the current
# model; their positives are stored bank features of the same identity.
# Three orthogonal candidates make each term exactly ln 3.
anchor = np.zeros((1, 32)); anchor[0, 0] = 1.0
bank = np.zeros((2, 32)); bank[0, 1] = 1.0; bank[1, 2] = 1.0
batch = np.zeros((1, 32)); batch[0, 3] = 1.0
cmcl = loss_cmcl(Tensor(anchor), np.array([7]), bank, np.array([7, 8]),
                 Tensor(batch), tau=0.5)
print(f"\nsymmetric three-candidate compatibility loss: {cmcl.item():.6f} "
      f"(ln 3 = {np.log(3.0):.6f})")

# Part classification: slab n must be labeled n.  Uniform logits over the
# five slabs give ln 5.
flat = [Tensor(np.zeros((4, 5))) for _ in range(5)]
print(f"uniform part-classification loss: {loss_pcl(flat, None).item():.6f} "
      f"(ln 5 = {np.log(5.0):.6f})")
