"""The two building blocks, shown on small tensors.

The multi-scale block splits channels into four slices and refines three of
them through a chain of 3x3 convolutions; the second-order pooling block turns
channel/row/column covariance statistics into attention weights.  A few
algebraic identities make both easy to sanity-check by eye.
"""

import numpy as np

from msop.blocks import (
    MSBlockParams,
    SoPBlockParams,
    channel_covariance,
    ms_block_forward,
    sop_attention_weights,
    sop_block_forward,
)
from msop.tensor import Tensor

rng = np.random.default_rng(1)

# --- multi-scale block: the first slice passes through untouched -----------
x = Tensor(rng.standard_normal((4, 4, 8)))
ms = MSBlockParams.create(8, rng)
y = ms_block_forward(x, ms)
print("multi-scale block on 4x4x8:")
print("  output shape:", y.shape)
print("  slice 1 identical to input:",
      np.array_equal(y.data[:, :, :2], x.data[:, :, :2]))

# --- covariance: symmetric, PSD, zero for constant inputs ------------------
cov = channel_covariance(Tensor(rng.standard_normal((5, 5, 4)))).data
print("\nchannel covariance of a random 5x5x4 map:")
print("  symmetric:", np.array_equal(cov, cov.T))
print("  eigenvalues:", np.round(np.linalg.eigvalsh(cov), 3))
flat_cov = channel_covariance(Tensor(np.full((5, 5, 4), 3.0))).data
print("  constant input gives the zero matrix:", not flat_cov.any())

# --- second-order pooling: gated per-axis weights ---------------------------
sop = SoPBlockParams.create(4, 4, 8, rng)
w_d, w_h, w_w = sop_attention_weights(x, sop)
print("\nattention weights (sigmoid-gated, so all in (0,1)):")
print("  w_d:", np.round(w_d.data, 3))
print("  w_h:", np.round(w_h.data, 3))
print("  w_w:", np.round(w_w.data, 3))

z = sop_block_forward(x, sop)
z_unit = sop_block_forward(x, sop, unit_weights=True)
print("\nblock output shape:", z.shape)
print("with the gate bypassed to all-ones, output == 3x exactly:",
      np.array_equal(z_unit.data, 3.0 * x.data))

# pixel shuffles cannot move the channel weights: covariance ignores order
flat = x.data.reshape(16, 8)
shuffled = Tensor(flat[rng.permutation(16)].reshape(4, 4, 8))
w_d2, _, _ = sop_attention_weights(shuffled, sop)
print("channel weights invariant to pixel shuffling:",
      np.allclose(w_d.data, w_d2.data, atol=1e-12))
