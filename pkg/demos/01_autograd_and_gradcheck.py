"""A quick tour of the tensor engine: forward ops, backward, gradient checking.

Everything in the package runs on these primitives, so this demo builds a tiny
convolutional expression, differentiates it, and confirms the analytic
gradients against central finite differences.
"""

import numpy as np

from msop import tensor as T
from msop.tensor import Tensor, softmax_cross_entropy, zero_grad

rng = np.random.default_rng(0)

# forward: conv -> relu -> global mean -> cross-entropy against class 2
x = Tensor(rng.uniform(0.2, 1.0, size=(6, 6, 2)), requires_grad=True)
kernels = Tensor(rng.standard_normal((3, 3, 2, 3)) * 0.4, requires_grad=True)
bias = Tensor(np.zeros(3), requires_grad=True)


def forward():
    feat = T.relu(T.conv2d(x, kernels, padding="same", bias=bias))
    logits = T.reshape(T.tmean(feat, axis=(0, 1)), (3,))
    return softmax_cross_entropy(logits, 2)


loss = forward()
zero_grad([x, kernels, bias])
loss.backward()
print(f"loss = {float(loss.data):.4f}")
print(f"grad norms: x {np.linalg.norm(x.grad):.4f}, "
      f"kernels {np.linalg.norm(kernels.grad):.4f}, bias {np.linalg.norm(bias.grad):.4f}")

# central finite differences on a few random kernel entries
h = 1e-5
flat = kernels.data.reshape(-1)
gflat = kernels.grad.reshape(-1)
print("\nanalytic vs numeric (5 random kernel entries):")
for i in rng.choice(flat.size, size=5, replace=False):
    orig = flat[i]
    flat[i] = orig + h
    up = float(forward().data)
    flat[i] = orig - h
    down = float(forward().data)
    flat[i] = orig
    numeric = (up - down) / (2 * h)
    print(f"  [{i:3d}] analytic {gflat[i]:+.8f}   numeric {numeric:+.8f}")

# the optimizer: momentum SGD on a quadratic
p = Tensor(np.array([4.0]), requires_grad=True)
opt = T.SGD([p], lr=0.2, momentum=0.3)
print("\nminimizing p^2 from p=4:")
for step in range(8):
    opt.zero_grad()
    T.tsum(T.mul(p, p)).backward()
    opt.step()
    print(f"  step {step + 1}: p = {p.data[0]:+.4f}")
