"""A walk through the tensor engine: build a small graph, differentiate
it, and confirm the gradients against central finite differences.

Run:  python demos/01_autodiff_engine.py
"""

import numpy as np

from corrseg import autograd as ag
from corrseg.autograd import Tensor

rng = np.random.default_rng(0)

# A toy "layer": dilated 3D convolution -> leaky ReLU -> pooled summary.
x = Tensor(rng.normal(size=(1, 2, 8, 8, 8)), requires_grad=True,
           dtype=np.float64)
kernel = Tensor(rng.normal(size=(3, 2, 3, 3, 3)) * 0.4, requires_grad=True,
                dtype=np.float64)
bias = Tensor(np.zeros(3), requires_grad=True, dtype=np.float64)


def forward():
    h = ag.conv3d(x, kernel, bias, stride=1, dilation=2, padding=2)
    h = ag.leaky_relu(h)
    return ag.mean_all(ag.mul(h, h))


loss = forward()
loss.backward()
print(f"loss = {loss.item():.6f}")
print(f"kernel gradient norm = {np.linalg.norm(kernel.grad):.6f}")

# Spot-check one weight against finite differences.
i = (0, 0, 1, 1, 1)
step = 1e-5
orig = kernel.data[i]
kernel.data[i] = orig + step
hi = forward().item()
kernel.data[i] = orig - step
lo = forward().item()
kernel.data[i] = orig
numeric = (hi - lo) / (2 * step)
print(f"analytic dL/dw{list(i)} = {kernel.grad[i]: .8f}")
print(f"numeric  dL/dw{list(i)} = {numeric: .8f}")

# Gradients accumulate until cleared, which the optimizer relies on.
before = kernel.grad.copy()
forward().backward()
print("second backward doubled the gradient:",
      np.allclose(kernel.grad, 2 * before))
