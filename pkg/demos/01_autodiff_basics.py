"""
A tour of the reverse-mode engine
=================================

Builds a few graphs by hand, runs backward passes, and cross-checks one
gradient against central differences.
"""

import numpy as np

from lifereid.autodiff import Tensor, backward, conv2d, gem_pool, grad_check

# A Tensor wraps a float64 array.  Only leaves created with
# requires_grad=True accumulate gradients; everything else is constant.
x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
y = ((x * x).sum())
backward(y)
print("d(sum x^2)/dx =")
print(x.grad)          # 2x

# Graphs are single-use: each forward builds a fresh one, so reusing a
# consumed intermediate raises instead of silently mixing stale state.
x.zero_grad()

# A small convolution followed by generalized-mean pooling -- the same two
# primitives the retrieval model is made of.
rng = np.random.default_rng(0)
image = Tensor(rng.random((1, 3, 8, 8)))
kernel = Tensor(0.3 * rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
pooled = gem_pool(conv2d(image, kernel, stride=1, pad=1).relu(), p=3.0)
loss = pooled.sum()
backward(loss)
print("\npooled descriptor:", np.round(pooled.data, 4))
print("kernel grad norm: %.6f" % np.linalg.norm(kernel.grad))

# grad_check rebuilds the graph many times and compares the analytic
# gradient with central differences; the worst relative error comes back.
w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
err = grad_check(lambda t: ((t @ t).relu()).sum(), [w])
print("\ngrad_check worst relative error: %.2e" % err)
