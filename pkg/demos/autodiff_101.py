"""
Gradients by hand and by tape
=============================

A walk through the reverse-mode engine: build a small graph, run backward,
and compare against central finite differences.
"""

import numpy as np

from laifusion import autodiff as ad
from laifusion.autodiff import Tensor

rng = np.random.default_rng(0)

# A tensor that tracks gradients is a leaf of the tape.
x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.3, requires_grad=True)
b = Tensor(np.zeros(3), requires_grad=True)

# conv -> relu -> pool -> sum, the same building blocks as the U-net
y = ad.max_pool2d(ad.relu(ad.conv2d(x, w, b, pad=1)), 2)
loss = y.sum()
loss.backward()
print("loss", loss.item())
print("dloss/dbias", b.grad)

# Each output pixel of the pooled map routes its gradient to one input cell,
# so the bias gradient counts the active (relu > 0) pooled winners per channel.
print("active winners per channel", (y.data > 0).sum(axis=(0, 2, 3)))

# grad_check perturbs every input element and compares with the tape.
err = ad.grad_check(lambda x, w, b: ad.max_pool2d(ad.relu(ad.conv2d(x, w, b, pad=1)), 2).sum(),
                    [Tensor(x.data), Tensor(w.data), Tensor(b.data)])
print(f"max relative error vs finite differences: {err:.2e}")

# Inside no_grad nothing is recorded, which is what inference uses.
with ad.no_grad():
    z = ad.conv2d(x, w, b, pad=1)
print("recorded parents under no_grad:", len(z._parents))
