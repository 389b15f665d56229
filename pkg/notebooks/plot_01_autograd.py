"""
Reverse-mode gradients on numpy arrays
======================================

Build a small graph, pull gradients back through it, and compare them with
central differences.
"""

import numpy as np

from nlcen import autograd as ag
from nlcen.autograd import Tensor
from nlcen.gradcheck import grad_check

rng = np.random.default_rng(0)

# a 3x3 convolution followed by a softmax over channels
x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
probs = ag.softmax(ag.conv2d(x, w, padding=1), axis=1)
print("output shape", probs.shape)
print("channel sums", np.unique(np.round(probs.data.sum(axis=1), 12)))

# a scalar loss and its gradients
weights = rng.normal(size=probs.shape)
loss = ag.reduce_sum(ag.mul(probs, weights))
gx, gw = ag.grad(loss, [x, w])
print("dL/dx", gx.shape, "dL/dw", gw.shape)

###############################################################################
# Central differences agree to well below 1e-4 relative error.

report = grad_check(lambda: ag.reduce_sum(ag.mul(ag.softmax(ag.conv2d(x, w, padding=1), axis=1), weights)),
                    [x, w], max_per_input=20, rng=rng)
print(report)
