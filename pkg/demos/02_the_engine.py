"""
A reverse-mode tensor engine on bare numpy
==========================================

Everything in this package trains through one small autograd engine:
Tensors wrap numpy arrays, ops record how to push gradients backward,
and `backward` walks the graph in reverse topological order.  This demo
builds a tiny conv net by hand, checks one gradient against finite
differences, and runs a few SGD steps.
"""

import numpy as np

from autoprune import (
    RunningStats,
    Tensor,
    backward,
    batch_norm2d,
    conv2d,
    finite_diff_check,
    linear,
    relu,
    softmax_cross_entropy,
    zero_grad,
)
from autoprune.tensor import mul, reshape, tensor_sum

rng = np.random.default_rng(0)

# ---------------------------------------------------------------------------
# A tensor is numpy data plus an optional gradient slot.

w = Tensor(0.3 * rng.standard_normal((4, 1, 3, 3)).astype(np.float32), requires_grad=True)
x = Tensor(rng.standard_normal((2, 1, 6, 6)).astype(np.float32))
print("conv weight shape:", w.shape, " input shape:", x.shape)

# Forward through conv -> bn -> relu -> head -> cross entropy.  The ops
# look like plain function calls; the graph is recorded behind the scenes.

gamma = Tensor(np.ones(4, dtype=np.float32), requires_grad=True)
beta = Tensor(np.zeros(4, dtype=np.float32), requires_grad=True)
stats = RunningStats.zeros(4)
head_w = Tensor(0.3 * rng.standard_normal((4 * 36, 3)).astype(np.float32), requires_grad=True)
head_b = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
labels = np.array([0, 2])


def loss_fn():
    h = relu(batch_norm2d(conv2d(x, w, 1, 1), gamma, beta, stats, mode="train"))
    logits = linear(reshape(h, (2, -1)), head_w, head_b)
    return softmax_cross_entropy(logits, labels)


loss = loss_fn()
backward(loss)
print("loss:", float(loss.data), " grad reached conv weight:", w.grad is not None)

# ---------------------------------------------------------------------------
# Trust, then verify: every op's backward rule is compared against a
# central finite difference.  A smooth readout (sum of squares of the
# conv output) keeps the difference quotient clean at float32; the test
# suite runs the same check over every op and both precisions.


def smooth_readout(t):
    y = conv2d(x, t, 1, 1)
    return tensor_sum(mul(y, y))


err = finite_diff_check(smooth_readout, w, step=0.01)
print("finite-difference error on the conv weight:", f"{err:.2e}")

# ---------------------------------------------------------------------------
# Three steps of plain SGD.  The loss should fall monotonically on this
# tiny overfit-one-batch problem.

params = [w, gamma, beta, head_w, head_b]
print("\nSGD on one batch:")
for step in range(3):
    zero_grad(params)
    loss = loss_fn()
    backward(loss)
    for p in params:
        p.data -= 0.1 * p.grad
    print(f"  step {step}  loss {float(loss.data):.4f}")
