"""
A first look at the tape
========================

Every differentiable operation in cgnn goes through a handful of primitives
recorded on a tape. This script builds a tiny logistic model by hand,
differentiates it, and checks the result against central differences.

Run with ``python demos/01_autodiff_tour.py``.
"""

import numpy as np

from cgnn import autodiff as ad
from cgnn.autodiff import Tape, Tensor

rng = np.random.default_rng(0)

# two parameters and a fixed input, all 64-bit
W = Tensor(rng.normal(size=(3, 1)), requires_grad=True, name="W")
b = Tensor(np.zeros((1, 1)), requires_grad=True, name="b")
x = Tensor(rng.normal(size=(4, 3)))
y = np.array([[1.0], [0.0], [1.0], [1.0]])


ones = Tensor(np.ones((4, 1)))


def loss_of(W, b):
    # no broadcasting: the bias reaches every row through a column of ones
    p = ad.sigmoid(ad.add(ad.matmul(x, W), ad.matmul(ones, b)))
    # binary cross-entropy written out with primitives
    one = Tensor(np.ones_like(y))
    pos = ad.hadamard(Tensor(y), ad.log(p))
    neg = ad.hadamard(Tensor(1 - y), ad.log(ad.add(one, ad.scale(p, -1.0))))
    return ad.scale(ad.sum_reduce(ad.add(pos, neg)), -1.0 / len(y))


with Tape() as tape:
    loss = loss_of(W, b)
print(f"loss {float(loss.data):.6f}, {len(tape)} tape entries")

grads = ad.backpropagate(loss, tape, wrt=[W, b])
print("dL/dW", grads["W"].ravel())

# The same numbers from central differences. The arrays are nudged in place.
numeric = ad.finite_difference_gradient(lambda _: float(loss_of(W, b).data), {"W": W.data, "b": b.data})
for name in ("W", "b"):
    err = ad.relative_error(grads[name], numeric[name]).max()
    print(f"{name}: max relative error {err:.1e}")

# A parameter used twice gets both contributions.
z = Tensor(np.array([[2.0]]), requires_grad=True, name="z")
with Tape() as tape:
    out = ad.add(z, z)
print("d(z+z)/dz =", ad.backpropagate(out, tape, wrt=[z])["z"].item())

# Replaying the tape reproduces every output bit for bit.
with Tape() as tape:
    loss_of(W, b)
first = [o.copy() for o in tape.replay()]
assert all(np.array_equal(a, c) for a, c in zip(first, tape.replay()))
print("replay is deterministic")
