"""A short walk through the tape-based autodiff engine.

Run:  python3 demos/01_autodiff_tour.py
"""

import numpy as np

from msedf import autodiff as ad
from msedf.autodiff import Tape, Tensor, backward, finite_difference_check
from msedf.layers import GruCell, gru_step

rng = np.random.default_rng(0)

# Every tensor is a rank-2 float64 grid.  Operations are recorded only while
# a tape is open and some input asks for gradients.
W = Tensor(rng.normal(size=(3, 2)), requires_grad=True, name="W")
x = Tensor([[1.0, -2.0, 0.5]])

with Tape() as tape:
    y = ad.gelu(ad.matmul(x, W))
    loss = ad.sum_all(y * y)
backward(tape, loss)
print("loss       ", round(loss.item(), 6))
print("dloss/dW   ", W.grad.round(4).tolist())

# The same gradient from central differences.
err = finite_difference_check(lambda: ad.sum_all(ad.gelu(ad.matmul(x, W)) * ad.gelu(ad.matmul(x, W))), [W])
print("finite-difference relative error", f"{err:.1e}")

# A GRU step is built from the same primitives, so it gets gradients for free.
cell = GruCell.create(3, 4, rng)
h = Tensor(np.zeros((1, 4)))
for t in range(3):
    h = gru_step(cell, Tensor(rng.normal(size=(1, 3))), h)
print("hidden after 3 steps", h.values.round(3).tolist())
err = finite_difference_check(lambda: ad.sum_all(gru_step(cell, x, Tensor(np.ones((1, 4))))),
                              {k: getattr(cell, k) for k in GruCell.FIELDS})
print("GRU step gradient check", f"{err:.1e}")
