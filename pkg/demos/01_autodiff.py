"""Autodiff walkthrough: build a small expression, run backward, and compare
every gradient with central finite differences.

    python3 demos/01_autodiff.py
"""
import numpy as np

from kagprompt import tensor as tt
from kagprompt.gradcheck import composition_grad_check, grad_check
from kagprompt.tensor import Tensor

rng = np.random.default_rng(0)

# a conv layer, a softmax over channels and a weighted sum: a scalar loss
x = Tensor(rng.standard_normal((2, 3, 5, 5)), requires_grad=True)
k = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
w = Tensor(rng.standard_normal((2, 4, 5, 5)))

with tt.Tape():
    y = tt.softmax(tt.conv2d(x, k), axis=1)
    loss = tt.tsum(tt.mul(y, w))
    tt.backward(loss)

print(f"loss = {float(loss.data):.6f}")
print(f"dloss/dk has shape {k.grad.shape}, |grad| = {np.linalg.norm(k.grad):.4f}")

# the same function, checked coordinate by coordinate
rep = grad_check(lambda x, k: tt.tsum(tt.mul(tt.softmax(tt.conv2d(x, k), axis=1), w)), [x.data, k.data])
print(f"op-level check: {rep}")

# the full training path: graph -> alignment maps -> global score -> loss
t = composition_grad_check(seed=0)
print(f"full composition, seed 0: {t}")
