"""Tape autodiff in five minutes: build a tiny computation, pull gradients,
check them against central finite differences.
"""
import numpy as np

from rewirelm import Tape, Tensor, backward
from rewirelm.tensor import cross_entropy_masked, gelu, layer_norm, matmul

rng = np.random.default_rng(0)

# 1. leaves
W = Tensor(rng.normal(0, 0.5, (6, 4)).astype(np.float32), requires_grad=True)
x = Tensor(rng.normal(0, 1.0, (3, 6)).astype(np.float32), requires_grad=True)
targets = np.array([1, 3, 0])
mask = np.ones(3, dtype=np.float32)

# 2. forward under a tape, then reverse sweep
with Tape():
    h = gelu(matmul(x, W))
    h = layer_norm(h, Tensor(np.ones(4, np.float32), requires_grad=True),
                   Tensor(np.zeros(4, np.float32), requires_grad=True))
    loss = cross_entropy_masked(h, targets, mask)
    backward(loss)

print("loss          :", float(loss.data))
print("dL/dW norm    :", float(np.linalg.norm(W.grad)))
print("dL/dx norm    :", float(np.linalg.norm(x.grad)))

# 3. spot-check one coordinate of dL/dW by central differences (float64
#    re-run keeps the FD noise floor well below the tolerance)
def loss_at(w_val):
    with Tape():
        h = gelu(matmul(Tensor(x.data.copy()), Tensor(w_val)))
        h = layer_norm(h, Tensor(np.ones(4, np.float32)),
                       Tensor(np.zeros(4, np.float32)))
        return float(cross_entropy_masked(h, targets, mask).data)

eps = 1e-3
i, j = 2, 1
Wp, Wm = W.data.copy(), W.data.copy()
Wp[i, j] += eps
Wm[i, j] -= eps
fd = (loss_at(Wp) - loss_at(Wm)) / (2 * eps)
print(f"dL/dW[{i},{j}]   : tape {W.grad[i, j]:+.6f}  fd {fd:+.6f}  "
      f"diff {abs(W.grad[i, j] - fd):.2e}")
