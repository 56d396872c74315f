"""Tour of the tensor core: forward ops, reverse-mode gradients, Adam.

Run: python3 demos/01_tensor_autodiff.py
"""

import numpy as np

from multibooth import Adam, Rng, Tensor
from multibooth.tensor import l2_norm, matmul, silu, softmax, tsum

rng = Rng(0).child("demo")

# Tensors are float32 by default and carry gradients only when asked.
x = Tensor(rng.normal((4, 6)), requires_grad=True)
w = Tensor(rng.normal((6, 3)), requires_grad=True)
print("x:", x, " w:", w)

# A small computation: matmul -> SiLU -> softmax rows -> scalar loss.
hidden = silu(matmul(x, w))
probs = softmax(hidden, axis=1)
print("softmax rows sum to:", probs.data.sum(axis=1))

loss = tsum(probs * probs)
loss.backward()
print("loss:", loss.item())
print("grad shapes:", x.grad.shape, w.grad.shape)

# The norm op is the building block behind concept-embedding rescaling.
v = Tensor(np.array([3.0, 4.0]))
print("l2_norm([3,4]) =", l2_norm(v).item())

# Frozen tensors never accumulate gradients, which is how the base model
# and encoders stay fixed during concept training.
frozen = Tensor(rng.normal((4, 6)))
out = tsum(matmul(frozen.transpose(), x))
out.backward()
print("frozen.grad is None:", frozen.grad is None, "| x got grad:", x.grad is not None)

# A couple of Adam steps on a toy quadratic.
p = Tensor(np.array([5.0, -3.0], dtype=np.float32), requires_grad=True)
opt = Adam([p], lr=0.5)
for step in range(20):
    opt.zero_grad()
    objective = tsum(p * p)
    objective.backward()
    opt.step()
print("after 20 Adam steps on |p|^2, p =", p.data)
