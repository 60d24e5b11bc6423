# Reverse-mode autodiff on numpy arrays, checked against central differences.
import numpy as np

from meetalign import diffcore as dc
from meetalign.diffcore import Parameter, SeededRng, Tensor

rng = SeededRng(0, "demo")
w = Parameter("w", rng.normal((4, 3)))
x = Tensor(rng.normal((5, 3)))

def loss():
    h = dc.gelu(dc.matmul(x, dc.transpose(w, (1, 0))))   # (5, 4)
    return dc.total(dc.log_softmax(h))

value, grads = dc.value_and_grad(loss, [w])
numeric = dc.finite_diff_gradient(lambda: loss().item(), [w])
print("loss", value)
print("max |analytic - numeric|", np.abs(grads["w"] - numeric["w"]).max())

# layer norm of [1, 2, 3, 4]: mean 2.5, variance 1.25
print(dc.layer_norm(Tensor([1.0, 2.0, 3.0, 4.0]), Tensor(np.ones(4)), Tensor(np.zeros(4))).data)

# frozen parameters never reach the tape
w.trainable = False
with dc.Tape() as tape:
    loss()
print("nodes recorded with w frozen:", len(tape))
