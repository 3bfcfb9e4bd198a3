"""A short tour of the numerics layer.

Records a few operations on a tape, runs the backward pass, and compares the
result with central finite differences. Then shows how the attention
temperature sharpens a masked softmax.

Run:  python demos/autodiff_tour.py   (a second or two)
"""

import numpy as np

from glocalxml.numerics import Tape, Tensor, bce_with_logits, check_gradients, sigmoid, softmax_rows

rng = np.random.default_rng(0)
w = Tensor(rng.normal(size=(4, 3)), requires_grad=True, name="w")
x = Tensor(rng.normal(size=(5, 4)))
y = (rng.random((5, 3)) < 0.5).astype(float)

# Operations run eagerly; the tape only remembers how to go backwards.
with Tape() as tape:
    loss = bce_with_logits(x @ w, y)
    tape.backward(loss)
print(f"loss {float(loss.data):.6f}")
print("analytic dL/dw:\n", np.round(w.grad, 6))

# Same quantity by finite differences. check_gradients zeroes grads itself.
report = check_gradients(lambda: bce_with_logits(x @ w, y), [w])
print(f"finite differences agree: max relative error {report.max_rel_error:.1e}")

# The fused loss stays finite where the textbook form would take log(0).
z = np.array([[40.0, -40.0]])
print("fused BCE at |z| = 40:", float(bce_with_logits(z, np.array([[1.0, 0.0]])).data))
print("sigmoid(40) rounds to", float(sigmoid(Tensor(40.0)).data))

# Temperature: small tau concentrates attention on the top score, padding gets 0.
scores = Tensor([[2.0, 1.0, 0.5, 3.0]])
mask = np.array([True, True, True, False])
for tau in (5.0, 1.0, 0.1):
    print(f"tau={tau:<4} weights", np.round(softmax_rows(scores, mask, tau=tau).data[0], 4))
