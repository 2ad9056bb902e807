"""The tensor engine: a forward pass, one backward pass, and a finite-difference check."""

import numpy as np

from speechdep import tensor as T
from speechdep.gradcheck import grad_check, run_suite
from speechdep.tensor import Tensor, backward

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)

loss = (T.tanh(x @ w) ** 2).sum()
backward(loss)
print("loss", round(loss.item(), 6))
print("dL/dw\n", w.grad.round(4))

err = grad_check(lambda x, w: (T.tanh(x @ w) ** 2).sum(), [x, w])
print(f"finite-difference agreement: max relative error {err:.1e}")

# the same suite the CLI runs with `speechdep gradcheck`
for name, e, ok in run_suite():
    print(f"  {name:<40s} {e:.1e} {'ok' if ok else 'FAILED'}")
