"""Reverse-mode autograd on numpy arrays, checked against finite differences.

Run: python demos/01_autograd.py
"""

import numpy as np

from ut_transfer import tensor as T

rng = np.random.default_rng(0)

# A conv -> relu -> pool -> linear chain written directly against the primitives.
with T.precision(np.float64):
    x = T.Tensor(rng.random((2, 1, 6, 6)), requires_grad=True)
    w = T.Tensor(rng.normal(size=(3, 1, 3, 3)), requires_grad=True)
    head = T.Tensor(rng.normal(size=(27, 4)), requires_grad=True)
    labels = np.array([1, 3])

    def loss_of(xv, wv, hv):
        h = T.max_pool2d(T.relu(T.conv2d(xv, wv, padding=1)))
        return T.cross_entropy(T.matmul(T.flatten(h), hv), labels)

    loss = loss_of(x, w, head)
    loss.backward()
    print(f"loss = {loss.item():.6f}")

    # The oracle perturbs one coordinate at a time, so it is slow but independent of the graph.
    for name, t in (("input", x), ("kernel", w), ("head", head)):
        def f(v, name=name):
            args = {"input": x, "kernel": w, "head": head}
            args[name] = T.Tensor(v)
            with T.no_grad():
                return loss_of(args["input"], args["kernel"], args["head"])
        fd = T.finite_difference_gradient(f, t.data.copy())
        err = np.abs(fd - t.grad).max() / np.abs(fd).max()
        print(f"{name:6s} grad shape {t.grad.shape}, max relative error vs central differences {err:.1e}")

# The default dtype is 32-bit; the same check there is accurate to roughly 1e-6.
a = T.Tensor(rng.normal(size=(4, 5)).astype(np.float32), requires_grad=True)
T.tensor_sum(T.mul(T.softmax(a), a)).backward()
print("float32 gradient dtype:", a.grad.dtype)
