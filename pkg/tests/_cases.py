"""Random gradient-check cases shared by the unit and acceptance suites."""

import numpy as np

from ut_transfer import tensor as T
from ut_transfer.models import ArchitectureDescriptor, build_model, forward


def _lse_ce(rng):
    labels = rng.integers(0, 4, 3)
    return (lambda a: T.cross_entropy(a, labels, reduction="mean")), [rng.normal(size=(3, 4))]


PRIMITIVES = {
    "add": lambda rng: ((lambda a, b: T.add(a, b)), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
    "sub": lambda rng: ((lambda a, b: T.sub(a, b)), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
    "mul": lambda rng: ((lambda a, b: T.mul(a, b)), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
    "scale": lambda rng: ((lambda a: T.scale(a, 1.7)), [rng.normal(size=(2, 5))]),
    "relu": lambda rng: ((lambda a: T.relu(a)), [rng.normal(size=(4, 5))]),
    "abs": lambda rng: ((lambda a: T.tensor_abs(a)), [rng.normal(size=(4, 5))]),
    "matmul": lambda rng: ((lambda a, b: T.matmul(a, b)), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
    "add_bias": lambda rng: ((lambda a, b: T.add_bias(a, b)), [rng.normal(size=(3, 4)), rng.normal(size=(4,))]),
    "channel_affine": lambda rng: ((lambda a, s, b: T.channel_affine(a, s, b)),
                                   [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(3,)), rng.normal(size=(3,))]),
    "conv2d": lambda rng: ((lambda a, w, b: T.conv2d(a, w, b, stride=1, padding=1)),
                           [rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=(3,))]),
    "conv2d_stride2": lambda rng: ((lambda a, w: T.conv2d(a, w, stride=2, padding=1)),
                                   [rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3))]),
    "max_pool2d": lambda rng: ((lambda a: T.max_pool2d(a, 2)), [rng.normal(size=(2, 2, 4, 6))]),
    "global_avg_pool": lambda rng: ((lambda a: T.global_avg_pool(a)), [rng.normal(size=(2, 3, 4, 4))]),
    "reshape": lambda rng: ((lambda a: T.reshape(a, (6, 4))), [rng.normal(size=(2, 3, 4))]),
    "flatten": lambda rng: ((lambda a: T.flatten(a)), [rng.normal(size=(2, 3, 2, 2))]),
    "sum": lambda rng: ((lambda a: T.tensor_sum(a)), [rng.normal(size=(3, 3))]),
    "mean": lambda rng: ((lambda a: T.tensor_mean(a)), [rng.normal(size=(3, 3))]),
    "log_softmax": lambda rng: ((lambda a: T.log_softmax(a)), [rng.normal(size=(3, 5))]),
    "softmax": lambda rng: ((lambda a: T.softmax(a)), [rng.normal(size=(3, 5))]),
    "cross_entropy": _lse_ce,
}

NETWORKS = (
    ("mlp", (1, 4, 4), (6, 5)),
    ("smallcnn", (1, 8, 8), (2, 3, 4)),
    ("mini_resnet", (2, 6, 6), (2, 3, 3)),
)

KINK_RETRIES = 5


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def primitive_errors(name: str, seed: int, dtypes=(np.float64, np.float32)) -> dict:
    """Max relative error over all inputs of one random case, per dtype.

    Analytic gradients are computed in each dtype; the finite-difference
    oracle runs once, in 64-bit, on the same inputs. Non-scalar outputs are
    reduced with a random linear read-out so the whole Jacobian is probed.
    """
    rng = np.random.default_rng(seed)
    fn, arrays = PRIMITIVES[name](rng)
    out64 = fn(*[T.Tensor(a) for a in arrays])
    weights = None if out64.ndim == 0 else rng.normal(size=out64.shape)

    def reduce(o):
        return o if weights is None else T.tensor_sum(T.mul(o, T.Tensor(weights.astype(o.dtype))))

    oracle = []
    for i, a in enumerate(arrays):
        def f(v, i=i):
            vals = [T.Tensor(x) for x in arrays]
            vals[i] = T.Tensor(v)
            with T.no_grad():
                return float(reduce(fn(*vals)).data)
        oracle.append(T.finite_difference_gradient(f, a.copy(), h=1e-5))
    worst = {}
    for dtype in dtypes:
        tensors = [T.Tensor(a.astype(dtype), requires_grad=True) for a in arrays]
        reduce(fn(*tensors)).backward()
        worst[dtype] = max(rel_error(t.grad.astype(np.float64), fd) for t, fd in zip(tensors, oracle))
    return worst


def primitive_error(name: str, seed: int, dtype) -> float:
    return primitive_errors(name, seed, (dtype,))[dtype]


def network_errors(index: int, seed: int, dtypes=(np.float64, np.float32)) -> dict:
    """Parameter and input gradients of a small random network vs finite differences, per dtype."""
    family, shape, widths = NETWORKS[index]
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        d = ArchitectureDescriptor(family, shape, 3, widths, hidden=4, input_mean=(0.4,) * shape[0],
                                   input_std=(0.3,) * shape[0])
        ref = build_model(d, seed, mode="train")
    y = rng.integers(0, 3, 3)

    def loss64(x):
        with T.no_grad():
            return float(T.cross_entropy(forward(ref, T.Tensor(x))[0], y).data)

    def fd(x, key, h):
        if key == "input":
            return T.finite_difference_gradient(loss64, x, h=h)
        p = ref.params[key]

        def f(v):
            old = p.data
            p.data = v
            try:
                return loss64(x)
            finally:
                p.data = old
        return T.finite_difference_gradient(f, p.data.copy(), h=h)

    def analytic(x, dtype):
        model = ref.copy(dtype)
        model.train()
        xt = T.Tensor(x.astype(dtype), requires_grad=True)
        T.cross_entropy(forward(model, xt)[0], y).backward()
        return {"input": xt.grad, **{n: p.grad.astype(np.float64) for n, p in model.params.items()}}

    # Central differences are only an oracle away from ReLU / max-pool kinks. Where the analytic
    # gradient disagrees, a second step size tells a kink (unstable oracle, input redrawn) from a bug.
    keys = ["input", *ref.params]
    for _ in range(KINK_RETRIES):
        x = rng.random((3,) + shape)
        oracle = {k: fd(x, k, 1e-5) for k in keys}
        g64 = analytic(x, np.float64)
        grads = {dtype: g64 if dtype is np.float64 else analytic(x, dtype) for dtype in dtypes}
        suspect = [k for k in keys if rel_error(g64[k], oracle[k]) > 1e-7]
        if not any(rel_error(oracle[k], fd(x, k, 4e-5)) > 1e-7 for k in suspect):
            break
    else:
        raise AssertionError(f"{family} seed {seed}: no kink-free input in {KINK_RETRIES} draws")
    return {dtype: max(rel_error(g[k].astype(np.float64), oracle[k]) for k in keys) for dtype, g in grads.items()}


def network_error(index: int, seed: int, dtype) -> float:
    return network_errors(index, seed, (dtype,))[dtype]
