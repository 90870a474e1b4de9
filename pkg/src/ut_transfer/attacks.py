"""Gradient-sign attacks in ``[0, 1]`` image space under an L-infinity budget.

All iterative attacks evaluate the gradient at the current iterate and
project back with :func:`clip_to_ball` after every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .models import Model, ModelError, forward, input_gradient
from .tensor import Tensor

KINDS = ("fgsm", "ifgsm", "mifgsm", "ila", "tap")


class AttackError(ValueError):
    """Invalid attack specification or degenerate attack input."""


@dataclass(frozen=True)
class ILAParams:
    base_kind: str = "mifgsm"
    base_iterations: int = 10
    enhance_iterations: int = 10
    layer: str = ""


@dataclass(frozen=True)
class TAPParams:
    layers: tuple[str, ...] = ()
    feature_weight: float = 0.005
    smooth_kernel: int = 3
    smooth_weight: float = 0.01


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    epsilon: float = 0.05
    step_size: float = 0.005
    iterations: int = 20
    decay: float = 0.9
    ila: ILAParams = field(default_factory=ILAParams)
    tap: TAPParams = field(default_factory=TAPParams)
    name: str = ""

    @property
    def label(self) -> str:
        return self.name or self.kind

    def validate(self) -> list[tuple[str, str]]:
        """Problems as ``(field, message)`` pairs; empty when valid."""
        out = []
        if self.kind not in KINDS:
            out.append(("kind", f"unknown attack kind {self.kind!r}"))
        if not self.epsilon >= 0:
            out.append(("epsilon", "must be >= 0"))
        if self.kind != "fgsm" and not self.step_size > 0:
            out.append(("step_size", "must be > 0 for iterative attacks"))
        if self.iterations < 1:
            out.append(("iterations", "must be >= 1"))
        if not self.decay >= 0:
            out.append(("decay", "must be >= 0"))
        if self.kind == "ila":
            if self.ila.base_kind not in ("fgsm", "ifgsm", "mifgsm"):
                out.append(("ila.base_kind", f"unsupported base attack {self.ila.base_kind!r}"))
            if self.ila.base_iterations < 1 or self.ila.enhance_iterations < 1:
                out.append(("ila.iterations", "base and enhance iterations must be >= 1"))
            if not self.ila.layer:
                out.append(("ila.layer", "a target layer is required"))
        if self.kind == "tap":
            if self.tap.smooth_kernel < 1:
                out.append(("tap.smooth_kernel", "must be >= 1"))
            if self.tap.feature_weight < 0 or self.tap.smooth_weight < 0:
                out.append(("tap.weights", "must be >= 0"))
        return out

    def check(self) -> None:
        problems = self.validate()
        if problems:
            raise AttackError("; ".join(f"{k}: {m}" for k, m in problems))


@dataclass
class AdversarialBatch:
    x: np.ndarray
    x_adv: np.ndarray
    labels: np.ndarray
    spec: AttackSpec
    surrogate: tuple[str, int] = ("", 0)

    @property
    def linf(self) -> float:
        return float(np.abs(self.x_adv.astype(np.float64) - self.x).max(initial=0.0))


def clip_to_ball(candidate: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Project onto the epsilon-ball around ``x``, then onto ``[0, 1]``."""
    candidate = np.asarray(candidate)
    x = np.asarray(x)
    if candidate.shape != x.shape:
        raise T.ShapeError(f"clip_to_ball: candidate {candidate.shape} vs clean {x.shape}")
    return np.clip(np.minimum(np.maximum(candidate, x - epsilon), x + epsilon), 0, 1)


def _prep(model: Model, x) -> np.ndarray:
    if model.mode != "eval":
        raise ModelError("attacks require an eval-mode model")
    return np.asarray(x, dtype=model.dtype)


def _eps(x: np.ndarray, value: float):
    return x.dtype.type(value)


def fgsm(model: Model, x, labels, epsilon: float) -> AdversarialBatch:
    x = _prep(model, x)
    if epsilon < 0:
        raise AttackError("epsilon must be >= 0")
    grad = input_gradient(model, x, labels)
    x_adv = np.clip(x + _eps(x, epsilon) * np.sign(grad), 0, 1)
    return AdversarialBatch(x, x_adv, np.asarray(labels), AttackSpec("fgsm", epsilon=epsilon))


def _sign_ascent(model, x, labels, spec, steps, grad_fn, momentum: float | None = None, start=None):
    """Shared loop: ``x_n = clip(x_{n-1} + alpha * sign(direction))``.

    When ``momentum`` is given the direction is the accumulated L1-normalized
    gradient ``g_n = momentum * g_{n-1} + grad / ||grad||_1``.
    """
    eps = _eps(x, spec.epsilon)
    alpha = _eps(x, spec.step_size)
    cur = x.copy() if start is None else start.copy()
    acc = np.zeros(x.shape, dtype=np.float64)
    trajectory = []
    for _ in range(steps):
        grad = grad_fn(cur)
        if momentum is not None:
            flat = np.abs(grad.astype(np.float64)).reshape(len(grad), -1).sum(axis=1)
            norm = np.where(flat > 0, flat, 1.0).reshape((-1,) + (1,) * (grad.ndim - 1))
            acc = momentum * acc + grad.astype(np.float64) / norm
            direction = np.sign(acc).astype(x.dtype)
        else:
            direction = np.sign(grad)
        cur = clip_to_ball(cur + alpha * direction, x, eps).astype(x.dtype, copy=False)
        trajectory.append(cur)
    return cur, trajectory


def ifgsm(model: Model, x, labels, spec: AttackSpec, return_trajectory: bool = False):
    spec.check()
    x = _prep(model, x)
    labels = np.asarray(labels)
    x_adv, traj = _sign_ascent(model, x, labels, spec, spec.iterations,
                               lambda cur: input_gradient(model, cur, labels))
    batch = AdversarialBatch(x, x_adv, labels, spec)
    return (batch, traj) if return_trajectory else batch


def mifgsm(model: Model, x, labels, spec: AttackSpec, return_trajectory: bool = False):
    """Momentum iterative FGSM; zero-gradient examples add nothing to the momentum."""
    spec.check()
    x = _prep(model, x)
    labels = np.asarray(labels)
    x_adv, traj = _sign_ascent(model, x, labels, spec, spec.iterations,
                               lambda cur: input_gradient(model, cur, labels), momentum=float(spec.decay))
    batch = AdversarialBatch(x, x_adv, labels, spec)
    return (batch, traj) if return_trajectory else batch


def _feature(model: Model, x: np.ndarray, layer: str) -> np.ndarray:
    with T.no_grad():
        _, taps = forward(model, x, (layer,))
    return taps[layer].data


def ila_enhance(model: Model, x, labels, spec: AttackSpec) -> AdversarialBatch:
    """Intermediate-level enhancement of a base attack (projection loss).

    Stage 1 runs the base attack for ``base_iterations`` to get a guide
    ``x_g``. Stage 2 restarts from the clean input and runs
    ``enhance_iterations`` sign-ascent steps on ``(F(x') - F(x)) . (F(x_g) - F(x))``
    at the target layer.
    """
    spec.check()
    x = _prep(model, x)
    labels = np.asarray(labels)
    layer = spec.ila.layer
    if layer not in model.block_names:
        raise ModelError(f"ila: unknown layer {layer!r}; valid names are {list(model.block_names)}")
    base = spec.ila.base_kind
    if base == "fgsm":
        guide = fgsm(model, x, labels, spec.epsilon).x_adv
    else:
        base_spec = replace(spec, kind=base, iterations=spec.ila.base_iterations)
        guide = (mifgsm if base == "mifgsm" else ifgsm)(model, x, labels, base_spec).x_adv
    f_clean = _feature(model, x, layer)
    delta_g = _feature(model, guide, layer) - f_clean
    per_example = np.abs(delta_g).reshape(len(x), -1).sum(axis=1)
    if np.any(per_example == 0):
        bad = np.flatnonzero(per_example == 0).tolist()
        raise AttackError(f"ila: degenerate guide, no feature change at layer {layer} for examples {bad}")
    clean_t = Tensor(f_clean)
    guide_t = Tensor(delta_g)

    def grad_fn(cur):
        xt = Tensor(cur, requires_grad=True)
        _, taps = forward(model, xt, (layer,))
        proj = T.tensor_sum(T.mul(T.sub(taps[layer], clean_t), guide_t))
        proj.backward()
        return xt.grad if xt.grad is not None else np.zeros_like(cur)

    x_adv, _ = _sign_ascent(model, x, labels, spec, spec.ila.enhance_iterations, grad_fn)
    return AdversarialBatch(x, x_adv, labels, spec)


def _smoothing_kernel(channels: int, size: int, dtype) -> np.ndarray:
    k = np.zeros((channels, channels, size, size), dtype=dtype)
    for c in range(channels):
        k[c, c] = 1.0 / (size * size)
    return k


def tap_objective(model: Model, cur, x: np.ndarray, labels, spec: AttackSpec,
                  clean_feats: dict[str, np.ndarray] | None = None) -> Tensor:
    """``CE(x') + lambda * sum_l ||F_l(x') - F_l(x)||^2 - eta * ||K_s * (x' - x)||_1``, summed over the batch."""
    layers = tuple(spec.tap.layers) or model.block_names
    if clean_feats is None:
        with T.no_grad():
            _, ft = forward(model, x, layers)
        clean_feats = {k: v.data for k, v in ft.items()}
    xt = cur if isinstance(cur, Tensor) else Tensor(np.asarray(cur, dtype=model.dtype))
    logits, taps = forward(model, xt, layers)
    obj = T.cross_entropy(logits, labels, reduction="sum")
    lam = spec.tap.feature_weight
    for name in layers:
        diff = T.sub(taps[name], Tensor(clean_feats[name]))
        obj = T.add(obj, T.scale(T.tensor_sum(T.mul(diff, diff)), lam))
    s = spec.tap.smooth_kernel
    kernel = Tensor(_smoothing_kernel(x.shape[1], s, model.dtype))
    pert = T.sub(xt, Tensor(x))
    smooth = T.conv2d(pert, kernel, stride=1, padding=s // 2)
    obj = T.sub(obj, T.scale(T.tensor_sum(T.tensor_abs(smooth)), spec.tap.smooth_weight))
    return obj


def feature_distance(model: Model, x_adv: np.ndarray, x: np.ndarray, layers: Sequence[str] = ()) -> np.ndarray:
    """Per-example ``sum_l ||F_l(x_adv) - F_l(x)||_2^2``."""
    layers = tuple(layers) or model.block_names
    with T.no_grad():
        _, fa = forward(model, x_adv, layers)
        _, fc = forward(model, x, layers)
    total = np.zeros(len(x), dtype=np.float64)
    for name in layers:
        d = (fa[name].data.astype(np.float64) - fc[name].data).reshape(len(x), -1)
        total += (d * d).sum(axis=1)
    return total


def tap(model: Model, x, labels, spec: AttackSpec) -> AdversarialBatch:
    """Transferable adversarial perturbation: feature-distance ascent with a smoothness penalty."""
    spec.check()
    x = _prep(model, x)
    labels = np.asarray(labels)
    layers = tuple(spec.tap.layers) or model.block_names
    unknown = [l for l in layers if l not in model.block_names]
    if unknown:
        raise ModelError(f"tap: unknown layer(s) {unknown}; valid names are {list(model.block_names)}")
    if not layers:
        raise AttackError("tap: model exposes no feature layers")
    with T.no_grad():
        _, ft = forward(model, x, layers)
    clean = {k: v.data for k, v in ft.items()}

    def grad_fn(cur):
        xt = Tensor(cur, requires_grad=True)
        tap_objective(model, xt, x, labels, spec, clean).backward()
        return xt.grad

    x_adv, _ = _sign_ascent(model, x, labels, spec, spec.iterations, grad_fn)
    return AdversarialBatch(x, x_adv, labels, spec)


def run_attack(model: Model, x, labels, spec: AttackSpec, batch_size: int = 500) -> AdversarialBatch:
    """Dispatch on ``spec.kind``, processing the input in chunks of ``batch_size``."""
    spec.check()
    x = _prep(model, x)
    labels = np.asarray(labels)
    if spec.epsilon == 0:
        return AdversarialBatch(x, x.copy(), labels, spec)
    fn = {
        "fgsm": lambda xb, yb: fgsm(model, xb, yb, spec.epsilon),
        "ifgsm": lambda xb, yb: ifgsm(model, xb, yb, spec),
        "mifgsm": lambda xb, yb: mifgsm(model, xb, yb, spec),
        "ila": lambda xb, yb: ila_enhance(model, xb, yb, spec),
        "tap": lambda xb, yb: tap(model, xb, yb, spec),
    }[spec.kind]
    parts = [fn(x[s:s + batch_size], labels[s:s + batch_size]).x_adv for s in range(0, len(x), batch_size)]
    x_adv = np.concatenate(parts) if parts else x.copy()
    return AdversarialBatch(x, x_adv, labels, spec)
