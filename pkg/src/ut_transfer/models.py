"""Desk-scale architecture zoo with named feature taps.

Four families are available:

* ``mlp``: flatten, then ``Linear -> ReLU`` per hidden width, then a linear head.
* ``smallcnn``: three ``conv3x3 -> affine -> ReLU -> maxpool2`` blocks and a linear head.
* ``mini_resnet``: a conv stem and three residual stages (the later two
  downsample by 2), global average pooling and a linear head.
* ``mini_vgg``: blocks of two ``conv3x3 -> affine -> ReLU`` layers followed by
  ``maxpool2``, then a hidden linear layer and the head.

Every model consumes raw ``[0, 1]`` pixels and applies the per-channel input
normalization stored in its descriptor as the first operation, so attacks
can be written directly in image space. Normalization layers inside the
network are per-channel affine maps with learnable scale and shift and no
batch statistics. Feature taps capture block outputs after the activation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

FAMILIES = ("mlp", "smallcnn", "mini_resnet", "mini_vgg")

DEFAULT_WIDTHS = {
    "mlp": (128,),
    "smallcnn": (8, 16, 32),
    "mini_resnet": (16, 32, 64),
    "mini_vgg": (16, 32),
}


class ModelError(ValueError):
    """Invalid descriptor, parameter set or tap request."""


@dataclass(frozen=True)
class ArchitectureDescriptor:
    family: str
    input_shape: tuple[int, int, int]
    num_classes: int = 10
    widths: tuple[int, ...] = ()
    hidden: int = 64
    input_mean: tuple[float, ...] = ()
    input_std: tuple[float, ...] = ()

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelError(f"unknown architecture family {self.family!r}; expected one of {FAMILIES}")
        shape = tuple(int(s) for s in self.input_shape)
        if len(shape) != 3 or min(shape) < 1:
            raise ModelError(f"input_shape must be (channels, height, width), got {self.input_shape}")
        object.__setattr__(self, "input_shape", shape)
        widths = tuple(int(w) for w in (self.widths or DEFAULT_WIDTHS[self.family]))
        if any(w < 1 for w in widths):
            raise ModelError(f"widths must be positive, got {widths}")
        if self.family == "smallcnn" and len(widths) != 3:
            raise ModelError("smallcnn takes exactly three block widths")
        if self.family == "mini_resnet" and len(widths) != 3:
            raise ModelError("mini_resnet takes exactly three stage widths")
        object.__setattr__(self, "widths", widths)
        if self.num_classes < 2:
            raise ModelError(f"num_classes must be >= 2, got {self.num_classes}")
        c = shape[0]
        mean = tuple(float(m) for m in self.input_mean) or (0.0,) * c
        std = tuple(float(s) for s in self.input_std) or (1.0,) * c
        if len(mean) != c or len(std) != c:
            raise ModelError(f"input normalization needs {c} channel statistics")
        if any(not s > 0 for s in std):
            raise ModelError("input_std entries must be positive")
        object.__setattr__(self, "input_mean", mean)
        object.__setattr__(self, "input_std", std)
        # Fails early if the spatial size is too small for the pooling chain.
        self.block_shapes()

    # -- textual form ---------------------------------------------------------
    def to_text(self) -> str:
        payload = {
            "family": self.family,
            "hidden": self.hidden,
            "input_mean": list(self.input_mean),
            "input_shape": list(self.input_shape),
            "input_std": list(self.input_std),
            "num_classes": self.num_classes,
            "widths": list(self.widths),
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_text(cls, text: str) -> "ArchitectureDescriptor":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ModelError(f"descriptor is not valid JSON: {exc}") from None
        expected = {"family", "hidden", "input_mean", "input_shape", "input_std", "num_classes", "widths"}
        if not isinstance(raw, dict) or set(raw) != expected:
            raise ModelError(f"descriptor keys must be exactly {sorted(expected)}")
        return cls(family=raw["family"], input_shape=tuple(raw["input_shape"]),
                   num_classes=int(raw["num_classes"]), widths=tuple(raw["widths"]),
                   hidden=int(raw["hidden"]), input_mean=tuple(raw["input_mean"]),
                   input_std=tuple(raw["input_std"]))

    # -- shape algebra ----------------------------------------------------------
    @property
    def block_names(self) -> tuple[str, ...]:
        return tuple(self.block_shapes())

    def block_shapes(self) -> dict[str, tuple[int, ...]]:
        """Output shape (without batch axis) of every tap-able block, by depth."""
        c, h, w = self.input_shape
        shapes: dict[str, tuple[int, ...]] = {}
        if self.family == "mlp":
            for i, width in enumerate(self.widths):
                shapes[f"hidden{i}"] = (width,)
        elif self.family == "smallcnn":
            for i, width in enumerate(self.widths):
                h, w = h // 2, w // 2
                if h < 1 or w < 1:
                    raise ModelError(f"input {self.input_shape} too small for smallcnn")
                shapes[f"block{i}"] = (width, h, w)
        elif self.family == "mini_resnet":
            shapes["stem"] = (self.widths[0], h, w)
            for i, width in enumerate(self.widths):
                if i > 0:
                    h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
                shapes[f"stage{i}"] = (width, h, w)
        else:
            for i, width in enumerate(self.widths):
                h, w = h // 2, w // 2
                if h < 1 or w < 1:
                    raise ModelError(f"input {self.input_shape} too small for mini_vgg")
                shapes[f"block{i}"] = (width, h, w)
        return shapes

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        """Every parameter name with its shape, in initialization order."""
        c, h, w = self.input_shape
        k = self.num_classes
        shapes: dict[str, tuple[int, ...]] = {}

        def conv(name, cin, cout, size=3):
            shapes[f"{name}.weight"] = (cout, cin, size, size)
            shapes[f"{name}.bias"] = (cout,)

        def norm(name, ch):
            shapes[f"{name}.scale"] = (ch,)
            shapes[f"{name}.shift"] = (ch,)

        def linear(name, fin, fout):
            shapes[f"{name}.weight"] = (fin, fout)
            shapes[f"{name}.bias"] = (fout,)

        blocks = self.block_shapes()
        if self.family == "mlp":
            fin = c * h * w
            for i, width in enumerate(self.widths):
                linear(f"hidden{i}", fin, width)
                fin = width
            linear("head", fin, k)
        elif self.family == "smallcnn":
            cin = c
            for i, width in enumerate(self.widths):
                conv(f"block{i}.conv", cin, width)
                norm(f"block{i}.norm", width)
                cin = width
            last = blocks[f"block{len(self.widths) - 1}"]
            linear("head", int(np.prod(last)), k)
        elif self.family == "mini_resnet":
            w0 = self.widths[0]
            conv("stem.conv", c, w0)
            norm("stem.norm", w0)
            cin = w0
            for i, width in enumerate(self.widths):
                conv(f"stage{i}.conv1", cin, width)
                norm(f"stage{i}.norm1", width)
                conv(f"stage{i}.conv2", width, width)
                norm(f"stage{i}.norm2", width)
                if i > 0 or cin != width:
                    conv(f"stage{i}.shortcut", cin, width, size=1)
                cin = width
            linear("head", cin, k)
        else:
            cin = c
            for i, width in enumerate(self.widths):
                conv(f"block{i}.conv1", cin, width)
                norm(f"block{i}.norm1", width)
                conv(f"block{i}.conv2", width, width)
                norm(f"block{i}.norm2", width)
                cin = width
            last = blocks[f"block{len(self.widths) - 1}"]
            linear("fc", int(np.prod(last)), self.hidden)
            linear("head", self.hidden, k)
        return shapes

    def parameter_count(self) -> int:
        return int(sum(np.prod(s) for s in self.parameter_shapes().values()))


def _fan_in(name: str, shape: tuple[int, ...], shapes: Mapping[str, tuple[int, ...]]) -> int:
    if name.endswith(".weight"):
        return int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
    wshape = shapes[name.rsplit(".", 1)[0] + ".weight"]
    return int(np.prod(wshape[1:])) if len(wshape) == 4 else wshape[0]


class Model:
    """Descriptor plus named parameters.

    In ``eval`` mode parameters do not record gradients, so the model is
    frozen and may be shared between threads.
    """

    def __init__(self, descriptor: ArchitectureDescriptor, parameters: Mapping[str, Tensor | np.ndarray],
                 mode: str = "eval"):
        expected = descriptor.parameter_shapes()
        names = list(parameters)
        if set(names) != set(expected):
            missing = sorted(set(expected) - set(names))
            extra = sorted(set(names) - set(expected))
            raise ModelError(f"parameter names do not match descriptor (missing {missing}, unexpected {extra})")
        params: dict[str, Tensor] = {}
        for name in expected:
            p = parameters[name]
            t = p if isinstance(p, Tensor) else Tensor(np.asarray(p))
            if t.shape != expected[name]:
                raise ModelError(f"parameter {name} has shape {t.shape}, descriptor implies {expected[name]}")
            params[name] = Tensor(t.data)
        self.descriptor = descriptor
        self.params = params
        self.mode = "eval"
        self.set_mode(mode)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    @property
    def block_names(self) -> tuple[str, ...]:
        return self.descriptor.block_names

    def set_mode(self, mode: str) -> "Model":
        if mode not in ("train", "eval"):
            raise ModelError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.mode = mode
        for p in self.params.values():
            p.requires_grad = mode == "train"
            p.grad = None
        return self

    def train(self) -> "Model":
        return self.set_mode("train")

    def eval(self) -> "Model":
        return self.set_mode("eval")

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self, dtype=None) -> "Model":
        """Deep copy, optionally cast to another float dtype."""
        params = {n: p.data.astype(dtype or p.dtype, copy=True) for n, p in self.params.items()}
        return Model(self.descriptor, params, mode=self.mode)

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def __call__(self, x, taps: Iterable[str] = ()):
        return forward(self, x, taps)

    def __repr__(self) -> str:
        return f"Model({self.descriptor.family}, params={self.parameter_count()}, mode={self.mode})"


def build_model(descriptor: ArchitectureDescriptor, seed: int, mode: str = "eval") -> Model:
    """Kaiming-uniform (fan-in) initialization from ``seed``.

    Weights and biases use ``U(-1 / sqrt(fan_in), +1 / sqrt(fan_in))``, the
    Kaiming-uniform bound for leaky-ReLU slope sqrt(5); affine scales start at
    1 and shifts at 0. Parameters are drawn in descriptor order, so the result is a
    pure function of ``(descriptor, seed)``.
    """
    if isinstance(descriptor, str):
        raise ModelError("build_model expects an ArchitectureDescriptor")
    dtype = T.get_default_dtype()
    rng = np.random.default_rng(seed)
    shapes = descriptor.parameter_shapes()
    params: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        if name.endswith(".scale"):
            arr = np.ones(shape)
        elif name.endswith(".shift"):
            arr = np.zeros(shape)
        else:
            fan_in = _fan_in(name, shape, shapes)
            # The ReLU gain (bound sqrt(6 / fan_in)) puts untrained smallcnn logits near 14 on MNIST
            # without batch statistics, which stalls adversarial training at chance.
            bound = 1.0 / np.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = arr.astype(dtype)
    return Model(descriptor, params, mode=mode)


# -- forward pass ---------------------------------------------------------------

def _prepare_input(model: Model, x) -> Tensor:
    d = model.descriptor
    if isinstance(x, Tensor):
        xt = x if x.dtype == model.dtype else Tensor(x.data.astype(model.dtype))
    else:
        xt = Tensor(np.asarray(x, dtype=model.dtype))
    if xt.ndim != 4 or xt.shape[1:] != d.input_shape:
        raise T.ShapeError(f"forward: batch of shape {xt.shape} does not match input shape {d.input_shape}")
    return xt


def forward(model: Model, batch, taps: Iterable[str] = ()) -> tuple[Tensor, dict[str, Tensor]]:
    """Logits ``[batch x classes]`` plus the requested block activations."""
    d = model.descriptor
    wanted = tuple(taps)
    valid = d.block_names
    unknown = [t for t in wanted if t not in valid]
    if unknown:
        raise ModelError(f"unknown tap(s) {unknown}; valid names are {list(valid)}")
    x = _prepare_input(model, batch)
    p = model.params
    dt = model.dtype
    mean = np.asarray(d.input_mean, dtype=dt)
    std = np.asarray(d.input_std, dtype=dt)
    h = T.channel_affine(x, Tensor(1.0 / std), Tensor(-mean / std))

    captured: dict[str, Tensor] = {}

    def tap(name: str, value: Tensor) -> Tensor:
        if name in wanted:
            captured[name] = value
        return value

    def conv_norm(prefix, conv, norm, inp, stride=1, act=True):
        out = T.conv2d(inp, p[f"{prefix}.{conv}.weight"], p[f"{prefix}.{conv}.bias"], stride=stride, padding=1)
        out = T.channel_affine(out, p[f"{prefix}.{norm}.scale"], p[f"{prefix}.{norm}.shift"])
        return T.relu(out) if act else out

    if d.family == "mlp":
        h = T.flatten(h)
        for i in range(len(d.widths)):
            h = T.relu(T.add_bias(T.matmul(h, p[f"hidden{i}.weight"]), p[f"hidden{i}.bias"]))
            tap(f"hidden{i}", h)
    elif d.family == "smallcnn":
        for i in range(len(d.widths)):
            h = T.max_pool2d(conv_norm(f"block{i}", "conv", "norm", h))
            tap(f"block{i}", h)
        h = T.flatten(h)
    elif d.family == "mini_resnet":
        h = tap("stem", conv_norm("stem", "conv", "norm", h))
        for i, width in enumerate(d.widths):
            stride = 1 if i == 0 else 2
            name = f"stage{i}"
            out = conv_norm(name, "conv1", "norm1", h, stride=stride)
            out = conv_norm(name, "conv2", "norm2", out, act=False)
            if f"{name}.shortcut.weight" in p:
                short = T.conv2d(h, p[f"{name}.shortcut.weight"], p[f"{name}.shortcut.bias"], stride=stride)
            else:
                short = h
            h = tap(name, T.relu(T.add(out, short)))
        h = T.global_avg_pool(h)
    else:
        for i in range(len(d.widths)):
            h = conv_norm(f"block{i}", "conv1", "norm1", h)
            h = conv_norm(f"block{i}", "conv2", "norm2", h)
            h = tap(f"block{i}", T.max_pool2d(h))
        h = T.flatten(h)
        h = T.relu(T.add_bias(T.matmul(h, p["fc.weight"]), p["fc.bias"]))
    logits = T.add_bias(T.matmul(h, p["head.weight"]), p["head.bias"])
    return logits, captured


def predict_logits(model: Model, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Logits for a whole array, without recording a graph."""
    x = np.asarray(x)
    out = []
    with T.no_grad():
        for start in range(0, len(x), batch_size):
            logits, _ = forward(model, x[start:start + batch_size])
            out.append(logits.data)
    if not out:
        return np.zeros((0, model.descriptor.num_classes), dtype=model.dtype)
    return np.concatenate(out)


LossFn = Callable[[Tensor, np.ndarray], Tensor]


def _sum_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    return T.cross_entropy(logits, labels, reduction="sum")


def input_gradient(model: Model, x, labels, taps: Sequence[str] = (), loss_fn: LossFn | None = None) -> np.ndarray:
    """Per-example gradient of the loss with respect to the input pixels.

    The default loss is the summed cross-entropy, so row ``i`` of the result
    is the gradient of example ``i``'s own loss. Requires eval mode so that
    parameters stay untouched.
    """
    if model.mode != "eval":
        raise ModelError("input_gradient requires an eval-mode model")
    xt = _prepare_input(model, x)
    xt = Tensor(xt.data, requires_grad=True)
    logits, _ = forward(model, xt, taps)
    loss = (loss_fn or _sum_cross_entropy)(logits, np.asarray(labels))
    loss.backward()
    if xt.grad is None:
        return np.zeros_like(xt.data)
    return xt.grad
