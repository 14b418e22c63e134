"""Minimal module system and the leaf layers the network is assembled from.

Modules register children as attributes, in execution order; :meth:`Module.layers`
walks them to produce the structural listing used by the architecture tests.
Each leaf also knows how to propagate a shape symbolically (``trace``), which
backs the shape trace and the parameter/MAC reports without allocating
activations.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import functional as F
from .tensor import Tensor

Shape = tuple  # (n, c, h, w)


class Parameter(Tensor):
    """Trainable tensor. ``decay`` marks whether l2 regularization applies."""

    __slots__ = ("decay",)

    def __init__(self, data, decay: bool = False, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)
        self.decay = decay


@dataclass
class LayerRecord:
    name: str
    kind: str
    in_shape: Shape
    out_shape: Shape
    params: int = 0
    macs: int = 0
    elem_ops: int = 0


class Module:
    kind = "module"

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}{i + 1}" if name != "layers" else str(i), item

    def _own_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield name, value

    def _own_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(())

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._own_parameters():
            yield prefix + name, p
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._own_buffers():
            yield prefix + name, b
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state(self) -> dict[str, np.ndarray]:
        """Every serialized array: parameters, then running statistics."""
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(self.named_buffers())
        return out

    def layers(self, prefix: str = "") -> list[tuple[str, str]]:
        """Leaf layers as ``(qualified name, kind)`` in execution order."""
        kids = list(self.children())
        if not kids:
            return [(prefix.rstrip("."), self.kind)]
        out = []
        for name, child in kids:
            out.extend(child.layers(f"{prefix}{name}."))
        return out

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to(self, dtype) -> "Module":
        for m in self.modules():
            for name, p in m._own_parameters():
                p.data = p.data.astype(dtype)
                p.grad = None
            m._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype) -> None:
        pass

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def trace(self, shape: Shape, prefix: str = "") -> tuple[Shape, list[LayerRecord]]:
        raise NotImplementedError(type(self).__name__)


class Sequential(Module):
    kind = "sequential"

    def __init__(self, **named: Module):
        super().__init__()
        for name, module in named.items():
            setattr(self, name, module)

    def forward(self, x):
        for _, child in self.children():
            x = child(x)
        return x

    def trace(self, shape, prefix=""):
        records = []
        for name, child in self.children():
            shape, recs = child.trace(shape, f"{prefix}{name}.")
            records.extend(recs)
        return shape, records


def _numel(shape: Shape) -> int:
    return int(np.prod(shape))


class Conv2d(Module):
    """Bias-free convolution with same padding.

    ``depthwise=True`` gives one ``k x k`` filter per channel (groups = channels).
    """

    def __init__(self, cin: int, cout: int, kernel: int = 1, stride: int = 1, dilation: int = 1,
                 depthwise: bool = False, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if depthwise and cin != cout:
            raise ValueError(f"depthwise conv needs cin == cout, got {cin} -> {cout}")
        if stride < 1 or dilation < 1:
            raise ValueError(f"stride and dilation must be >= 1, got {stride}, {dilation}")
        self.cin, self.cout, self.kernel = cin, cout, kernel
        self.stride, self.dilation, self.depthwise = stride, dilation, depthwise
        fan_in = kernel * kernel * (1 if depthwise else cin)
        bound = np.sqrt(6.0 / fan_in)
        rng = rng if rng is not None else np.random.default_rng(0)
        shape = (cout, 1 if depthwise else cin, kernel, kernel)
        self.weight = Parameter(rng.uniform(-bound, bound, size=shape).astype(np.float32), decay=not depthwise)

    @property
    def kind(self) -> str:
        if self.depthwise:
            return "dwconv"
        return "pwconv" if self.kernel == 1 else "conv"

    def forward(self, x: Tensor) -> Tensor:
        if self.depthwise:
            return F.depthwise_conv2d(x, self.weight, self.stride, self.dilation)
        return F.conv2d(x, self.weight, self.stride, self.dilation)

    def out_shape(self, shape: Shape) -> Shape:
        n, c, h, w = shape
        if c != self.cin:
            raise ValueError(f"expected {self.cin} input channels, got shape {shape}")
        return (n, self.cout, -(-h // self.stride), -(-w // self.stride))

    def trace(self, shape, prefix=""):
        out = self.out_shape(shape)
        groups = self.cin if self.depthwise else 1
        macs = _numel(out) * self.cin * self.kernel * self.kernel // groups
        return out, [LayerRecord(prefix.rstrip("."), self.kind, shape, out, self.weight.data.size, macs)]


class BatchNorm2d(Module):
    kind = "bn"

    def __init__(self, channels: int, momentum: float = 0.01, eps: float = 1e-3):
        super().__init__()
        self.channels = channels
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def _own_buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var

    def _cast_buffers(self, dtype):
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)

    def trace(self, shape, prefix=""):
        if shape[1] != self.channels:
            raise ValueError(f"batch norm expects {self.channels} channels, got shape {shape}")
        return shape, [LayerRecord(prefix.rstrip("."), self.kind, shape, shape, 2 * self.channels, 0, _numel(shape))]


class _Elementwise(Module):
    def trace(self, shape, prefix=""):
        return shape, [LayerRecord(prefix.rstrip("."), self.kind, shape, shape, 0, 0, _numel(shape))]


class ReLU(_Elementwise):
    kind = "relu"

    def forward(self, x):
        return F.relu(x)


class Dropout(Module):
    kind = "dropout"

    def __init__(self, p: float, seed: int = 0):
        super().__init__()
        self.p = p
        self.rng = np.random.default_rng(seed)

    def forward(self, x):
        return F.dropout(x, self.p, self.training, self.rng)

    def trace(self, shape, prefix=""):
        # identity at inference
        return shape, [LayerRecord(prefix.rstrip("."), self.kind, shape, shape)]


class Add(Module):
    kind = "add"

    def forward(self, a, b):
        return F.add(a, b)

    def trace(self, shape, prefix=""):
        return shape, [LayerRecord(prefix.rstrip("."), self.kind, shape, shape, 0, 0, _numel(shape))]


class Concat(Module):
    kind = "concat"

    def forward(self, tensors):
        return F.concat(tensors, axis=1)

    def trace_many(self, shapes, prefix=""):
        out = (shapes[0][0], sum(s[1] for s in shapes), shapes[0][2], shapes[0][3])
        return out, [LayerRecord(prefix.rstrip("."), self.kind, shapes[0], out)]


class AdaptiveAvgPool(Module):
    kind = "pool"

    def __init__(self, bins: int):
        super().__init__()
        self.bins = bins

    def forward(self, x):
        return F.adaptive_avg_pool(x, self.bins)

    def trace(self, shape, prefix=""):
        n, c, h, w = shape
        if self.bins > h or self.bins > w:
            raise ValueError(f"pooling bin {self.bins} exceeds spatial size {(h, w)}")
        out = (n, c, self.bins, self.bins)
        return out, [LayerRecord(prefix.rstrip("."), self.kind, shape, out, 0, 0, _numel(shape))]


class Resize(Module):
    """Bilinear resize, either by an integer ``factor`` or to an explicit size."""

    kind = "resize"

    def __init__(self, factor: Optional[int] = None):
        super().__init__()
        self.factor = factor

    def _target(self, shape, size):
        if size is not None:
            return size
        return shape[2] * self.factor, shape[3] * self.factor

    def forward(self, x, size=None):
        oh, ow = self._target(x.shape, size)
        return F.bilinear_resize(x, oh, ow)

    def trace(self, shape, prefix="", size=None):
        oh, ow = self._target(shape, size)
        out = (shape[0], shape[1], oh, ow)
        elems = 0 if (oh, ow) == tuple(shape[2:]) else _numel(out)
        return out, [LayerRecord(prefix.rstrip("."), self.kind, shape, out, 0, 0, elems)]
