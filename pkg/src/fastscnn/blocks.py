"""Network building blocks: DSConv, bottleneck, PPM, FFM and the heads."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import functional as F
from .layers import (
    Add,
    AdaptiveAvgPool,
    BatchNorm2d,
    Concat,
    Conv2d,
    Dropout,
    Module,
    ReLU,
    Resize,
    Sequential,
)
from .tensor import Tensor

MODES = ("logits", "prob", "cls")


@dataclass(frozen=True)
class BottleneckSpec:
    """One bottleneck row: expansion ``t``, output channels, repeats ``n``, stride."""

    t: int
    c: int
    n: int
    s: int

    def __post_init__(self):
        if self.t < 1 or self.n < 1 or self.s < 1 or self.c < 1:
            raise ValueError(f"invalid bottleneck spec {self}")


def _rng(rng):
    return rng if rng is not None else np.random.default_rng(0)


class ConvBNReLU(Sequential):
    def __init__(self, cin, cout, kernel=3, stride=1, rng=None):
        super().__init__(
            conv=Conv2d(cin, cout, kernel, stride, rng=_rng(rng)),
            bn=BatchNorm2d(cout),
            relu=ReLU(),
        )


class DSConv(Sequential):
    """Depthwise 3x3 -> BN -> pointwise 1x1 -> BN -> ReLU.

    There is deliberately no activation between the two convolutions.
    """

    def __init__(self, cin: int, cout: int, stride: int = 1, rng=None):
        rng = _rng(rng)
        super().__init__(
            dw=Conv2d(cin, cin, 3, stride, depthwise=True, rng=rng),
            dw_bn=BatchNorm2d(cin),
            pw=Conv2d(cin, cout, 1, rng=rng),
            pw_bn=BatchNorm2d(cout),
            relu=ReLU(),
        )


class Bottleneck(Module):
    """Inverted residual: expand x t, depthwise 3x3/s, linear projection.

    The skip-add is present iff ``stride == 1`` and ``cin == cout``.
    """

    def __init__(self, cin: int, cout: int, t: int, stride: int, rng=None):
        super().__init__()
        if t < 1:
            raise ValueError(f"expansion factor must be >= 1, got {t}")
        rng = _rng(rng)
        hidden = t * cin
        self.cin, self.cout, self.t, self.stride = cin, cout, t, stride
        self.residual = stride == 1 and cin == cout
        self.expand = Conv2d(cin, hidden, 1, rng=rng)
        self.expand_bn = BatchNorm2d(hidden)
        self.expand_relu = ReLU()
        self.dw = Conv2d(hidden, hidden, 3, stride, depthwise=True, rng=rng)
        self.dw_bn = BatchNorm2d(hidden)
        self.dw_relu = ReLU()
        self.project = Conv2d(hidden, cout, 1, rng=rng)
        self.project_bn = BatchNorm2d(cout)
        if self.residual:
            self.skip_add = Add()

    def _branch(self):
        return [m for name, m in self.children() if name != "skip_add"]

    def forward(self, x: Tensor) -> Tensor:
        y = x
        for m in self._branch():
            y = m(y)
        return self.skip_add(x, y) if self.residual else y

    def trace(self, shape, prefix=""):
        records = []
        out = shape
        for name, m in self.children():
            out, recs = m.trace(out, f"{prefix}{name}.")
            records.extend(recs)
        return out, records


class BottleneckGroup(Module):
    """``n`` bottlenecks; only the first strides and changes width."""

    def __init__(self, cin: int, spec: BottleneckSpec, rng=None):
        super().__init__()
        rng = _rng(rng)
        self.spec = spec
        self.block = [Bottleneck(cin, spec.c, spec.t, spec.s, rng)]
        self.block += [Bottleneck(spec.c, spec.c, spec.t, 1, rng) for _ in range(spec.n - 1)]

    def forward(self, x):
        for b in self.block:
            x = b(x)
        return x

    def trace(self, shape, prefix=""):
        records = []
        for name, b in self.children():
            shape, recs = b.trace(shape, f"{prefix}{name}.")
            records.extend(recs)
        return shape, records


class PoolBranch(Module):
    def __init__(self, cin: int, cout: int, bins: int, rng=None):
        super().__init__()
        self.pool = AdaptiveAvgPool(bins)
        self.conv = Conv2d(cin, cout, 1, rng=_rng(rng))
        self.bn = BatchNorm2d(cout)
        self.relu = ReLU()
        self.up = Resize()

    def forward(self, x):
        size = x.shape[2:]
        return self.up(self.relu(self.bn(self.conv(self.pool(x)))), size)

    def trace(self, shape, prefix=""):
        records = []
        out = shape
        for name in ("pool", "conv", "bn", "relu"):
            out, recs = getattr(self, name).trace(out, f"{prefix}{name}.")
            records.extend(recs)
        out, recs = self.up.trace(out, f"{prefix}up.", size=tuple(shape[2:]))
        return out, records + recs


class PPM(Module):
    """Pyramid pooling: per-bin pool -> 1x1 (cin/len(bins)) -> BN -> ReLU -> upsample,
    concatenated after the input and projected to ``cout``."""

    def __init__(self, cin: int, cout: int, bins: Sequence[int] = (1, 2, 3, 6), rng=None):
        super().__init__()
        rng = _rng(rng)
        bins = tuple(bins)
        if list(bins) != sorted(bins) or len(set(bins)) != len(bins):
            raise ValueError(f"PPM bins must be strictly ascending, got {bins}")
        if cin % len(bins):
            raise ValueError(f"PPM input width {cin} not divisible by {len(bins)} branches")
        self.bins = bins
        width = cin // len(bins)
        self.branch = [PoolBranch(cin, width, b, rng) for b in bins]
        self.concat = Concat()
        self.proj = Conv2d(cin + width * len(bins), cout, 1, rng=rng)
        self.proj_bn = BatchNorm2d(cout)
        self.proj_relu = ReLU()

    def _check(self, shape):
        if self.bins[-1] > min(shape[2], shape[3]):
            raise ValueError(f"PPM bin {self.bins[-1]} larger than input spatial size {tuple(shape[2:])}")

    def forward(self, x):
        self._check(x.shape)
        y = self.concat([x] + [b(x) for b in self.branch])
        return self.proj_relu(self.proj_bn(self.proj(y)))

    def trace(self, shape, prefix=""):
        self._check(shape)
        records = []
        shapes = [shape]
        for name, b in self.children():
            if isinstance(b, PoolBranch):
                s, recs = b.trace(shape, f"{prefix}{name}.")
                shapes.append(s)
                records.extend(recs)
        out, recs = self.concat.trace_many(shapes, f"{prefix}concat.")
        records.extend(recs)
        for name in ("proj", "proj_bn", "proj_relu"):
            out, recs = getattr(self, name).trace(out, f"{prefix}{name}.")
            records.extend(recs)
        return out, records


class FFM(Module):
    """Feature fusion by addition.

    Low-res path: upsample x factor -> dilated depthwise 3x3 -> BN -> ReLU -> 1x1 -> BN.
    High-res path: 1x1 -> BN.  A single ReLU follows the sum.
    """

    def __init__(self, c_high: int, c_low: int, cout: int, factor: int = 4, rng=None):
        super().__init__()
        rng = _rng(rng)
        if factor < 1:
            raise ValueError(f"fusion factor must be >= 1, got {factor}")
        self.factor = factor
        self.up = Resize(factor)
        self.low_dw = Conv2d(c_low, c_low, 3, 1, dilation=factor, depthwise=True, rng=rng)
        self.low_dw_bn = BatchNorm2d(c_low)
        self.low_dw_relu = ReLU()
        self.low_pw = Conv2d(c_low, cout, 1, rng=rng)
        self.low_bn = BatchNorm2d(cout)
        self.high_pw = Conv2d(c_high, cout, 1, rng=rng)
        self.high_bn = BatchNorm2d(cout)
        self.fuse = Add()
        self.relu = ReLU()

    def _check(self, high, low):
        hh, hw = high[2:]
        lh, lw = low[2:]
        if high[0] != low[0] or (hh, hw) != (lh * self.factor, lw * self.factor):
            raise ValueError(
                f"FFM needs high-res size = {self.factor} x low-res size: "
                f"high shape {tuple(high)}, low shape {tuple(low)}"
            )

    def forward(self, high: Tensor, low: Tensor) -> Tensor:
        self._check(high.shape, low.shape)
        y = self.up(low)
        y = self.low_bn(self.low_pw(self.low_dw_relu(self.low_dw_bn(self.low_dw(y)))))
        z = self.high_bn(self.high_pw(high))
        return self.relu(self.fuse(z, y))

    def trace(self, high, low, prefix=""):
        self._check(high, low)
        records = []
        out = low
        for name in ("up", "low_dw", "low_dw_bn", "low_dw_relu", "low_pw", "low_bn"):
            out, recs = getattr(self, name).trace(out, f"{prefix}{name}.")
            records.extend(recs)
        hi = high
        for name in ("high_pw", "high_bn"):
            hi, recs = getattr(self, name).trace(hi, f"{prefix}{name}.")
            records.extend(recs)
        for name in ("fuse", "relu"):
            out, recs = getattr(self, name).trace(out, f"{prefix}{name}.")
            records.extend(recs)
        return out, records


def _finish(logits: Tensor, mode: str):
    if mode == "logits":
        return logits
    if mode == "prob":
        return F.channel_softmax(logits)
    if mode == "cls":
        return F.channel_argmax(logits)
    raise ValueError(f"unknown output mode {mode!r}; expected one of {MODES}")


class Classifier(Module):
    """Two stride-1 DSConvs, dropout, 1x1 conv to class logits, bilinear upsample."""

    def __init__(self, cin: int, num_classes: int, p_dropout: float = 0.1, rng=None, seed: int = 0):
        super().__init__()
        rng = _rng(rng)
        self.dsconv1 = DSConv(cin, cin, 1, rng)
        self.dsconv2 = DSConv(cin, cin, 1, rng)
        self.dropout = Dropout(p_dropout, seed)
        self.conv = Conv2d(cin, num_classes, 1, rng=rng)
        self.up = Resize()

    def forward(self, x: Tensor, size: Optional[tuple[int, int]] = None, mode: str = "logits"):
        if mode not in MODES:
            raise ValueError(f"unknown output mode {mode!r}; expected one of {MODES}")
        y = self.conv(self.dropout(self.dsconv2(self.dsconv1(x))))
        if size is not None:
            y = self.up(y, size)
        return _finish(y, mode)

    def trace(self, shape, prefix="", size=None):
        records = []
        out = shape
        for name in ("dsconv1", "dsconv2", "dropout", "conv"):
            out, recs = getattr(self, name).trace(out, f"{prefix}{name}.")
            records.extend(recs)
        out, recs = self.up.trace(out, f"{prefix}up.", size=size or tuple(out[2:]))
        return out, records + recs


class AuxHead(Module):
    """Training-only head: 1x1 conv to class logits, then upsample."""

    def __init__(self, cin: int, num_classes: int, rng=None):
        super().__init__()
        self.conv = Conv2d(cin, num_classes, 1, rng=_rng(rng))
        self.up = Resize()

    def forward(self, x, size):
        return self.up(self.conv(x), size)

    def trace(self, shape, prefix="", size=None):
        out, recs = self.conv.trace(shape, f"{prefix}conv.")
        out, more = self.up.trace(out, f"{prefix}up.", size=size or tuple(out[2:]))
        return out, recs + more

