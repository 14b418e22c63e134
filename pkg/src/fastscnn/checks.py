"""Reference oracles and finite-difference gradient checking.

These are written independently of the vectorized kernels: plain loops over
every output element with the padding rule spelled out again, so agreement
between the two is meaningful.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .tensor import Tape, Tensor


def naive_conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, dilation: int = 1,
                 depthwise: bool = False) -> np.ndarray:
    """Direct cross-correlation, same padding, in float64 nested loops."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wid = x.shape
    cout, _, k, _ = w.shape
    oh, ow = math.ceil(h / stride), math.ceil(wid / stride)
    top = max((oh - 1) * stride + (k - 1) * dilation + 1 - h, 0) // 2
    left = max((ow - 1) * stride + (k - 1) * dilation + 1 - wid, 0) // 2
    out = np.zeros((n, cout, oh, ow))
    for b in range(n):
        for oc in range(cout):
            in_channels = [oc] if depthwise else range(c)
            for y in range(oh):
                for xx in range(ow):
                    acc = 0.0
                    for ic in in_channels:
                        wc = 0 if depthwise else ic
                        for i in range(k):
                            r = y * stride + i * dilation - top
                            if r < 0 or r >= h:
                                continue
                            for j in range(k):
                                col = xx * stride + j * dilation - left
                                if 0 <= col < wid:
                                    acc += x[b, ic, r, col] * w[oc, wc, i, j]
                    out[b, oc, y, xx] = acc
    return out


def naive_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Scalar half-pixel bilinear interpolation."""
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    out = np.zeros((n, c, out_h, out_w))

    def coord(d, size_in, size_out):
        s = (d + 0.5) * size_in / size_out - 0.5
        s = min(max(s, 0.0), size_in - 1)
        lo = int(math.floor(s))
        return lo, min(lo + 1, size_in - 1), s - lo

    for y in range(out_h):
        y0, y1, fy = coord(y, h, out_h)
        for xx in range(out_w):
            x0, x1, fx = coord(xx, w, out_w)
            top = x[:, :, y0, x0] * (1 - fx) + x[:, :, y0, x1] * fx
            bot = x[:, :, y1, x0] * (1 - fx) + x[:, :, y1, x1] * fx
            out[:, :, y, xx] = top * (1 - fy) + bot * fy
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)``.

    The floor keeps analytically-zero gradients (finite differences return
    round-off of order 1e-12 there) from reading as a 100% error.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def _same_masks(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _eval(fn):
    with F.record_relu_masks() as masks:
        value = float(fn().data)
    return value, masks


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, step: float = 1e-3, min_step: float = 1e-7) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``t``.

    A coordinate whose +/- step flips any ReLU relative to the unperturbed
    pattern straddles a kink, where the difference quotient is not a
    derivative; that coordinate is retried with the step shrunk tenfold until
    the pattern holds or ``min_step`` is reached.
    """
    _, base = _eval(fn)
    flat = t.data.reshape(-1)
    grad = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        h = step
        while True:
            flat[i] = orig + h
            fp, mp = _eval(fn)
            flat[i] = orig - h
            fm, mm = _eval(fn)
            flat[i] = orig
            if (_same_masks(mp, base) and _same_masks(mm, base)) or h / 10 < min_step:
                break
            h /= 10
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(t.shape)


def gradcheck(fn: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-3) -> dict[str, float]:
    """Compare tape gradients against central differences.

    ``fn`` must be deterministic and read ``tensors`` (float64) by reference.
    Returns the relative error per tensor, keyed by name or position.
    """
    for t in tensors:
        if t.dtype != np.float64:
            raise TypeError(f"gradcheck needs float64 tensors, got {t.dtype} for {t!r}")
        t.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    errors = {}
    for idx, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        errors[t.name or str(idx)] = relative_error(analytic, numeric_grad(fn, t, step))
    return errors
