"""Release gate: kernel oracles, gradients, shape trace and parameter count."""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import functional as F
from .blocks import PPM, Bottleneck, Classifier, DSConv, FFM
from .checks import gradcheck, naive_bilinear, naive_conv2d, relative_error
from .model import BLOCK_BOUNDARIES, ModelConfig, build, count_params, shape_trace
from .tensor import Tensor

TIME_BUDGET = 300.0
PARAM_TARGET = 1.11e6
PARAM_WINDOW = 0.05

# Block-boundary strides (relative to the input) and widths of the default network.
REFERENCE_BOUNDARIES = tuple((name, 1024 // h, 2048 // w, c) for name, (h, w, c) in BLOCK_BOUNDARIES)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.1f}s)"


def expected_params(cfg: ModelConfig) -> tuple[int, int]:
    """Closed-form ``(without_aux, aux)`` parameter counts for ``cfg``.

    Conv weights have no bias; every BN contributes ``2 * channels``.
    """

    def ds(cin, cout):
        return 9 * cin + 2 * cin + cin * cout + 2 * cout

    def bottleneck(cin, cout, t):
        e = cin * t
        return cin * e + 2 * e + 9 * e + 2 * e + e * cout + 2 * cout

    c0, c1, c2 = cfg.lds_widths
    total = 27 * c0 + 2 * c0 + ds(c0, c1) + ds(c1, c2)
    cin = c2
    for spec in cfg.bottlenecks:
        for _ in range(spec.n):
            total += bottleneck(cin, spec.c, spec.t)
            cin = spec.c
    branch = cin // len(cfg.ppm_bins)
    total += len(cfg.ppm_bins) * (cin * branch + 2 * branch)
    total += (cin + branch * len(cfg.ppm_bins)) * cfg.ppm_out + 2 * cfg.ppm_out
    low, out = cfg.ppm_out, cfg.ffm_out
    total += 9 * low + 2 * low + low * out + 2 * out + c2 * out + 2 * out
    total += 2 * ds(out, out) + out * cfg.num_classes
    aux = (c2 + cfg.ppm_out) * cfg.num_classes
    return total, aux


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> SuiteResult:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as err:  # a crashing suite is a failing suite
        ok, detail = False, f"{type(err).__name__}: {err}"
    return SuiteResult(name, ok, detail, time.perf_counter() - t0)


def oracle_suite(cases: int = 60, seed: int = 0, tol: float = 1e-5) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        depthwise = bool(rng.integers(0, 2))
        k = int(rng.choice([1, 3])) if not depthwise else 3
        stride = int(rng.choice([1, 2]))
        dilation = int(rng.choice([1, 2, 4]))
        c = int(rng.integers(1, 4))
        cout = c if depthwise else int(rng.integers(1, 4))
        h, w = (int(v) for v in rng.integers(3, 10, size=2))
        x = rng.standard_normal((1, c, h, w)).astype(np.float32)
        wt = rng.standard_normal((cout, 1 if depthwise else c, k, k)).astype(np.float32)
        conv = F.depthwise_conv2d if depthwise else F.conv2d
        got = conv(Tensor(x), Tensor(wt), stride, dilation).data
        worst = max(worst, relative_error(got, naive_conv2d(x, wt, stride, dilation, depthwise)))
    for _ in range(cases // 4):
        x = rng.standard_normal((1, 2, *rng.integers(1, 7, size=2)))
        oh, ow = (int(v) for v in rng.integers(1, 13, size=2))
        worst = max(worst, relative_error(F.bilinear_resize(Tensor(x), oh, ow).data, naive_bilinear(x, oh, ow)))
    return worst <= tol, f"worst relative error {worst:.2e} over {cases + cases // 4} cases (tol {tol:g})"


def _block_grad(block, shapes, call, rng) -> float:
    block.to(np.float64)
    inputs = [Tensor(rng.standard_normal(s), requires_grad=True, name=f"input{i}") for i, s in enumerate(shapes)]
    projection = Tensor(rng.standard_normal(call(block, *inputs).shape))
    params = []
    for name, p in block.named_parameters():
        p.name = name
        params.append(p)
    errors = gradcheck(lambda: F.sum(F.mul(call(block, *inputs), projection)), inputs + params)
    return max(errors.values())


def _classifier_call(block, x):
    block.dropout.rng = np.random.default_rng(7)  # same mask on every evaluation
    return block(x, (8, 8))


def gradient_suite(seed: int = 0, tol: float = 1e-4) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    cases = {
        "dsconv": (DSConv(3, 4, 2, rng), [(2, 3, 6, 6)], lambda b, x: b(x)),
        "bottleneck_residual": (Bottleneck(4, 4, 2, 1, rng), [(2, 4, 5, 5)], lambda b, x: b(x)),
        "bottleneck_strided": (Bottleneck(4, 6, 2, 2, rng), [(2, 4, 6, 6)], lambda b, x: b(x)),
        "ppm": (PPM(6, 4, (1, 2, 3), rng), [(2, 6, 6, 6)], lambda b, x: b(x)),
        "ffm": (FFM(3, 4, 5, 2, rng), [(2, 3, 8, 8), (2, 4, 4, 4)], lambda b, h, l: b(h, l)),
        "classifier": (Classifier(4, 3, 0.1, rng), [(2, 4, 4, 4)], _classifier_call),
    }
    worst = {name: _block_grad(block, shapes, call, rng) for name, (block, shapes, call) in cases.items()}
    bad = [f"{k}={v:.2e}" for k, v in worst.items() if not v <= tol]
    top = max(worst, key=worst.get)
    if bad:
        return False, "gradient mismatch: " + ", ".join(bad)
    return True, f"{len(cases)} blocks, worst {top}={worst[top]:.2e} (tol {tol:g})"


def shape_suite(cfg: Optional[ModelConfig] = None) -> tuple[bool, str]:
    """Compare the configured graph's block boundaries to the reference layout."""
    cfg = cfg or ModelConfig()
    h, w = cfg.input_h, cfg.input_w
    model = build(cfg)
    got = dict(shape_trace(model, h, w))
    for name, sh, sw, c in REFERENCE_BOUNDARIES:
        want = (1, c, h // sh, w // sw)
        if got.get(name) != want:
            return False, f"layer {name}: expected {want}, traced {got.get(name)}"
    final = got.get("classifier.up")
    if final != (1, cfg.num_classes, h, w):
        return False, f"layer classifier.up: expected {(1, cfg.num_classes, h, w)}, traced {final}"
    return True, f"{len(REFERENCE_BOUNDARIES) + 1} boundaries match at {h}x{w}"


def param_suite(cfg: Optional[ModelConfig] = None) -> tuple[bool, str]:
    cfg = cfg or ModelConfig()
    counted = count_params(build(cfg, train=True))
    base, aux = expected_params(cfg)
    if (counted.without_aux, counted.aux) != (base, aux):
        return False, f"registry counts {counted.without_aux}+{counted.aux} aux, closed form {base}+{aux} aux"
    detail = f"without_aux={base} aux={aux}"
    if cfg.num_classes == 19 and cfg == ModelConfig(num_classes=19, input_h=cfg.input_h, input_w=cfg.input_w):
        dev = base / PARAM_TARGET - 1
        detail += f" ({dev:+.2%} vs {PARAM_TARGET / 1e6:.2f}M)"
        if abs(dev) > PARAM_WINDOW:
            return False, detail
    return True, detail


def run(cfg: Optional[ModelConfig] = None, log: Callable[[str], None] = print,
        budget: float = TIME_BUDGET) -> bool:
    """Run every suite, print one line each, and return overall success."""
    t0 = time.perf_counter()
    results = [
        _timed("oracle", oracle_suite),
        _timed("gradient", gradient_suite),
        _timed("shape_trace", lambda: shape_suite(cfg)),
        _timed("param_count", lambda: param_suite(cfg)),
    ]
    for r in results:
        log(r.line())
    elapsed = time.perf_counter() - t0
    ok = all(r.passed for r in results)
    log(f"selftest {'passed' if ok else 'FAILED'} in {elapsed:.1f}s")
    if elapsed > budget:
        warnings.warn(f"selftest took {elapsed:.0f}s, over the {budget:.0f}s budget")
    return ok
