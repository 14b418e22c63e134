"""Inference throughput: un-timed burn-in frames, then timed frames."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

BURN_IN = 100
MEASURED = 100


@dataclass
class BenchResult:
    mode: str
    height: int
    width: int
    burn_in: int
    measured: int
    threads: int
    latencies: list = field(default_factory=list)

    @property
    def fps_mean(self) -> float:
        """Frames over total measured time (the reciprocal of mean latency)."""
        return len(self.latencies) / sum(self.latencies)

    @property
    def latency_mean(self) -> float:
        return float(np.mean(self.latencies))

    def report(self) -> str:
        lat = ",".join(f"{v * 1e3:.3f}" for v in self.latencies)
        return (
            f"mode={self.mode} input={self.height}x{self.width} threads={self.threads} "
            f"burn_in={self.burn_in} measured={self.measured} "
            f"fps_mean={self.fps_mean:.4f} latency_mean_ms={self.latency_mean * 1e3:.3f}\n"
            f"latencies_ms={lat}"
        )


def bench_fps(model, height: int, width: int, burn_in: int = BURN_IN, measured: int = MEASURED,
              mode: str = "cls", threads: int = 1, seed: int = 0) -> BenchResult:
    """Time ``measured`` forward passes after ``burn_in`` un-timed ones.

    The clock wraps the inference call only; input generation happens once,
    up front.  BLAS and other native pools are limited to ``threads``.
    """
    if mode not in ("prob", "cls"):
        raise ValueError(f"mode must be 'prob' or 'cls', got {mode!r}")
    if burn_in < 0 or measured < 1:
        raise ValueError("burn_in must be >= 0 and measured >= 1")
    model.check_input((1, 3, height, width))
    image = np.random.default_rng(seed).standard_normal((1, 3, height, width)).astype(np.float32)
    result = BenchResult(mode, height, width, burn_in, measured, threads)
    model.eval()
    with threadpool_limits(limits=threads):
        for _ in range(burn_in):
            model.infer(image, mode)
        for _ in range(measured):
            t0 = time.perf_counter()
            model.infer(image, mode)
            result.latencies.append(time.perf_counter() - t0)
    return result
