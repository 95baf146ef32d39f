"""Batch-1 CPU latency benchmark and the rolling-kernel micro-benchmark."""

from __future__ import annotations

import os
import time
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from .autodiff.tensor import Tensor, no_grad
from .backbone import ModelConfig, build_model
from .blocks import rolling_features, rolling_features_naive, shift_set

# Published mean batch-1 latency on a 16-thread CPU; context only, never asserted.
PUBLISHED_MEAN_MS = 20.02
KERNEL_TOL = 1e-6


@dataclass
class KernelBench:
    shape: tuple
    shifts: tuple
    naive_ms: float
    fused_ms: float
    speedup: float
    max_abs_diff: float
    equivalent: bool


@dataclass
class BenchReport:
    input_size: int
    threads: int
    repeats: int
    warmup: int
    mean_ms: float
    p50_ms: float
    p90_ms: float
    throughput_ips: float
    kernel: Optional[KernelBench] = None
    published_mean_ms: float = PUBLISHED_MEAN_MS

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = [
            f"input {self.input_size}x{self.input_size}, batch 1, threads {self.threads}, "
            f"repeats {self.repeats} (warmup {self.warmup})",
            f"mean {self.mean_ms:.2f} ms  p50 {self.p50_ms:.2f} ms  p90 {self.p90_ms:.2f} ms  "
            f"throughput {self.throughput_ips:.2f} img/s",
            f"reference: published mean {self.published_mean_ms} ms on different hardware (not comparable)",
        ]
        k = self.kernel
        if k is not None:
            lines.append(
                f"rolling kernel {k.shape}: naive {k.naive_ms:.2f} ms, fused {k.fused_ms:.3f} ms, "
                f"speedup {k.speedup:.0f}x, max |diff| {k.max_abs_diff:.2e} -> "
                + ("EQUIVALENT" if k.equivalent else "MISMATCH")
            )
        return "\n".join(lines)


def active_threads() -> int:
    counts = [info.get("num_threads", 1) for info in threadpool_info()]
    return max(counts) if counts else 1


def percentile_summary(times_ms) -> dict:
    t = np.asarray(times_ms, dtype=np.float64)
    mean = float(t.mean())
    return {
        "mean_ms": mean,
        "p50_ms": float(np.percentile(t, 50)),
        "p90_ms": float(np.percentile(t, 90)),
        "throughput_ips": 1000.0 / mean if mean > 0 else float("inf"),
    }


def bench_kernel(B: int = 1, D: int = 16, H: int = 8, W: int = 8, seed: int = 0, repeats: int = 20) -> KernelBench:
    """Time the scalar-loop rolling kernel against the fused one and compare outputs."""
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((B, D, H, W))
    v = rng.standard_normal((B, D, H, W))
    shifts = shift_set(D)
    t0 = time.perf_counter()
    ref = rolling_features_naive(u, v, shifts)
    naive_ms = (time.perf_counter() - t0) * 1e3
    with no_grad():
        fused = rolling_features(Tensor(u), Tensor(v), shifts).data
        t0 = time.perf_counter()
        for _ in range(repeats):
            rolling_features(Tensor(u), Tensor(v), shifts)
        fused_ms = (time.perf_counter() - t0) * 1e3 / repeats
    diff = float(np.max(np.abs(fused - ref)))
    return KernelBench((B, D, H, W), tuple(shifts), naive_ms, fused_ms,
                       naive_ms / max(fused_ms, 1e-9), diff, diff <= KERNEL_TOL)


def bench_model(cfg: ModelConfig, repeats: int = 20, warmup: int = 3, threads: Optional[int] = None,
                seed: int = 0, kernel: bool = True) -> BenchReport:
    """Eval-mode batch-1 forward latency for ``cfg``."""
    if repeats < 1 or warmup < 0:
        raise ValueError("repeats must be >= 1 and warmup >= 0")
    limit = threads if threads is not None else (os.cpu_count() or 1)
    with threadpool_limits(limits=limit):
        model = build_model(cfg, seed)
        model.eval()
        x = np.random.default_rng(seed).standard_normal((1, 3, cfg.input_size, cfg.input_size)).astype(np.float32)
        times = []
        with no_grad():
            for i in range(warmup + repeats):
                t0 = time.perf_counter()
                model(Tensor(x))
                if i >= warmup:
                    times.append((time.perf_counter() - t0) * 1e3)
        report = BenchReport(cfg.input_size, active_threads(), repeats, warmup, **percentile_summary(times))
        if kernel:
            report.kernel = bench_kernel(seed=seed)
    return report
