"""Throughput harness quantifying the cost of the block next to plain pooling.

Timings use min-over-iterations of a monotonic clock (the stable estimator
for short kernels). Numerical outputs (checksums) are reported so runs with
different thread counts can be shown to agree exactly.
"""

from __future__ import annotations

import time

import numpy as np

from . import layers, tensors
from .layers import GnapState


def _best_time(fn, iters: int) -> float:
    best = float("inf")
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        dt = time.perf_counter() - t0
        if dt < best:
            best = dt
    return best


def bench_state(x: np.ndarray, seed: int = 0) -> GnapState:
    """Inference state whose running statistics come from one pass over x."""
    c = x.shape[1]
    warm = GnapState.initialize(c, mode="train")
    layers.gnap_forward(x, warm)
    warm.mode = "inference"
    return warm


def run_bench(
    n: int, c: int, h: int, w: int, iters: int = 50, threads: int = 1, seed: int = 0
) -> dict:
    if min(n, c, h, w) < 1:
        raise ValueError("all dims must be >= 1")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if threads < 1:
        raise ValueError("threads must be >= 1")

    x = tensors.randn_seeded((n, c, h, w), seed)
    state = bench_state(x, seed)
    elements = n * c * h * w

    gap_out = layers.gap_forward(x)
    rw_out, _ = layers.reweight(x, state.eps_norm)
    ref_out, _ = layers.gnap_forward(x, state)
    fused_out = layers.gnap_forward_fused(x, state, threads=threads)

    t_gap = _best_time(lambda: layers.gap_forward(x), iters)
    t_rw = _best_time(lambda: layers.reweight(x, state.eps_norm), iters)
    t_ref = _best_time(lambda: layers.gnap_forward(x, state), iters)
    t_fused = _best_time(
        lambda: layers.gnap_forward_fused(x, state, threads=threads), iters
    )

    def entry(seconds: float) -> dict:
        return {
            "seconds": seconds,
            "elements_per_second": elements / seconds if seconds > 0 else float("inf"),
        }

    return {
        "shape": [n, c, h, w],
        "elements": elements,
        "iters": iters,
        "threads": threads,
        "gap": entry(t_gap),
        "reweight": entry(t_rw),
        "gnap_reference": entry(t_ref),
        "gnap_forward": entry(t_fused),
        "gnap_over_gap_time_ratio": t_fused / t_gap,
        "gnap_reference_over_gap_time_ratio": t_ref / t_gap,
        "checksums": {
            "gap": float(gap_out.sum()),
            "reweight": float(rw_out.sum()),
            "gnap_reference": float(ref_out.sum()),
            "gnap_forward": float(fused_out.sum()),
        },
    }
