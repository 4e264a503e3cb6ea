"""Analytic MAC counting and wall-clock benchmarking: OA vs self-attention.

Counting conventions (also enforced by the instrumented tensor ops):
matmul/linear/conv count one MAC per multiply; elementwise multiplies and
divides count one per output element; additions, nonlinearities (except
the softmax normalization, which is excluded) and data movement are free.
The selective scan charges 6 MACs per (step, channel, state) plus its
input projections.  Absolute values therefore depend on these
conventions; growth-rate slopes do not.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, asdict

import numpy as np

from .tensor import Tensor, macs, no_grad
from .ssm import SCAN_MACS_PER_STATE
from .omniscan import (
    CHANNEL_BRANCH_WIDTH, DIRECTION_PRESETS, DirectionSet, OABlockParams, oa_forward,
)

__all__ = [
    "BenchRow",
    "count_macs_mamba",
    "count_macs_oa",
    "count_macs_attention",
    "attention_forward",
    "run_benchmark",
    "loglog_slope",
    "crossover_length",
    "write_csv",
]


@dataclass
class BenchRow:
    mechanism: str
    B: int
    C: int
    F: int
    T: int
    H: int
    macs: int
    wall_ms: float
    repeats: int


def count_macs_mamba(G: int, L: int, D: int, H: int,
                     expand: int = 2, conv_width: int = 4) -> int:
    """Exact MACs of one Mamba block call on (G, L, D) sequences."""
    e = expand * D
    per_pos = (
        D * e                       # input projection
        + e * conv_width            # causal depthwise conv
        + e * e + 2 * e * H         # delta / B / C projections
        + SCAN_MACS_PER_STATE * e * H
        + e                         # skip connection multiply
        + D * e                     # gate projection
        + e                         # gate multiply
        + e * D                     # output projection
    )
    return G * L * per_pos


def count_macs_oa(B: int, C: int, F: int, T: int, H: int,
                  direction_set: DirectionSet | str) -> int:
    """Closed-form MAC count of one OA block forward pass."""
    if isinstance(direction_set, str):
        direction_set = DIRECTION_PRESETS[direction_set]
    total = B * F * T * C * (2 * C)                 # channel-doubling conv
    for d in direction_set.tf_directions:
        G, L = (B * F, T) if d.axis == "T" else (B * T, F)
        total += count_macs_mamba(G, L, C, H)
    total += B * C * F * T                          # direction-sum gate
    if direction_set.channel_branch:
        total += B * C                              # pooling normalization
        total += 2 * count_macs_mamba(B, C, 1, H, expand=CHANNEL_BRANCH_WIDTH)
        total += B * C * F * T                      # channel gate multiply
    return total


def count_macs_attention(B: int, n_layers: int, T: int, D: int) -> int:
    """Single-head full-sequence attention: QKV + scores + mix + output."""
    per_layer = 3 * T * D * D + T * T * D + T * T * D + T * D * D
    return B * n_layers * per_layer


def attention_forward(x: np.ndarray, wq, wk, wv, wo) -> np.ndarray:
    """Naive quadratic self-attention over (T, D); counted matmuls only."""
    xt = Tensor(x)
    q = (xt @ Tensor(wq)).data
    k = (xt @ Tensor(wk)).data
    v = (xt @ Tensor(wv)).data
    scores = (Tensor(q) @ Tensor(k.T)).data / np.sqrt(x.shape[1])
    scores -= scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)
    mixed = (Tensor(w) @ Tensor(v)).data
    return (Tensor(mixed) @ Tensor(wo)).data


def _median_wall_ms(fn, warmup: int = 2, repeats: int = 5) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def run_benchmark(t_grid, B: int = 1, C: int = 8, F: int = 16, H: int = 16,
                  direction_set: str = "10d_tfc", attn_width: int = 64,
                  repeats: int = 5, warmup: int = 2, seed: int = 17) -> list[BenchRow]:
    """Measure both mechanisms over the T grid; 2 rows per grid point."""
    rng = np.random.default_rng(seed)
    dirs = DIRECTION_PRESETS[direction_set]
    oa_params = OABlockParams.init(rng, C, H, dirs)
    d = attn_width
    wq, wk, wv, wo = (rng.standard_normal((d, d)) / np.sqrt(d) for _ in range(4))
    rows = []
    for t_len in t_grid:
        z = rng.standard_normal((B, C, F, t_len))

        def oa_fn(z=z):
            with no_grad():
                oa_forward(Tensor(z), oa_params)

        wall = _median_wall_ms(oa_fn, warmup, repeats)
        rows.append(BenchRow("oa", B, C, F, t_len, H,
                             count_macs_oa(B, C, F, t_len, H, dirs), wall, repeats))
        x = rng.standard_normal((t_len, d))

        def attn_fn(x=x):
            attention_forward(x, wq, wk, wv, wo)

        wall = _median_wall_ms(attn_fn, warmup, repeats)
        rows.append(BenchRow("self_attention", B, 0, 0, t_len, 0,
                             count_macs_attention(B, 1, t_len, d), wall, repeats))
    return rows


def instrumented_macs_oa(B: int, C: int, F: int, T_len: int, H: int,
                         direction_set: str, seed: int = 17) -> int:
    """Run a real OA forward with the global MAC counter as the oracle."""
    rng = np.random.default_rng(seed)
    params = OABlockParams.init(rng, C, H, DIRECTION_PRESETS[direction_set])
    z = rng.standard_normal((B, C, F, T_len))
    with no_grad(), macs.counting() as counter:
        oa_forward(Tensor(z), params)
    return counter.total


def instrumented_macs_attention(T_len: int, D: int, seed: int = 17) -> int:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((T_len, D))
    wq, wk, wv, wo = (rng.standard_normal((D, D)) for _ in range(4))
    with macs.counting() as counter:
        attention_forward(x, wq, wk, wv, wo)
    return counter.total


def loglog_slope(t_values, counts) -> float:
    """Least-squares slope of log(count) against log(T)."""
    return float(np.polyfit(np.log(np.asarray(t_values, dtype=float)),
                            np.log(np.asarray(counts, dtype=float)), 1)[0])


def crossover_length(B, C, F, H, direction_set, attn_width,
                     t_max: int = 1 << 22) -> int | None:
    """Smallest T where attention MACs exceed OA MACs, if any."""
    t = 1
    while t <= t_max:
        if (count_macs_attention(B, 1, t, attn_width)
                > count_macs_oa(B, C, F, t, H, direction_set)):
            return t
        t *= 2
    return None


def write_csv(path, rows: list[BenchRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["mechanism", "B", "C", "F", "T", "H",
                            "macs", "wall_ms", "repeats"])
        writer.writeheader()
        for row in rows:
            writer.writerow(asdict(row))
