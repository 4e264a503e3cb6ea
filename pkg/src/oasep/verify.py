"""Self-check suites: oracle equivalences, gradients, bijectivity,
equivariance.  Each suite returns its worst observed error so the CLI can
print a pass/fail table; the same helpers back the pytest suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, no_grad, backward
from . import ssm
from .omniscan import (
    DIRECTION_PRESETS, OABlockParams, oa_forward,
    serialize_direction, deserialize_direction, ScanDirection,
)

__all__ = [
    "SuiteResult",
    "finite_diff_check",
    "suite_recurrence_kernel",
    "suite_parallel_sequential",
    "suite_gradients",
    "suite_bijectivity",
    "suite_equivariance",
    "all_suites",
]


@dataclass
class SuiteResult:
    name: str
    max_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_err <= self.tolerance


def finite_diff_check(build_loss, params: dict[str, Tensor],
                      step: float = 1e-5, floor: float = 1e-3) -> float:
    """Worst relative error between tape gradients and central differences.

    build_loss() must rebuild the scalar loss from the current parameter
    values.  Relative error uses a small denominator floor so near-zero
    gradients are compared absolutely.
    """
    for p in params.values():
        p.grad = None
    loss = build_loss()
    backward(loss)
    worst = 0.0
    with no_grad():
        for p in params.values():
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            gflat = analytic.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = build_loss().item()
                flat[i] = orig - step
                dn = build_loss().item()
                flat[i] = orig
                fd = (up - dn) / (2.0 * step)
                err = abs(gflat[i] - fd) / (max(abs(gflat[i]), abs(fd)) + floor)
                worst = max(worst, err)
    return worst


def _random_instance(rng, H, L):
    A = -np.exp(rng.uniform(-2.0, 1.0, H))
    delta = rng.uniform(0.05, 1.0)
    B = rng.uniform(-1.0, 1.0, H)
    C = rng.uniform(-1.0, 1.0, H)
    Abar, Bbar = ssm.discretize(delta, A, B)
    return Abar, Bbar, C


def suite_recurrence_kernel(n_instances: int = 100, seed: int = 17) -> SuiteResult:
    """Time-invariant recurrence against the materialized kernel form."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        H = int(rng.integers(1, 17))
        L = int(rng.integers(1, 65))
        Abar, Bbar, C = _random_instance(rng, H, L)
        x = rng.uniform(-1.0, 1.0, L)
        y_seq = ssm.scan_sequential(
            x, np.tile(Abar, (L, 1)), np.tile(Bbar, (L, 1)), np.tile(C, (L, 1)))
        K = ssm.kernel_materialize(Abar, Bbar, C, L)
        y_ker = ssm.scan_via_kernel(x, K)
        worst = max(worst, float(np.max(np.abs(y_seq - y_ker))))
    return SuiteResult("recurrence_vs_kernel", worst, 1e-10)


def suite_parallel_sequential(lengths=(1, 2, 3, 17, 64, 1000),
                              seed: int = 17) -> SuiteResult:
    """Blelloch scan against the sequential recurrence, time-varying params."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for L in lengths:
        H = 8
        Abar = rng.uniform(0.0, 1.0, (L, H))
        Bbar = rng.uniform(-1.0, 1.0, (L, H))
        C = rng.uniform(-1.0, 1.0, (L, H))
        x = rng.uniform(-1.0, 1.0, L)
        y_seq = ssm.scan_sequential(x, Abar, Bbar, C)
        y_par = ssm.scan_parallel(x, Abar, Bbar, C)
        worst = max(worst, float(np.max(np.abs(y_seq - y_par))))
    return SuiteResult("parallel_vs_sequential", worst, 1e-10)


def suite_gradients(seed: int = 17) -> SuiteResult:
    """Finite-difference check of the fused scan and an OA block, tiny dims."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-1.0, 1.0, (2, 5, 3)), requires_grad=True)
    p = ssm.SSMParams.init(rng, 3, 2)
    params = {"x": x, **p.named("ssm")}
    worst = finite_diff_check(lambda: ssm.selective_scan(x, p).sum(), params)

    z = Tensor(rng.uniform(-1.0, 1.0, (1, 4, 3, 3)), requires_grad=True)
    oa = OABlockParams.init(rng, 4, 2, DIRECTION_PRESETS["6d_tfc"])
    params = {"z": z, **oa.named("oa")}
    worst = max(worst, finite_diff_check(lambda: oa_forward(z, oa).sum(), params))
    return SuiteResult("gradient_finite_difference", worst, 1e-4)


def suite_bijectivity(seed: int = 17) -> SuiteResult:
    """Serialize/deserialize round-trips bitwise for every direction."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    dirs = list(DIRECTION_PRESETS["10d_tfc"].tf_directions)
    for shape in [(1, 2, 3, 5), (2, 3, 5, 8), (1, 1, 1, 1), (2, 5, 8, 3)]:
        z = Tensor(rng.standard_normal(shape))
        for d in dirs:
            seqs, imap = serialize_direction(z, d)
            back = deserialize_direction(seqs, imap)
            if not np.array_equal(back.data, z.data):
                worst = max(worst, float(np.max(np.abs(back.data - z.data))) or 1.0)
        pooled = Tensor(rng.standard_normal((shape[0], 1, shape[1])))
        for d in (ScanDirection("C", False), ScanDirection("C", True)):
            seqs, imap = serialize_direction(pooled, d)
            back = deserialize_direction(seqs, imap)
            if not np.array_equal(back.data, pooled.data):
                worst = max(worst, 1.0)
    return SuiteResult("serialization_bijectivity", worst, 0.0)


def suite_equivariance(n_inputs: int = 20, seed: int = 17) -> SuiteResult:
    """OA commutes with time-flip and frequency-flip (flip-closed sets)."""
    rng = np.random.default_rng(seed)
    oa = OABlockParams.init(rng, 6, 3, DIRECTION_PRESETS["10d_tfc"])
    worst = 0.0
    with no_grad():
        for _ in range(n_inputs):
            z = Tensor(rng.standard_normal((1, 6, 4, 5)))
            for axis in (2, 3):   # F then T
                lhs = oa_forward(z.flip(axis), oa).data
                rhs = np.flip(oa_forward(z, oa).data, axis)
                worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return SuiteResult("flip_equivariance", worst, 1e-9)


def all_suites(seed: int = 17) -> list[SuiteResult]:
    return [
        suite_recurrence_kernel(seed=seed),
        suite_parallel_sequential(seed=seed),
        suite_gradients(seed=seed),
        suite_bijectivity(seed=seed),
        suite_equivariance(seed=seed),
    ]
