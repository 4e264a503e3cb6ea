import numpy as np
import pytest
from scipy.integrate import quad

from oasep import ssm
from oasep.tensor import Tensor, macs, no_grad
from oasep.verify import finite_diff_check


def test_discretize_scalar_closed_form():
    Abar, Bbar = ssm.discretize(1.0, np.array([-1.0]), np.array([2.0]))
    assert Abar[0] == pytest.approx(np.exp(-1.0), rel=1e-15)
    assert Bbar[0] == pytest.approx((1.0 - np.exp(-1.0)) * 2.0, rel=1e-15)


def test_discretize_small_step_limit():
    delta = 1e-12
    Abar, Bbar = ssm.discretize(delta, np.array([-1.0]), np.array([1.0]))
    assert Abar[0] == pytest.approx(1.0, abs=1e-10)
    assert Bbar[0] == pytest.approx(delta, rel=1e-6)


def test_discretize_matches_quadrature():
    rng = np.random.default_rng(11)
    for _ in range(20):
        a = -np.exp(rng.uniform(-2, 1))
        b = rng.uniform(-2, 2)
        delta = rng.uniform(0.01, 2.0)
        _, Bbar = ssm.discretize(delta, np.array([a]), np.array([b]))
        integral, _ = quad(lambda s: np.exp(s * a) * b, 0.0, delta)
        assert Bbar[0] == pytest.approx(integral, rel=1e-8)


def test_discretize_rejects_bad_domain():
    with pytest.raises(ValueError):
        ssm.discretize(-0.1, np.array([-1.0]), np.array([1.0]))
    with pytest.raises(ValueError):
        ssm.discretize(0.1, np.array([1.0]), np.array([1.0]))


def test_scan_sequential_two_step_by_hand():
    L = 2
    y = ssm.scan_sequential(np.array([1.0, 1.0]),
                            np.full((L, 1), 0.5), np.ones((L, 1)), np.ones((L, 1)))
    assert np.allclose(y, [1.0, 1.5], atol=0)


def test_scan_sequential_zero_input():
    L, H = 8, 3
    rng = np.random.default_rng(12)
    y = ssm.scan_sequential(np.zeros(L), rng.uniform(0, 1, (L, H)),
                            rng.standard_normal((L, H)), rng.standard_normal((L, H)))
    assert np.array_equal(y, np.zeros(L))


def test_kernel_geometric_sequence():
    K = ssm.kernel_materialize(np.array([0.5]), np.array([1.0]), np.array([1.0]), 3)
    assert np.allclose(K, [1.0, 0.5, 0.25], atol=0)


def test_kernel_no_memory():
    K = ssm.kernel_materialize(np.zeros(2), np.array([1.0, 2.0]), np.array([3.0, 1.0]), 4)
    assert np.allclose(K, [5.0, 0.0, 0.0, 0.0], atol=0)


def test_kernel_scan_equals_recurrence():
    rng = np.random.default_rng(13)
    for _ in range(100):
        H = int(rng.integers(1, 17))
        L = int(rng.integers(1, 65))
        A = -np.exp(rng.uniform(-2, 1, H))
        Abar, Bbar = ssm.discretize(rng.uniform(0.05, 1.0), A, rng.uniform(-1, 1, H))
        C = rng.uniform(-1, 1, H)
        x = rng.uniform(-1, 1, L)
        y_seq = ssm.scan_sequential(x, np.tile(Abar, (L, 1)), np.tile(Bbar, (L, 1)),
                                    np.tile(C, (L, 1)))
        y_ker = ssm.scan_via_kernel(x, ssm.kernel_materialize(Abar, Bbar, C, L))
        assert np.max(np.abs(y_seq - y_ker)) <= 1e-10


def test_scan_via_kernel_impulse_and_identity():
    rng = np.random.default_rng(14)
    K = rng.standard_normal(6)
    impulse = np.zeros(6)
    impulse[0] = 1.0
    assert np.allclose(ssm.scan_via_kernel(impulse, K), K, atol=0)
    x = rng.standard_normal(6)
    assert np.allclose(ssm.scan_via_kernel(x, impulse), x, atol=0)


def test_scan_via_kernel_matches_double_loop():
    rng = np.random.default_rng(15)
    x, K = rng.standard_normal(20), rng.standard_normal(20)
    naive = np.zeros(20)
    for t in range(20):
        for k in range(t + 1):
            naive[t] += K[k] * x[t - k]
    assert np.allclose(ssm.scan_via_kernel(x, K), naive, atol=1e-12)


def test_scan_via_kernel_length_mismatch():
    with pytest.raises(Exception):
        ssm.scan_via_kernel(np.zeros(4), np.zeros(5))


@pytest.mark.parametrize("L", [1, 2, 3, 17, 64, 1000])
def test_parallel_equals_sequential(L):
    rng = np.random.default_rng(L)
    H = 8
    Abar = rng.uniform(0, 1, (L, H))
    Bbar = rng.standard_normal((L, H))
    C = rng.standard_normal((L, H))
    x = rng.uniform(-1, 1, L)
    y_seq = ssm.scan_sequential(x, Abar, Bbar, C, d_skip=0.3)
    y_par = ssm.scan_parallel(x, Abar, Bbar, C, d_skip=0.3)
    assert np.max(np.abs(y_seq - y_par)) <= 1e-10


def test_compose_associativity():
    rng = np.random.default_rng(16)
    for _ in range(50):
        p, q, r = (tuple(rng.standard_normal(2)) for _ in range(3))
        pq = ssm.compose_affine(*p, *q)
        lhs = ssm.compose_affine(*pq, *r)
        qr = ssm.compose_affine(*q, *r)
        rhs = ssm.compose_affine(*p, *qr)
        assert abs(lhs[0] - rhs[0]) <= 1e-12 and abs(lhs[1] - rhs[1]) <= 1e-12


def test_selective_scan_zero_input():
    rng = np.random.default_rng(17)
    p = ssm.SSMParams.init(rng, 4, 3)
    out = ssm.selective_scan(Tensor(np.zeros((2, 6, 4))), p)
    assert np.array_equal(out.data, np.zeros((2, 6, 4)))


def test_selective_scan_shape_contract():
    rng = np.random.default_rng(18)
    p = ssm.SSMParams.init(rng, 5, 4)
    x = Tensor(rng.standard_normal((3, 11, 5)))
    assert ssm.selective_scan(x, p).shape == (3, 11, 5)


def test_selective_scan_gradients_vs_finite_differences():
    rng = np.random.default_rng(19)
    p = ssm.SSMParams.init(rng, 3, 2)
    x = Tensor(rng.uniform(-1, 1, (2, 5, 3)), requires_grad=True)
    err = finite_diff_check(lambda: ssm.selective_scan(x, p).sum(),
                            {"x": x, **p.named("p")})
    assert err <= 1e-4


def test_selective_scan_causality_bitwise():
    rng = np.random.default_rng(20)
    p = ssm.SSMParams.init(rng, 3, 4)
    x = rng.standard_normal((1, 12, 3))
    with no_grad():
        base = ssm.selective_scan(Tensor(x), p).data.copy()
        pert = x.copy()
        pert[0, 7, :] += 1.0
        out = ssm.selective_scan(Tensor(pert), p).data
    assert np.array_equal(out[0, :7], base[0, :7])
    assert not np.array_equal(out[0, 7:], base[0, 7:])


def test_scan_stability_long_sequence():
    rng = np.random.default_rng(21)
    H, L = 4, 100_000
    A = -np.exp(rng.uniform(-2, 1, H))
    Abar, Bbar = ssm.discretize(0.5, A, rng.uniform(-1, 1, H))
    x = rng.uniform(-1, 1, L)
    h = np.zeros(H)
    max_norm = 0.0
    for t in range(L):
        h = Abar * h + Bbar * x[t]
        max_norm = max(max_norm, float(np.max(np.abs(h))))
    bound = np.max(np.abs(Bbar)) / (1.0 - np.max(Abar)) + 1.0
    assert max_norm < bound


def test_scan_linearity_with_frozen_params():
    rng = np.random.default_rng(22)
    L, H = 32, 6
    Abar = rng.uniform(0, 1, (L, H))
    Bbar = rng.standard_normal((L, H))
    C = rng.standard_normal((L, H))
    x1, x2 = rng.uniform(-1, 1, L), rng.uniform(-1, 1, L)
    alpha, beta = 0.7, -1.3
    lhs = ssm.scan_sequential(alpha * x1 + beta * x2, Abar, Bbar, C)
    rhs = alpha * ssm.scan_sequential(x1, Abar, Bbar, C) \
        + beta * ssm.scan_sequential(x2, Abar, Bbar, C)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10


def test_mamba_block_zero_input_zero_output():
    rng = np.random.default_rng(23)
    p = ssm.MambaBlockParams.init(rng, 4, 3)
    out = ssm.mamba_block(Tensor(np.zeros((1, 6, 4))), p)
    assert np.array_equal(out.data, np.zeros((1, 6, 4)))


def test_mamba_block_shape():
    rng = np.random.default_rng(24)
    p = ssm.MambaBlockParams.init(rng, 24, 16)
    with no_grad():
        out = ssm.mamba_block(Tensor(rng.standard_normal((1, 100, 24))), p)
    assert out.shape == (1, 100, 24)


def test_mamba_block_op_count_linear_in_length():
    rng = np.random.default_rng(25)
    p = ssm.MambaBlockParams.init(rng, 4, 3)
    counts = {}
    for L in (16, 32):
        with no_grad(), macs.counting() as counter:
            ssm.mamba_block(Tensor(rng.standard_normal((1, L, 4))), p)
        counts[L] = counter.total
    assert counts[32] == 2 * counts[16]


def test_mamba_block_gradients():
    rng = np.random.default_rng(26)
    p = ssm.MambaBlockParams.init(rng, 3, 2)
    x = Tensor(rng.uniform(-1, 1, (1, 4, 3)), requires_grad=True)
    err = finite_diff_check(lambda: ssm.mamba_block(x, p).sum(),
                            {"x": x, **p.named("m")})
    assert err <= 1e-4
