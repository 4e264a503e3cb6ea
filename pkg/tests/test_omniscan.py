import numpy as np
import pytest

from oasep.omniscan import (
    DIRECTION_PRESETS, DirectionSet, OABlockParams, ScanDirection,
    channel_branch, deserialize_direction, directional_scan_stack,
    oa_forward, serialize_direction,
)
from oasep.tensor import ShapeError, Tensor, backward, no_grad
from oasep.verify import finite_diff_check


def test_preset_direction_counts():
    assert len(DIRECTION_PRESETS["4d_tf"].tf_directions) == 4
    assert len(DIRECTION_PRESETS["8d_tf"].tf_directions) == 8
    assert not DIRECTION_PRESETS["4d_tf"].channel_branch
    assert not DIRECTION_PRESETS["8d_tf"].channel_branch
    assert DIRECTION_PRESETS["6d_tfc"].channel_branch
    assert DIRECTION_PRESETS["10d_tfc"].channel_branch
    assert (DIRECTION_PRESETS["6d_tfc"].tf_directions
            == DIRECTION_PRESETS["4d_tf"].tf_directions)


def test_direction_validation():
    with pytest.raises(ValueError):
        ScanDirection("Q")
    with pytest.raises(ValueError):
        ScanDirection("C", transposed=True)
    with pytest.raises(ValueError):
        DirectionSet("bad", (ScanDirection("T"),), False)
    with pytest.raises(ValueError):
        DirectionSet("dup", tuple([ScanDirection("T")] * 4), False)


def test_serialize_time_forward_matches_slices():
    rng = np.random.default_rng(30)
    z = rng.standard_normal((2, 3, 4, 5))
    seqs, _ = serialize_direction(Tensor(z), ScanDirection("T"))
    assert seqs.shape == (2 * 4, 5, 3)
    # sequence (b, f) walks time with channels last
    assert np.array_equal(seqs.data[1 * 4 + 2], z[1, :, 2, :].T)


def test_serialize_freq_backward_matches_slices():
    rng = np.random.default_rng(31)
    z = rng.standard_normal((1, 2, 4, 3))
    seqs, _ = serialize_direction(Tensor(z), ScanDirection("F", backward=True))
    assert seqs.shape == (1 * 3, 4, 2)
    assert np.array_equal(seqs.data[2], z[0, :, ::-1, 2].T)


@pytest.mark.parametrize("shape", [(1, 2, 3, 5), (2, 3, 5, 8), (1, 1, 1, 1)])
def test_spatial_roundtrip_bitwise(shape):
    rng = np.random.default_rng(sum(shape))
    z = Tensor(rng.standard_normal(shape))
    for d in DIRECTION_PRESETS["10d_tfc"].tf_directions:
        seqs, imap = serialize_direction(z, d)
        assert np.array_equal(deserialize_direction(seqs, imap).data, z.data)


def test_channel_roundtrip_bitwise():
    rng = np.random.default_rng(32)
    pooled = Tensor(rng.standard_normal((3, 1, 6)))
    for backward_dir in (False, True):
        d = ScanDirection("C", backward_dir)
        seqs, imap = serialize_direction(pooled, d)
        assert seqs.shape == (3, 6, 1)
        assert np.array_equal(deserialize_direction(seqs, imap).data, pooled.data)


def test_serialize_rejects_bad_rank():
    with pytest.raises(ShapeError):
        serialize_direction(Tensor(np.ones((2, 3))), ScanDirection("T"))
    with pytest.raises(ShapeError):
        serialize_direction(Tensor(np.ones((2, 2, 3))), ScanDirection("C"))


def test_deserialize_rejects_mismatched_map():
    z = Tensor(np.ones((1, 2, 3, 4)))
    seqs, imap = serialize_direction(z, ScanDirection("T"))
    with pytest.raises(ShapeError):
        deserialize_direction(Tensor(np.ones((5, 4, 2))), imap)


def test_serialize_gradient_is_permutation():
    z = Tensor(np.arange(24.0).reshape(1, 2, 3, 4), requires_grad=True)
    seqs, _ = serialize_direction(z, ScanDirection("T", True, True))
    w = np.arange(seqs.size, dtype=float).reshape(seqs.shape)
    backward((seqs * Tensor(w)).sum())
    # the adjoint of a permutation is its inverse permutation
    assert sorted(z.grad.reshape(-1)) == sorted(w.reshape(-1))


def test_transposed_directions_duplicate_untransposed():
    # one shared Mamba per sequence means reversing the row enumeration
    # permutes whole sequences, so the folded-back output is bitwise equal
    rng = np.random.default_rng(33)
    params = OABlockParams.init(rng, 4, 3, DIRECTION_PRESETS["8d_tf"])
    z = Tensor(rng.standard_normal((2, 4, 3, 5)))
    with no_grad():
        u = directional_scan_stack(z, params).data
    assert u.shape[0] == 8
    for i in range(4):
        assert np.array_equal(u[i], u[i + 4])


def test_oa_forward_shape_and_validation():
    rng = np.random.default_rng(34)
    params = OABlockParams.init(rng, 5, 3, DIRECTION_PRESETS["10d_tfc"])
    with no_grad():
        out = oa_forward(Tensor(rng.standard_normal((2, 5, 4, 6))), params)
    assert out.shape == (2, 5, 4, 6)
    with pytest.raises(ShapeError):
        oa_forward(Tensor(np.ones((2, 4, 4, 6))), params)


def test_oa_without_channel_branch_has_no_channel_mamba():
    rng = np.random.default_rng(35)
    params = OABlockParams.init(rng, 4, 3, DIRECTION_PRESETS["4d_tf"])
    assert params.mamba_c is None
    with no_grad():
        out = oa_forward(Tensor(rng.standard_normal((1, 4, 3, 3))), params)
    assert out.shape == (1, 4, 3, 3)


def test_channel_branch_shape():
    rng = np.random.default_rng(36)
    params = OABlockParams.init(rng, 6, 3, DIRECTION_PRESETS["6d_tfc"])
    with no_grad():
        gate = channel_branch(Tensor(rng.standard_normal((2, 6, 4, 5))), params)
    assert gate.shape == (2, 1, 6)


def test_param_count_matches_named_tensors():
    rng = np.random.default_rng(37)
    for preset in DIRECTION_PRESETS.values():
        params = OABlockParams.init(rng, 6, 4, preset)
        total = sum(t.size for t in params.named("oa").values())
        assert params.param_count() == total


def test_param_count_independent_of_transposed_directions():
    rng = np.random.default_rng(38)
    p4 = OABlockParams.init(rng, 6, 4, DIRECTION_PRESETS["4d_tf"])
    p8 = OABlockParams.init(rng, 6, 4, DIRECTION_PRESETS["8d_tf"])
    assert p4.param_count() == p8.param_count()


def test_flip_equivariance_small():
    rng = np.random.default_rng(39)
    params = OABlockParams.init(rng, 4, 2, DIRECTION_PRESETS["10d_tfc"])
    z = Tensor(rng.standard_normal((1, 4, 3, 4)))
    with no_grad():
        base = oa_forward(z, params).data
        for axis in (2, 3):
            flipped = oa_forward(z.flip(axis), params).data
            assert np.max(np.abs(flipped - np.flip(base, axis))) <= 1e-9


def test_oa_gradients_vs_finite_differences():
    rng = np.random.default_rng(40)
    params = OABlockParams.init(rng, 3, 2, DIRECTION_PRESETS["6d_tfc"])
    z = Tensor(rng.uniform(-1, 1, (1, 3, 2, 3)), requires_grad=True)
    err = finite_diff_check(lambda: oa_forward(z, params).sum(),
                            {"z": z, **params.named("oa")})
    assert err <= 1e-4
