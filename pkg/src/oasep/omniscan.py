"""Directional serialization over the (F, T) grid and the OA block.

A spectrogram feature tensor (B, C, F, T) is unrolled into batches of 1D
sequences along time, frequency, or (after pooling) the channel axis, in
forward or backward orientation.  Each direction is a pure permutation
with an exact inverse, so Mamba outputs can be folded back onto the grid
and fused across directions.

The OA block: a 1x1 conv doubles the channels, the halves become gate and
scan input, the scanned directions are summed and gated, a pooled channel
sequence is scanned both ways to produce a per-channel gate, and a
residual closes the block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, ShapeError, conv1x1, mean_pool_ft, stack
from .ssm import MambaBlockParams, mamba_block, mamba_param_count

__all__ = [
    "ScanDirection",
    "DirectionSet",
    "OABlockParams",
    "serialize_direction",
    "deserialize_direction",
    "directional_scan_stack",
    "channel_branch",
    "oa_forward",
    "DIRECTION_PRESETS",
]

CHANNEL_BRANCH_WIDTH = 8  # internal feature width of the channel-axis Mamba


@dataclass(frozen=True)
class ScanDirection:
    """One traversal order: which axis, which orientation, and (for the
    spatial axes) whether the non-scanned axis is enumerated reversed."""

    axis: str                 # "T", "F", or "C"
    backward: bool = False
    transposed: bool = False  # row-enumeration order; spatial axes only

    def __post_init__(self):
        if self.axis not in ("T", "F", "C"):
            raise ValueError(f"unknown scan axis {self.axis!r}")
        if self.axis == "C" and self.transposed:
            raise ValueError("channel directions have no traversal variant")


def _tf_dirs(transposed_too: bool) -> list[ScanDirection]:
    dirs = [
        ScanDirection("T", False), ScanDirection("T", True),
        ScanDirection("F", False), ScanDirection("F", True),
    ]
    if transposed_too:
        dirs += [ScanDirection(d.axis, d.backward, True) for d in dirs[:4]]
    return dirs


@dataclass(frozen=True)
class DirectionSet:
    name: str
    tf_directions: tuple[ScanDirection, ...]
    channel_branch: bool

    def __post_init__(self):
        if len(self.tf_directions) not in (4, 8):
            raise ValueError("direction sets carry 4 or 8 spatial directions")
        if len(set(self.tf_directions)) != len(self.tf_directions):
            raise ValueError("duplicate scan direction")


DIRECTION_PRESETS = {
    "4d_tf": DirectionSet("4d_tf", tuple(_tf_dirs(False)), False),
    "6d_tfc": DirectionSet("6d_tfc", tuple(_tf_dirs(False)), True),
    "8d_tf": DirectionSet("8d_tf", tuple(_tf_dirs(True)), False),
    "10d_tfc": DirectionSet("10d_tfc", tuple(_tf_dirs(True)), True),
}


# ---------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------

def serialize_direction(z: Tensor, direction: ScanDirection):
    """Unroll a grid tensor into (B*R, L, C) sequences.

    T axis: one sequence per frequency row (R = F, L = T); F axis: one per
    time column (R = T, L = F).  The returned index_map is whatever
    deserialize_direction needs to invert the permutation exactly.
    """
    if direction.axis == "C":
        if z.ndim != 3 or z.shape[1] != 1:
            raise ShapeError(
                f"channel scan expects a pooled (B, 1, C) tensor, got {z.shape}")
        b, _, c = z.shape
        s = z.reshape(b, c, 1)
        if direction.backward:
            s = s.flip(1)
        return s, (direction, z.shape)

    if z.ndim != 4:
        raise ShapeError(f"spatial scan expects (B, C, F, T), got {z.shape}")
    b, c, f, t = z.shape
    if direction.axis == "T":
        s = z.transpose((0, 2, 3, 1))          # (B, F, T, C)
        if direction.backward:
            s = s.flip(2)
        if direction.transposed:
            s = s.flip(1)
        s = s.reshape(b * f, t, c)
    else:
        s = z.transpose((0, 3, 2, 1))          # (B, T, F, C)
        if direction.backward:
            s = s.flip(2)
        if direction.transposed:
            s = s.flip(1)
        s = s.reshape(b * t, f, c)
    return s, (direction, z.shape)


def deserialize_direction(sequences: Tensor, index_map) -> Tensor:
    """Exact inverse of serialize_direction (bitwise round trip)."""
    direction, shape = index_map
    if direction.axis == "C":
        b, _, c = shape
        if sequences.shape != (b, c, 1):
            raise ShapeError(
                f"sequences {sequences.shape} do not match map for shape {shape}")
        s = sequences
        if direction.backward:
            s = s.flip(1)
        return s.reshape(b, 1, c)

    b, c, f, t = shape
    if direction.axis == "T":
        if sequences.shape != (b * f, t, c):
            raise ShapeError(
                f"sequences {sequences.shape} do not match map for shape {shape}")
        s = sequences.reshape(b, f, t, c)
        if direction.transposed:
            s = s.flip(1)
        if direction.backward:
            s = s.flip(2)
        return s.transpose((0, 3, 1, 2))
    if sequences.shape != (b * t, f, c):
        raise ShapeError(
            f"sequences {sequences.shape} do not match map for shape {shape}")
    s = sequences.reshape(b, t, f, c)
    if direction.transposed:
        s = s.flip(1)
    if direction.backward:
        s = s.flip(2)
    return s.transpose((0, 3, 2, 1))


# ---------------------------------------------------------------------
# OA block
# ---------------------------------------------------------------------

@dataclass
class OABlockParams:
    """All learnables of one OA block.

    One Mamba is shared across every spatial direction; a second, narrow
    one handles the pooled channel sequence when the channel branch is on.
    """

    conv_w: Tensor                     # (2C, C)
    conv_b: Tensor                     # (2C,)
    mamba_tf: MambaBlockParams
    mamba_c: MambaBlockParams | None
    direction_set: DirectionSet
    sum_mean: bool = False             # normalize the direction sum by count

    @property
    def channels(self) -> int:
        return self.conv_w.shape[1]

    @staticmethod
    def init(rng: np.random.Generator, channels: int, hidden: int,
             direction_set: DirectionSet, sum_mean: bool = False) -> "OABlockParams":
        scale = 1.0 / np.sqrt(channels)
        mamba_c = None
        if direction_set.channel_branch:
            mamba_c = MambaBlockParams.init(
                rng, 1, hidden, expand=CHANNEL_BRANCH_WIDTH)
        return OABlockParams(
            conv_w=Tensor(rng.uniform(-scale, scale, (2 * channels, channels)),
                          requires_grad=True),
            conv_b=Tensor(np.zeros(2 * channels), requires_grad=True),
            mamba_tf=MambaBlockParams.init(rng, channels, hidden),
            mamba_c=mamba_c,
            direction_set=direction_set,
            sum_mean=sum_mean,
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.conv_w": self.conv_w, f"{prefix}.conv_b": self.conv_b}
        out.update(self.mamba_tf.named(f"{prefix}.mamba_tf"))
        if self.mamba_c is not None:
            out.update(self.mamba_c.named(f"{prefix}.mamba_c"))
        return out

    def param_count(self) -> int:
        c = self.channels
        n = 2 * c * c + 2 * c
        n += mamba_param_count(c, self.mamba_tf.ssm.hidden)
        if self.mamba_c is not None:
            n += mamba_param_count(1, self.mamba_c.ssm.hidden,
                                   expand=CHANNEL_BRANCH_WIDTH)
        return n


def directional_scan_stack(z1: Tensor, params: OABlockParams) -> Tensor:
    """Scan z1 along every spatial direction and stack: (N_dir, B, C, F, T)."""
    outs = []
    for direction in params.direction_set.tf_directions:
        seqs, index_map = serialize_direction(z1, direction)
        scanned = mamba_block(seqs, params.mamba_tf)
        outs.append(deserialize_direction(scanned, index_map))
    return stack(outs, axis=0)


def channel_branch(z2: Tensor, params: OABlockParams) -> Tensor:
    """Two-directional channel scan of the pooled map: (B,C,F,T) -> (B,1,C)."""
    pooled = mean_pool_ft(z2)
    outs = []
    for direction in (ScanDirection("C", False), ScanDirection("C", True)):
        seqs, index_map = serialize_direction(pooled, direction)
        scanned = mamba_block(seqs, params.mamba_c)
        outs.append(deserialize_direction(scanned, index_map))
    branch = stack(outs, axis=0).sum(axis=0)
    if params.sum_mean:
        branch = branch * 0.5
    return branch


def oa_forward(z: Tensor, params: OABlockParams) -> Tensor:
    """Full OA block; output shape equals input shape."""
    if z.ndim != 4 or z.shape[1] != params.channels:
        raise ShapeError(
            f"oa_forward expects (B, {params.channels}, F, T), got {z.shape}")
    doubled = conv1x1(z, params.conv_w, params.conv_b)
    z0, z1 = doubled.split(axis=1, parts=2)
    u = directional_scan_stack(z1, params)
    fused = u.sum(axis=0)
    if params.sum_mean:
        fused = fused * (1.0 / len(params.direction_set.tf_directions))
    z2 = z0 * fused
    if not params.direction_set.channel_branch:
        return z2
    gate = channel_branch(z2, params)            # (B, 1, C)
    b, _, c = gate.shape
    gate = gate.reshape(b, c, 1, 1)
    return z2 * gate + z2
