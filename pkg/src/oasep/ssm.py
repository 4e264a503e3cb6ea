"""Selective state-space scans and the Mamba block.

Four interchangeable views of the same recurrence live here:

* ``scan_sequential`` -- the literal left-to-right recurrence (reference),
* ``kernel_materialize``/``scan_via_kernel`` -- the structured-convolution
  form, valid for time-invariant parameters,
* ``scan_parallel`` -- a Blelloch two-pass associative scan over affine
  state maps, bit-for-bit deterministic,
* ``selective_scan`` -- the input-dependent (selective) variant used by
  the model, implemented as a single fused autodiff op with numba inner
  loops so that training on one CPU core stays feasible.

State matrices are diagonal with A = -exp(a_log), so every discrete
transition entry lies in (0, 1) and the recurrence is unconditionally
stable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .tensor import Tensor, macs, softplus_np, _sigmoid_np
from . import tensor as T

__all__ = [
    "SSMParams",
    "MambaBlockParams",
    "discretize",
    "scan_sequential",
    "kernel_materialize",
    "scan_via_kernel",
    "scan_parallel",
    "selective_scan",
    "mamba_block",
    "mamba_param_count",
]

# MACs charged per (step, channel, state) inside the selective scan:
# delta*A, two for the input injection, two for the state update, one for
# the output readout.
SCAN_MACS_PER_STATE = 6

_SERIES_EPS = 1e-8


# ---------------------------------------------------------------------
# discretization
# ---------------------------------------------------------------------

def discretize(delta, A_diag, B):
    """Zero-order-hold discretization of a diagonal continuous system.

    Abar = exp(delta*A); Bbar = (delta*A)^-1 (exp(delta*A) - 1) * delta*B,
    with the series limit Bbar -> delta*B when |delta*A| is tiny.
    """
    delta = np.asarray(delta, dtype=np.float64)
    A_diag = np.asarray(A_diag, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValueError("discretize: delta must be positive")
    if np.any(A_diag >= 0):
        raise ValueError("discretize: A diagonal must be negative")
    u = delta * A_diag
    Abar = np.exp(u)
    Bbar = np.where(np.abs(u) < _SERIES_EPS, delta * B, (Abar - 1.0) / A_diag * B)
    return Abar, Bbar


# ---------------------------------------------------------------------
# reference scans (plain numpy; oracles and verification targets)
# ---------------------------------------------------------------------

def scan_sequential(x, Abar, Bbar, C, d_skip=0.0):
    """Strict left-to-right recurrence for a single channel.

    x: (L,); Abar, Bbar, C: (L, H) per-step parameters; h0 = 0.
    """
    x = np.asarray(x, dtype=np.float64)
    L = x.shape[0]
    H = Abar.shape[1]
    h = np.zeros(H)
    y = np.zeros(L)
    for t in range(L):
        h = Abar[t] * h + Bbar[t] * x[t]
        y[t] = C[t] @ h + d_skip * x[t]
    return y


def kernel_materialize(Abar, Bbar, C, L):
    """Structured kernel (C Bbar, C Abar Bbar, ..., C Abar^{L-1} Bbar)."""
    Abar = np.asarray(Abar, dtype=np.float64)
    K = np.empty(L)
    power = np.ones_like(Abar)
    for k in range(L):
        K[k] = np.dot(C, power * Bbar)
        power = power * Abar
    return K


def scan_via_kernel(x, K):
    """Causal convolution y_t = sum_{k<=t} K_k x_{t-k}."""
    x = np.asarray(x, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if x.shape != K.shape:
        raise T.ShapeError(f"kernel/input length mismatch: {x.shape} vs {K.shape}")
    return np.convolve(x, K)[: x.shape[0]]


def compose_affine(a2, b2, a1, b1):
    """Composition of h -> a1*h + b1 followed by h -> a2*h + b2."""
    return a2 * a1, a2 * b1 + b2


def scan_parallel(x, Abar, Bbar, C, d_skip=0.0):
    """Blelloch two-pass scan over affine maps (Abar_t, Bbar_t x_t).

    Mathematically identical to scan_sequential; deterministic tree order.
    """
    x = np.asarray(x, dtype=np.float64)
    L = x.shape[0]
    H = Abar.shape[1]
    n = 1
    while n < L:
        n *= 2
    a = np.ones((n, H))
    b = np.zeros((n, H))
    a[:L] = Abar
    b[:L] = Bbar * x[:, None]
    a_leaf, b_leaf = a.copy(), b.copy()
    # up-sweep
    step = 1
    while step < n:
        right = np.arange(2 * step - 1, n, 2 * step)
        left = right - step
        a[right], b[right] = compose_affine(a[right], b[right], a[left], b[left])
        step *= 2
    # down-sweep: exclusive prefix compositions
    a[n - 1] = 1.0
    b[n - 1] = 0.0
    step = n // 2
    while step >= 1:
        right = np.arange(2 * step - 1, n, 2 * step)
        left = right - step
        ta, tb = a[left].copy(), b[left].copy()
        a[left], b[left] = a[right], b[right]
        a[right], b[right] = compose_affine(ta, tb, a[right], b[right])
        step //= 2
    # inclusive = leaf applied after the exclusive prefix; h0 = 0 so h_t = b
    _, h = compose_affine(a_leaf, b_leaf, a, b)
    y = np.einsum("lh,lh->l", C, h[:L]) + d_skip * x
    return y


# ---------------------------------------------------------------------
# fused selective scan (numba kernels + hand-written adjoint)
# ---------------------------------------------------------------------

@njit(cache=True)
def _sel_fwd(delta, A, Bt, Ct, x, d_skip, y, h):
    G, L, D = x.shape
    H = A.shape[1]
    for g in range(G):
        for t in range(L):
            for d in range(D):
                dt = delta[g, t, d]
                xv = x[g, t, d]
                acc = 0.0
                for n in range(H):
                    u = dt * A[d, n]
                    ab = np.exp(u)
                    if abs(u) < _SERIES_EPS:
                        bb = dt * Bt[g, t, n]
                    else:
                        bb = (ab - 1.0) / A[d, n] * Bt[g, t, n]
                    hp = h[g, t - 1, d, n] if t > 0 else 0.0
                    hv = ab * hp + bb * xv
                    h[g, t, d, n] = hv
                    acc += Ct[g, t, n] * hv
                y[g, t, d] = acc + d_skip[d] * xv


@njit(cache=True)
def _sel_fwd_nocache(delta, A, Bt, Ct, x, d_skip, y):
    G, L, D = x.shape
    H = A.shape[1]
    h = np.zeros((D, H))
    for g in range(G):
        h[:, :] = 0.0
        for t in range(L):
            for d in range(D):
                dt = delta[g, t, d]
                xv = x[g, t, d]
                acc = 0.0
                for n in range(H):
                    u = dt * A[d, n]
                    ab = np.exp(u)
                    if abs(u) < _SERIES_EPS:
                        bb = dt * Bt[g, t, n]
                    else:
                        bb = (ab - 1.0) / A[d, n] * Bt[g, t, n]
                    hv = ab * h[d, n] + bb * xv
                    h[d, n] = hv
                    acc += Ct[g, t, n] * hv
                y[g, t, d] = acc + d_skip[d] * xv


@njit(cache=True)
def _sel_bwd(delta, A, Bt, Ct, x, d_skip, h, dy,
             dx, ddelta, dA, dBt, dCt, dd_skip):
    G, L, D = x.shape
    H = A.shape[1]
    carry = np.zeros((D, H))
    for g in range(G):
        carry[:, :] = 0.0
        for t in range(L - 1, -1, -1):
            for d in range(D):
                dt = delta[g, t, d]
                xv = x[g, t, d]
                dyv = dy[g, t, d]
                dd_skip[d] += dyv * xv
                dxv = d_skip[d] * dyv
                ddt = 0.0
                for n in range(H):
                    a = A[d, n]
                    u = dt * a
                    ab = np.exp(u)
                    btn = Bt[g, t, n]
                    hv = h[g, t, d, n]
                    hp = h[g, t - 1, d, n] if t > 0 else 0.0
                    dh = Ct[g, t, n] * dyv + carry[d, n]
                    dCt[g, t, n] += dyv * hv
                    dbb = dh * xv
                    if abs(u) < _SERIES_EPS:
                        bb = dt * btn
                        # series branch: bb ~ dt*btn*(1 + u/2)
                        ddt += dbb * btn + dh * hp * ab * a
                        dA[d, n] += dh * hp * ab * dt + dbb * (0.5 * dt * dt * btn)
                        dBt[g, t, n] += dbb * dt
                    else:
                        bb = (ab - 1.0) / a * btn
                        dab = dh * hp + dbb * btn / a
                        du = dab * ab
                        ddt += du * a
                        dA[d, n] += du * dt - dbb * (ab - 1.0) / (a * a) * btn
                        dBt[g, t, n] += dbb * (ab - 1.0) / a
                    dxv += dh * bb
                    carry[d, n] = dh * ab
                dx[g, t, d] = dxv
                ddelta[g, t, d] = ddt


@dataclass
class SSMParams:
    """Parameters of one selective SSM over D channels and H states each.

    A = -exp(a_log) keeps the continuous poles strictly negative.  The
    per-step (delta, B, C) are projections of the current input, which is
    what makes the scan selective.
    """

    a_log: Tensor        # (D, H)
    W_B: Tensor          # (H, D)
    W_C: Tensor          # (H, D)
    W_delta: Tensor      # (D, D)
    bias_delta: Tensor   # (D,)
    d_skip: Tensor       # (D,)

    @property
    def dim(self) -> int:
        return self.a_log.shape[0]

    @property
    def hidden(self) -> int:
        return self.a_log.shape[1]

    @staticmethod
    def init(rng: np.random.Generator, dim: int, hidden: int) -> "SSMParams":
        a_log = np.tile(np.log(np.arange(1, hidden + 1, dtype=np.float64)), (dim, 1))
        scale = 1.0 / np.sqrt(dim)
        # bias so that softplus(bias) lands in [0.001, 0.1]
        dt = rng.uniform(0.001, 0.1, size=dim)
        bias_delta = dt + np.log(-np.expm1(-dt))
        return SSMParams(
            a_log=Tensor(a_log, requires_grad=True),
            W_B=Tensor(rng.uniform(-scale, scale, (hidden, dim)), requires_grad=True),
            W_C=Tensor(rng.uniform(-scale, scale, (hidden, dim)), requires_grad=True),
            W_delta=Tensor(rng.uniform(-scale, scale, (dim, dim)), requires_grad=True),
            bias_delta=Tensor(bias_delta, requires_grad=True),
            d_skip=Tensor(np.ones(dim), requires_grad=True),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.a_log": self.a_log,
            f"{prefix}.W_B": self.W_B,
            f"{prefix}.W_C": self.W_C,
            f"{prefix}.W_delta": self.W_delta,
            f"{prefix}.bias_delta": self.bias_delta,
            f"{prefix}.d_skip": self.d_skip,
        }


def selective_scan(x: Tensor, p: SSMParams) -> Tensor:
    """Input-selective scan over a batch of sequences x: (G, L, D) -> (G, L, D).

    Fused op: forward and adjoint are hand-written; each of the D channels
    carries an independent H-dimensional state.
    """
    xd = x.data
    if xd.ndim != 3 or xd.shape[2] != p.dim:
        raise T.ShapeError(f"selective_scan expects (G, L, {p.dim}), got {xd.shape}")
    G, L, D = xd.shape
    H = p.hidden
    pre = xd @ p.W_delta.data.T + p.bias_delta.data
    delta = softplus_np(pre)
    Bt = xd @ p.W_B.data.T
    Ct = xd @ p.W_C.data.T
    A = -np.exp(p.a_log.data)
    d_skip = p.d_skip.data
    y = np.empty_like(xd)
    macs.add(G * L * D * (D + 2 * H + SCAN_MACS_PER_STATE * H + 1))

    parents = (x, p.a_log, p.W_B, p.W_C, p.W_delta, p.bias_delta, p.d_skip)
    track = T._grad_enabled and any(t.requires_grad for t in parents)
    if not track:
        _sel_fwd_nocache(delta, A, Bt, Ct, xd, d_skip, y)
        return Tensor(y)

    h = np.empty((G, L, D, H))
    _sel_fwd(delta, A, Bt, Ct, xd, d_skip, y, h)

    def bwd(g):
        dx = np.empty_like(xd)
        ddelta = np.empty_like(xd)
        dA = np.zeros_like(A)
        dBt = np.zeros_like(Bt)
        dCt = np.zeros_like(Ct)
        dd_skip = np.zeros_like(d_skip)
        _sel_bwd(delta, A, Bt, Ct, xd, d_skip, h, np.ascontiguousarray(g),
                 dx, ddelta, dA, dBt, dCt, dd_skip)
        dpre = ddelta * _sigmoid_np(pre)
        if x.requires_grad:
            x._accum(dx + dpre @ p.W_delta.data + dBt @ p.W_B.data + dCt @ p.W_C.data)
        flat_x = xd.reshape(-1, D)
        if p.W_delta.requires_grad:
            p.W_delta._accum(dpre.reshape(-1, D).T @ flat_x)
        if p.bias_delta.requires_grad:
            p.bias_delta._accum(dpre.sum(axis=(0, 1)))
        if p.W_B.requires_grad:
            p.W_B._accum(dBt.reshape(-1, H).T @ flat_x)
        if p.W_C.requires_grad:
            p.W_C._accum(dCt.reshape(-1, H).T @ flat_x)
        if p.a_log.requires_grad:
            p.a_log._accum(dA * A)
        if p.d_skip.requires_grad:
            p.d_skip._accum(dd_skip)

    return Tensor(y, requires_grad=True, _parents=parents, _backward=bwd)


# ---------------------------------------------------------------------
# Mamba block
# ---------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x: (..., D) @ w.T + b, w: (E, D)."""
    if x.shape[-1] != w.shape[1]:
        raise T.ShapeError(f"linear dim mismatch: x {x.shape}, w {w.shape}")
    out_data = x.data @ w.data.T
    macs.add(out_data.size * w.shape[1])
    if b is not None:
        out_data = out_data + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g, tx=x, tw=w, tb=b):
        if tx.requires_grad:
            tx._accum(g @ tw.data)
        if tw.requires_grad:
            tw._accum(g.reshape(-1, g.shape[-1]).T @ tx.data.reshape(-1, tx.shape[-1]))
        if tb is not None and tb.requires_grad:
            tb._accum(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return Tensor._make(out_data, parents, bwd)


def causal_dwconv(x: Tensor, w: Tensor) -> Tensor:
    """Depthwise causal conv along the sequence axis; x: (G, L, E), w: (E, K)."""
    E = x.shape[-1]
    K = w.shape[1]
    if w.shape[0] != E:
        raise T.ShapeError(f"dwconv channel mismatch: x {x.shape}, w {w.shape}")
    out_data = np.zeros_like(x.data)
    for k in range(K):
        if k == 0:
            out_data += x.data * w.data[:, 0]
        else:
            out_data[:, k:, :] += x.data[:, :-k, :] * w.data[:, k]
    macs.add(x.size * K)

    def bwd(g, tx=x, tw=w, K=K):
        if tx.requires_grad:
            gx = np.zeros_like(tx.data)
            for k in range(K):
                if k == 0:
                    gx += g * tw.data[:, 0]
                else:
                    gx[:, :-k, :] += g[:, k:, :] * tw.data[:, k]
            tx._accum(gx)
        if tw.requires_grad:
            gw = np.zeros_like(tw.data)
            for k in range(K):
                if k == 0:
                    gw[:, 0] = (g * tx.data).sum(axis=(0, 1))
                else:
                    gw[:, k] = (g[:, k:, :] * tx.data[:, :-k, :]).sum(axis=(0, 1))
            tw._accum(gw)

    return Tensor._make(out_data, (x, w), bwd)


@dataclass
class MambaBlockParams:
    """One Mamba block: expand, causal conv, selective scan, gate, project."""

    W_in: Tensor                  # (E, D)
    b_in: Tensor                  # (E,)
    conv_w: Tensor | None         # (E, K) or None when the conv is disabled
    W_gate: Tensor                # (E, D)
    b_gate: Tensor                # (E,)
    W_out: Tensor                 # (D, E)
    b_out: Tensor                 # (D,)
    ssm: SSMParams = field(default=None)

    @property
    def dim(self) -> int:
        return self.W_in.shape[1]

    @property
    def expanded(self) -> int:
        return self.W_in.shape[0]

    @staticmethod
    def init(rng: np.random.Generator, dim: int, hidden: int,
             expand: int = 2, conv_width: int = 4, use_conv: bool = True) -> "MambaBlockParams":
        e = expand * dim
        scale = 1.0 / np.sqrt(dim)
        conv_w = None
        if use_conv:
            # identity-biased init keeps early training close to a plain scan
            cw = rng.uniform(-0.1, 0.1, (e, conv_width))
            cw[:, 0] += 1.0
            conv_w = Tensor(cw, requires_grad=True)
        return MambaBlockParams(
            W_in=Tensor(rng.uniform(-scale, scale, (e, dim)), requires_grad=True),
            b_in=Tensor(np.zeros(e), requires_grad=True),
            conv_w=conv_w,
            W_gate=Tensor(rng.uniform(-scale, scale, (e, dim)), requires_grad=True),
            b_gate=Tensor(np.zeros(e), requires_grad=True),
            W_out=Tensor(rng.uniform(-1.0 / np.sqrt(e), 1.0 / np.sqrt(e), (dim, e)), requires_grad=True),
            b_out=Tensor(np.zeros(dim), requires_grad=True),
            ssm=SSMParams.init(rng, e, hidden),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {
            f"{prefix}.W_in": self.W_in,
            f"{prefix}.b_in": self.b_in,
            f"{prefix}.W_gate": self.W_gate,
            f"{prefix}.b_gate": self.b_gate,
            f"{prefix}.W_out": self.W_out,
            f"{prefix}.b_out": self.b_out,
        }
        if self.conv_w is not None:
            out[f"{prefix}.conv_w"] = self.conv_w
        out.update(self.ssm.named(f"{prefix}.ssm"))
        return out


def mamba_block(x: Tensor, p: MambaBlockParams) -> Tensor:
    """Full Mamba block over sequences x: (G, L, D) -> (G, L, D)."""
    u = linear(x, p.W_in, p.b_in)
    if p.conv_w is not None:
        u = causal_dwconv(u, p.conv_w)
    u = u.silu()
    s = selective_scan(u, p.ssm)
    g = linear(x, p.W_gate, p.b_gate).silu()
    return linear(s * g, p.W_out, p.b_out)


def mamba_param_count(dim: int, hidden: int, expand: int = 2,
                      conv_width: int = 4, use_conv: bool = True) -> int:
    """Scalar parameter count of one Mamba block (analytic)."""
    e = expand * dim
    n = e * dim + e            # W_in, b_in
    if use_conv:
        n += e * conv_width
    n += e * dim + e           # W_gate, b_gate
    n += dim * e + dim         # W_out, b_out
    n += e * hidden            # a_log
    n += 2 * hidden * e        # W_B, W_C
    n += e * e + e             # W_delta, bias_delta
    n += e                     # d_skip
    return n
