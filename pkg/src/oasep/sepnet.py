"""Desk-scale dual-path separation model hosting the OA block.

Encoder: STFT real/imag -> 1x1 conv to C channels.  Each separator block
runs an intra-frequency Mamba sub-module, an intra-time Mamba sub-module,
and OA blocks at the configured positions, each wrapped in channel layer
norm with a residual.  The decoder predicts one complex ratio mask per
speaker, applies it to the mixture spectrogram, and resynthesizes.

Training: utterance-level permutation-invariant negative SI-SDR, AdamW,
global gradient clipping, and halve-on-plateau learning-rate scheduling.
"""

from __future__ import annotations

import itertools
import json
import struct
import time
from dataclasses import dataclass, asdict, fields as dc_fields

import numpy as np

from .tensor import Tensor, no_grad, save_tensor, load_tensor
from . import tensor as T
from .ssm import MambaBlockParams, mamba_block
from .omniscan import (
    DIRECTION_PRESETS, OABlockParams, ScanDirection,
    oa_forward, serialize_direction, deserialize_direction,
)
from .signal import (
    SynthConfig, Waveform, istft_op, stft, synth_mixture,
    si_sdr, si_sdri, sdr, sdri, si_sdr_loss,
)

__all__ = [
    "SepNetConfig",
    "SepNet",
    "AdamW",
    "PlateauLR",
    "pit_loss",
    "train_step",
    "train",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"OASEP"
CHECKPOINT_VERSION = 1


@dataclass
class SepNetConfig:
    n_blocks: int = 2
    channels: int = 24
    ssm_hidden: int = 16
    n_speakers: int = 2
    oa_placement: str = "both"          # front | back | both | none
    direction_set: str = "10d_tfc"
    stft_window: int = 64
    stft_hop: int = 32
    stft_window_type: str = "sqrt_hann"
    sample_rate: int = 8000
    lr: float = 1e-3
    clip_norm: float = 5.0
    batch: int = 1
    segment_seconds: float = 0.25
    steps_per_epoch: int = 40
    max_epochs: int = 40
    n_val_utts: int = 4
    n_test_utts: int = 8

    def __post_init__(self):
        if self.oa_placement not in ("front", "back", "both", "none"):
            raise ValueError(f"unknown oa_placement {self.oa_placement!r}")
        if self.direction_set not in DIRECTION_PRESETS:
            raise ValueError(f"unknown direction_set {self.direction_set!r}")
        if self.stft_window_type != "sqrt_hann":
            raise ValueError(f"unknown window type {self.stft_window_type!r}")
        if self.n_speakers < 2:
            raise ValueError("n_speakers must be >= 2")

    @staticmethod
    def from_dict(d: dict) -> "SepNetConfig":
        known = {f.name for f in dc_fields(SepNetConfig)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return SepNetConfig(**d)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def layer_norm_c(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer norm over the channel axis of a (B, C, F, T) tensor."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = (var + eps) ** -0.5
    c = x.shape[1]
    return xc * inv * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)


def bidir_scan_module(x: Tensor, axis: str, mamba: MambaBlockParams) -> Tensor:
    """Forward + backward Mamba along one spatial axis, summed (shared params)."""
    out = None
    for backward in (False, True):
        seqs, index_map = serialize_direction(x, ScanDirection(axis, backward))
        y = deserialize_direction(mamba_block(seqs, mamba), index_map)
        out = y if out is None else out + y
    return out


@dataclass
class _BlockParams:
    ln_f_g: Tensor
    ln_f_b: Tensor
    mamba_f: MambaBlockParams
    ln_t_g: Tensor
    ln_t_b: Tensor
    mamba_t: MambaBlockParams
    ln_oa_front_g: Tensor | None
    ln_oa_front_b: Tensor | None
    oa_front: OABlockParams | None
    ln_oa_back_g: Tensor | None
    ln_oa_back_b: Tensor | None
    oa_back: OABlockParams | None


class SepNet:
    """Toy separation network; all parameters are named, float64 tensors."""

    def __init__(self, config: SepNetConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config.channels
        h = config.ssm_hidden
        dirs = DIRECTION_PRESETS[config.direction_set]
        scale = 1.0 / np.sqrt(2)
        self.enc_w = Tensor(rng.uniform(-scale, scale, (c, 2)), requires_grad=True)
        self.enc_b = Tensor(np.zeros(c), requires_grad=True)
        self.blocks: list[_BlockParams] = []
        for _ in range(config.n_blocks):
            front = config.oa_placement in ("front", "both")
            back = config.oa_placement in ("back", "both")
            self.blocks.append(_BlockParams(
                ln_f_g=Tensor(np.ones(c), requires_grad=True),
                ln_f_b=Tensor(np.zeros(c), requires_grad=True),
                mamba_f=MambaBlockParams.init(rng, c, h),
                ln_t_g=Tensor(np.ones(c), requires_grad=True),
                ln_t_b=Tensor(np.zeros(c), requires_grad=True),
                mamba_t=MambaBlockParams.init(rng, c, h),
                ln_oa_front_g=Tensor(np.ones(c), requires_grad=True) if front else None,
                ln_oa_front_b=Tensor(np.zeros(c), requires_grad=True) if front else None,
                oa_front=OABlockParams.init(rng, c, h, dirs) if front else None,
                ln_oa_back_g=Tensor(np.ones(c), requires_grad=True) if back else None,
                ln_oa_back_b=Tensor(np.zeros(c), requires_grad=True) if back else None,
                oa_back=OABlockParams.init(rng, c, h, dirs) if back else None,
            ))
        s = config.n_speakers
        mask_scale = 0.02
        self.mask_w = Tensor(rng.uniform(-mask_scale, mask_scale, (2 * s, c)),
                             requires_grad=True)
        mask_b = np.zeros(2 * s)
        mask_b[0::2] = 1.0   # real parts start at identity: estimates = mixture
        self.mask_b = Tensor(mask_b, requires_grad=True)

    # -- parameters ---------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"enc.w": self.enc_w, "enc.b": self.enc_b}
        for i, blk in enumerate(self.blocks):
            p = f"block{i}"
            out[f"{p}.ln_f.g"] = blk.ln_f_g
            out[f"{p}.ln_f.b"] = blk.ln_f_b
            out.update(blk.mamba_f.named(f"{p}.mamba_f"))
            out[f"{p}.ln_t.g"] = blk.ln_t_g
            out[f"{p}.ln_t.b"] = blk.ln_t_b
            out.update(blk.mamba_t.named(f"{p}.mamba_t"))
            if blk.oa_front is not None:
                out[f"{p}.ln_oa_front.g"] = blk.ln_oa_front_g
                out[f"{p}.ln_oa_front.b"] = blk.ln_oa_front_b
                out.update(blk.oa_front.named(f"{p}.oa_front"))
            if blk.oa_back is not None:
                out[f"{p}.ln_oa_back.g"] = blk.ln_oa_back_g
                out[f"{p}.ln_oa_back.b"] = blk.ln_oa_back_b
                out.update(blk.oa_back.named(f"{p}.oa_back"))
        out["mask.w"] = self.mask_w
        out["mask.b"] = self.mask_b
        return out

    def param_count(self) -> int:
        return sum(t.size for t in self.named_parameters().values())

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None

    # -- forward ------------------------------------------------------

    def encode_specs(self, mixtures: list[Waveform]):
        """Mixture STFTs -> (mix_real, mix_imag) arrays of shape (B, F, T)."""
        cfg = self.config
        win, hop = cfg.stft_window, cfg.stft_hop
        n = len(mixtures[0])
        # zero-pad so the frame grid covers the whole signal
        n_frames = max(1, -(-(n - win) // hop) + 1)
        padded = win + (n_frames - 1) * hop
        specs = []
        for m in mixtures:
            x = np.zeros(padded)
            x[:n] = m.samples
            specs.append(stft(Waveform(x, m.sample_rate), win, hop))
        real = np.stack([s.real for s in specs])
        imag = np.stack([s.imag for s in specs])
        return real, imag

    def forward_masks(self, mix_real: np.ndarray, mix_imag: np.ndarray) -> Tensor:
        """(B, F, T) mixture spectrogram -> (B, 2*S, F, T) complex mask stack."""
        feats = Tensor(np.stack([mix_real, mix_imag], axis=1))
        x = T.conv1x1(feats, self.enc_w, self.enc_b)
        for blk in self.blocks:
            if blk.oa_front is not None:
                x = x + oa_forward(
                    layer_norm_c(x, blk.ln_oa_front_g, blk.ln_oa_front_b), blk.oa_front)
            x = x + bidir_scan_module(
                layer_norm_c(x, blk.ln_f_g, blk.ln_f_b), "F", blk.mamba_f)
            x = x + bidir_scan_module(
                layer_norm_c(x, blk.ln_t_g, blk.ln_t_b), "T", blk.mamba_t)
            if blk.oa_back is not None:
                x = x + oa_forward(
                    layer_norm_c(x, blk.ln_oa_back_g, blk.ln_oa_back_b), blk.oa_back)
        return T.conv1x1(x, self.mask_w, self.mask_b)

    def forward_waveforms(self, mixtures: list[Waveform]) -> list[Tensor]:
        """Returns one (B, n_samples) tensor per speaker."""
        cfg = self.config
        n = len(mixtures[0])
        mix_real, mix_imag = self.encode_specs(mixtures)
        masks = self.forward_masks(mix_real, mix_imag)
        xr, xi = Tensor(mix_real), Tensor(mix_imag)
        parts = masks.split(axis=1, parts=2 * cfg.n_speakers)
        outs = []
        for s in range(cfg.n_speakers):
            b, _, f, t = masks.shape[0], 1, masks.shape[2], masks.shape[3]
            mr = parts[2 * s].reshape(b, f, t)
            mi = parts[2 * s + 1].reshape(b, f, t)
            est_r = mr * xr - mi * xi
            est_i = mr * xi + mi * xr
            outs.append(istft_op(est_r, est_i, cfg.stft_window, cfg.stft_hop, n))
        return outs

    def separate(self, mixture: Waveform) -> list[Waveform]:
        with no_grad():
            outs = self.forward_waveforms([mixture])
        return [Waveform(o.data[0], mixture.sample_rate) for o in outs]


# ---------------------------------------------------------------------
# loss / optimizer / schedule
# ---------------------------------------------------------------------

def pit_loss(est: list[Tensor], refs: np.ndarray) -> Tensor:
    """Utterance-level PIT over negative SI-SDR.

    est: per-speaker (B, N) tensors; refs: (B, S, N) references.
    """
    n_spk = len(est)
    batch = refs.shape[0]
    total = None
    for b in range(batch):
        best = None
        for perm in itertools.permutations(range(n_spk)):
            cand = None
            for s, p in enumerate(perm):
                term = si_sdr_loss(est[s].take0(b), refs[b, p])
                cand = term if cand is None else cand + term
            cand = cand * (1.0 / n_spk)
            if best is None or cand.item() < best.item():
                best = cand
        total = best if total is None else total + best
    return total * (1.0 / batch)


class AdamW:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float(np.sum(p.grad * p.grad))
        return float(np.sqrt(total))

    def clip_gradients(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if norm > max_norm:
            scale = max_norm / norm
            for p in self.params.values():
                if p.grad is not None:
                    p.grad *= scale
        return norm

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            mhat = self.m[k] / bc1
            vhat = self.v[k] / bc2
            p.data -= self.lr * (mhat / (np.sqrt(vhat) + self.eps)
                                 + self.weight_decay * p.data)


class PlateauLR:
    """Halve the learning rate when the best validation loss is 3 epochs old."""

    def __init__(self, initial: float = 1e-3, patience: int = 3):
        self.lr = initial
        self.patience = patience
        self.best = np.inf
        self.stale = 0

    def update(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr *= 0.5
                self.stale = 0
        return self.lr


def train_step(model: SepNet, batch, opt: AdamW) -> float:
    """One optimization step; batch is a list of (mixture, sources)."""
    mixtures = [item[0] for item in batch]
    refs = np.stack([np.stack([s.samples for s in item[1]]) for item in batch])
    est = model.forward_waveforms(mixtures)
    loss = pit_loss(est, refs)
    value = loss.item()
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite training loss {value}")
    model.zero_grad()
    T.backward(loss)
    opt.clip_gradients(model.config.clip_norm)
    opt.step()
    return value


# ---------------------------------------------------------------------
# data, training loop, evaluation
# ---------------------------------------------------------------------

def _synth_cfg(config: SepNetConfig) -> SynthConfig:
    return SynthConfig(sample_rate=config.sample_rate,
                       duration=config.segment_seconds)


def make_utterance(config: SepNetConfig, seed: int):
    return synth_mixture(seed, _synth_cfg(config))


def _val_loss(model: SepNet, config: SepNetConfig, seeds) -> float:
    losses = []
    with no_grad():
        for sd in seeds:
            mix, srcs = make_utterance(config, sd)
            refs = np.stack([np.stack([s.samples for s in srcs])])
            est = model.forward_waveforms([mix])
            losses.append(pit_loss(est, refs).item())
    return float(np.mean(losses))


def evaluate(model: SepNet, config: SepNetConfig, seeds) -> list[dict]:
    """Per-utterance metrics with best-permutation assignment."""
    rows = []
    for sd in seeds:
        mix, srcs = make_utterance(config, sd)
        est = model.separate(mix)
        n_spk = len(srcs)
        best = None
        for perm in itertools.permutations(range(n_spk)):
            score = np.mean([si_sdr(est[s].samples, srcs[p].samples)
                             for s, p in enumerate(perm)])
            if best is None or score > best[0]:
                best = (score, perm)
        perm = best[1]
        rows.append({
            "utterance_id": int(sd),
            "si_sdr": float(np.mean([si_sdr(est[s].samples, srcs[p].samples)
                                     for s, p in enumerate(perm)])),
            "si_sdri": float(np.mean([si_sdri(est[s].samples, srcs[p].samples, mix.samples)
                                      for s, p in enumerate(perm)])),
            "sdr": float(np.mean([sdr(est[s].samples, srcs[p].samples)
                                  for s, p in enumerate(perm)])),
            "sdri": float(np.mean([sdri(est[s].samples, srcs[p].samples, mix.samples)
                                   for s, p in enumerate(perm)])),
        })
    return rows


def train(config: SepNetConfig, seed: int = 17, max_steps: int | None = None,
          time_budget_s: float | None = None, target_si_sdri: float | None = None,
          log=None, checkpoint_path=None):
    """Train on the procedural toy task; returns model plus history.

    Stops at max_steps, at the wall-clock budget, or once the held-out
    SI-SDRi target is reached (checked at epoch boundaries).
    """
    model = SepNet(config, seed=seed)
    opt = AdamW(model.named_parameters(), lr=config.lr)
    sched = PlateauLR(config.lr)
    rng = np.random.default_rng(seed + 1)
    val_seeds = [seed * 1_000_000 + 500_000 + i for i in range(config.n_val_utts)]
    test_seeds = [seed * 1_000_000 + 900_000 + i for i in range(config.n_test_utts)]
    history = {"loss": [], "lr": [], "val_loss": [], "test_si_sdri": []}
    start = time.monotonic()
    step = 0
    done = False
    for epoch in range(config.max_epochs):
        for _ in range(config.steps_per_epoch):
            batch = [make_utterance(config, int(rng.integers(0, 400_000)))
                     for _ in range(config.batch)]
            loss = train_step(model, batch, opt)
            history["loss"].append(loss)
            history["lr"].append(opt.lr)
            step += 1
            if log is not None:
                log(f"step {step} loss {loss:.3f} lr {opt.lr:.2e}")
            if max_steps is not None and step >= max_steps:
                done = True
                break
            if time_budget_s is not None and time.monotonic() - start > time_budget_s:
                done = True
                break
        vloss = _val_loss(model, config, val_seeds)
        history["val_loss"].append(vloss)
        opt.lr = sched.update(vloss)
        if target_si_sdri is not None:
            rows = evaluate(model, config, test_seeds)
            mean_sisdri = float(np.mean([r["si_sdri"] for r in rows]))
            history["test_si_sdri"].append(mean_sisdri)
            if log is not None:
                log(f"epoch {epoch + 1} val_loss {vloss:.3f} "
                    f"test SI-SDRi {mean_sisdri:.2f} dB")
            if mean_sisdri >= target_si_sdri:
                done = True
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, opt, step, rng)
        if done:
            break
    return model, opt, history, test_seeds


# ---------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------

def save_checkpoint(path, model: SepNet, opt: AdamW, step: int,
                    rng: np.random.Generator | None = None) -> None:
    params = model.named_parameters()
    meta = {
        "step": step,
        "lr": opt.lr,
        "t": opt.t,
        "rng_state": rng.bit_generator.state if rng is not None else None,
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        cfg_bytes = model.config.to_json().encode()
        fh.write(struct.pack("<Q", len(cfg_bytes)))
        fh.write(cfg_bytes)
        meta_bytes = json.dumps(meta).encode()
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        entries = [("param/" + k, v.data) for k, v in params.items()]
        entries += [("adam_m/" + k, opt.m[k]) for k in params]
        entries += [("adam_v/" + k, opt.v[k]) for k in params]
        fh.write(struct.pack("<Q", len(entries)))
        for name, arr in entries:
            nb = name.encode()
            fh.write(struct.pack("<Q", len(nb)))
            fh.write(nb)
            save_tensor(fh, arr)


def load_checkpoint(path):
    """Returns (model, optimizer, step, rng_state); forward is bit-identical."""
    with open(path, "rb") as fh:
        if fh.read(5) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack("<Q", fh.read(8))
        config = SepNetConfig.from_dict(json.loads(fh.read(n).decode()))
        (n,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(n).decode())
        (count,) = struct.unpack("<Q", fh.read(8))
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack("<Q", fh.read(8))
            name = fh.read(n).decode()
            tensors[name] = load_tensor(fh)
    model = SepNet(config, seed=0)
    params = model.named_parameters()
    if set("param/" + k for k in params) != {k for k in tensors if k.startswith("param/")}:
        raise ValueError("checkpoint parameter names do not match the model")
    for k, p in params.items():
        p.data = tensors["param/" + k]
    opt = AdamW(params, lr=meta["lr"])
    opt.t = meta["t"]
    for k in params:
        opt.m[k] = tensors["adam_m/" + k]
        opt.v[k] = tensors["adam_v/" + k]
    return model, opt, meta["step"], meta.get("rng_state")
