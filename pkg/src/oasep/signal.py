"""STFT/iSTFT, synthetic two-source mixtures, separation metrics, WAV I/O.

Analysis and synthesis both use a sqrt-Hann window; with hop = window/2
the product window sums to one (COLA), so interior samples reconstruct
exactly up to rounding.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

__all__ = [
    "Waveform",
    "ComplexSpectrogram",
    "FormatError",
    "stft",
    "istft",
    "istft_op",
    "synth_mixture",
    "si_sdr",
    "sdr",
    "si_sdri",
    "sdri",
    "wav_read",
    "wav_write",
]

SI_SDR_CLAMP_DB = 60.0


class FormatError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 8000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveforms are mono 1-D arrays")
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")

    def __len__(self):
        return len(self.samples)


@dataclass
class ComplexSpectrogram:
    real: np.ndarray       # (F, T)
    imag: np.ndarray       # (F, T)
    window: int
    hop: int

    @property
    def n_bins(self) -> int:
        return self.real.shape[0]

    @property
    def n_frames(self) -> int:
        return self.real.shape[1]


def _sqrt_hann(window: int) -> np.ndarray:
    n = np.arange(window)
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / window)  # periodic
    return np.sqrt(hann)


def stft(w: Waveform, window: int = 256, hop: int = 128) -> ComplexSpectrogram:
    """Framed DFT with sqrt-Hann analysis window."""
    x = w.samples
    if len(x) < window:
        raise ValueError(f"waveform ({len(x)}) shorter than window ({window})")
    if hop > window:
        raise ValueError("hop must not exceed window")
    n_frames = (len(x) - window) // hop + 1
    win = _sqrt_hann(window)
    frames = np.stack([x[i * hop:i * hop + window] * win for i in range(n_frames)])
    spec = np.fft.rfft(frames, axis=1).T  # (F, T)
    return ComplexSpectrogram(spec.real.copy(), spec.imag.copy(), window, hop)


def istft(s: ComplexSpectrogram, length: int | None = None) -> Waveform:
    """Overlap-add synthesis with sqrt-Hann window and COLA normalization."""
    spec = s.real + 1j * s.imag
    frames = np.fft.irfft(spec.T, n=s.window, axis=1)
    win = _sqrt_hann(s.window)
    n_frames = frames.shape[0]
    total = s.window + (n_frames - 1) * s.hop
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(n_frames):
        sl = slice(i * s.hop, i * s.hop + s.window)
        out[sl] += frames[i] * win
        norm[sl] += win * win
    out = out / np.maximum(norm, 1e-12)
    if length is not None:
        out = out[:length]
    return Waveform(out, 8000)


def istft_batch_np(real: np.ndarray, imag: np.ndarray, window: int, hop: int,
                   length: int) -> np.ndarray:
    """Vectorized iSTFT over leading axes; real/imag: (..., F, T)."""
    spec = real + 1j * imag
    frames = np.fft.irfft(np.swapaxes(spec, -1, -2), n=window, axis=-1)
    win = _sqrt_hann(window)
    lead = frames.shape[:-2]
    n_frames = frames.shape[-2]
    total = window + (n_frames - 1) * hop
    out = np.zeros(lead + (total,))
    norm = np.zeros(total)
    for i in range(n_frames):
        sl = slice(i * hop, i * hop + window)
        out[..., sl] += frames[..., i, :] * win
        norm[sl] += win * win
    out = out / np.maximum(norm, 1e-12)
    return out[..., :length]


def istft_op(real: Tensor, imag: Tensor, window: int, hop: int, length: int) -> Tensor:
    """Differentiable iSTFT: (..., F, T) real/imag tensors -> (..., length).

    The transform is linear, so the adjoint is windowed framing followed
    by an rfft with Hermitian-doubling weights.
    """
    out_data = istft_batch_np(real.data, imag.data, window, hop, length)
    win = _sqrt_hann(window)
    n_frames = real.shape[-1]
    total = window + (n_frames - 1) * hop
    norm = np.zeros(total)
    for i in range(n_frames):
        norm[i * hop:i * hop + window] += win * win
    norm = np.maximum(norm, 1e-12)
    coeff = np.full(window // 2 + 1, 2.0 / window)
    coeff[0] = 1.0 / window
    coeff[-1] = 1.0 / window

    def bwd(g, tr=real, ti=imag):
        gp = np.zeros(g.shape[:-1] + (total,))
        gp[..., :length] = g
        gp = gp / norm
        lead = g.shape[:-1]
        gre = np.zeros(lead + (n_frames, window // 2 + 1))
        gim = np.zeros_like(gre)
        for i in range(n_frames):
            frame = gp[..., i * hop:i * hop + window] * win
            spec = np.fft.rfft(frame, axis=-1)
            gre[..., i, :] = coeff * spec.real
            gim[..., i, :] = coeff * spec.imag
        if tr.requires_grad:
            tr._accum(np.swapaxes(gre, -1, -2))
        if ti.requires_grad:
            ti._accum(np.swapaxes(gim, -1, -2))

    return Tensor._make(out_data, (real, imag), bwd)


# ---------------------------------------------------------------------
# synthetic two-source mixtures
# ---------------------------------------------------------------------

@dataclass
class SynthConfig:
    sample_rate: int = 8000
    duration: float = 1.0
    # disjoint fundamental ranges and harmonic bands keep the task learnable
    f0_ranges: tuple = ((90.0, 160.0), (260.0, 420.0))
    band_limits: tuple = ((80.0, 1100.0), (1400.0, 3600.0))
    rms: float = 0.08
    gain_spread_db: float = 2.5


def _harmonic_source(rng: np.random.Generator, cfg: SynthConfig, which: int) -> np.ndarray:
    n = int(cfg.sample_rate * cfg.duration)
    t = np.arange(n) / cfg.sample_rate
    f0 = rng.uniform(*cfg.f0_ranges[which])
    lo, hi = cfg.band_limits[which]
    k_lo = max(1, int(np.ceil(lo / f0)))
    k_hi = max(k_lo, int(hi / f0))
    x = np.zeros(n)
    for k in range(k_lo, k_hi + 1):
        amp = rng.uniform(0.3, 1.0) / np.sqrt(k - k_lo + 1)
        phase = rng.uniform(0, 2 * np.pi)
        x += amp * np.sin(2 * np.pi * k * f0 * t + phase)
    # slow random amplitude modulation
    f_am = rng.uniform(1.0, 4.0)
    phi = rng.uniform(0, 2 * np.pi)
    x *= 1.0 + 0.5 * np.sin(2 * np.pi * f_am * t + phi)
    x *= cfg.rms / max(np.sqrt(np.mean(x ** 2)), 1e-12)
    return x


def synth_mixture(seed: int, cfg: SynthConfig | None = None):
    """Deterministic two-source mixture; the mixture is exactly their sum."""
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(seed)
    s0 = _harmonic_source(rng, cfg, 0)
    s1 = _harmonic_source(rng, cfg, 1)
    gain_db = rng.uniform(-cfg.gain_spread_db, cfg.gain_spread_db)
    s1 = s1 * 10.0 ** (gain_db / 20.0)
    sources = [Waveform(s0, cfg.sample_rate), Waveform(s1, cfg.sample_rate)]
    mixture = Waveform(s0 + s1, cfg.sample_rate)
    return mixture, sources


# ---------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------

def si_sdr(est: np.ndarray, ref: np.ndarray) -> float:
    """Scale-invariant SDR in dB, clamped to +/- 60."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError("length mismatch")
    denom = np.dot(ref, ref)
    if denom == 0.0:
        raise ValueError("si_sdr: reference is all-zero")
    s = (np.dot(est, ref) / denom) * ref
    err = est - s
    e = np.dot(err, err)
    if e == 0.0:
        return SI_SDR_CLAMP_DB
    val = 10.0 * np.log10(np.dot(s, s) / e)
    return float(np.clip(val, -SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB))


def sdr(est: np.ndarray, ref: np.ndarray) -> float:
    """Plain (non-scale-invariant) SDR in dB, clamped to +/- 60."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    denom = np.dot(ref, ref)
    if denom == 0.0:
        raise ValueError("sdr: reference is all-zero")
    err = est - ref
    e = np.dot(err, err)
    if e == 0.0:
        return SI_SDR_CLAMP_DB
    val = 10.0 * np.log10(denom / e)
    return float(np.clip(val, -SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB))


def si_sdri(est, ref, mixture) -> float:
    return si_sdr(est, ref) - si_sdr(mixture, ref)


def sdri(est, ref, mixture) -> float:
    return sdr(est, ref) - sdr(mixture, ref)


def si_sdr_loss(est: Tensor, ref: np.ndarray) -> Tensor:
    """Differentiable negative SI-SDR (dB) of one estimate, unclamped."""
    ref_t = Tensor(ref)
    denom = float(np.dot(ref, ref))
    proj = (est * ref_t).sum() * (1.0 / denom)
    s = ref_t * proj
    err = est - s
    ratio = (s * s).sum() / ((err * err).sum() + 1e-12)
    return ratio.log() * (-10.0 / np.log(10.0))


# ---------------------------------------------------------------------
# WAV I/O (16-bit PCM mono)
# ---------------------------------------------------------------------

def wav_write(path, w: Waveform) -> None:
    clipped = np.clip(w.samples, -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


def wav_read(path) -> Waveform:
    try:
        fh = wave.open(str(path), "rb")
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"malformed WAV file {path}: {exc}") from exc
    with fh:
        if fh.getnchannels() != 1:
            raise FormatError(f"{path}: only mono supported")
        if fh.getsampwidth() != 2:
            raise FormatError(f"{path}: only 16-bit PCM supported")
        sr = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return Waveform(samples, sr)
