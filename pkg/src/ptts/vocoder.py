"""Excitation-conditioned convolutional vocoder and its time/mel-domain losses."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .features import (DEFAULT_SPEC, MEL_FLOOR, FrameSpec, Waveform, analysis_window,
                       mel_filterbank)
from .nn import ops
from .nn.autograd import Tensor, as_tensor
from .nn.layers import Conv1d, Dense, Module

DEFAULT_LAMBDA = 0.5


class VocoderError(ValueError):
    pass


@dataclass(frozen=True)
class VocoderInput:
    mel: np.ndarray          # (K, mel_bins), positive
    excitation: np.ndarray   # (K * hop,)
    upsample_factor: int = 80

    def __post_init__(self):
        mel = np.asarray(self.mel)
        exc = np.asarray(self.excitation)
        if mel.ndim != 2:
            raise VocoderError(f"mel must be (frames, bins), got {mel.shape}")
        if exc.shape != (mel.shape[0] * self.upsample_factor,):
            raise VocoderError(f"excitation length {exc.shape[0]} != {mel.shape[0]} frames x "
                               f"{self.upsample_factor}")
        if np.any(mel <= 0):
            raise VocoderError("mel must be positive")


@dataclass(frozen=True)
class VocoderLossConfig:
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


class Vocoder(Module):
    """Mel (replicated to sample rate, log domain) + excitation -> conv stack -> linear head."""

    def __init__(self, rng, mel_bins: int = 80, channels: int = 64, layers: int = 8,
                 kernel_size: int = 3, hop: int = 80, dtype=np.float32):
        self.hop = hop
        self.mel_bins = mel_bins
        dims = [mel_bins + 1] + [channels] * layers
        self.convs = [Conv1d(dims[i], dims[i + 1], kernel_size, rng, dtype) for i in range(layers)]
        self.head = Dense(channels, 1, rng, dtype)

    @property
    def receptive_field(self) -> int:
        return 1 + sum(c.kernel_size - 1 for c in self.convs)

    def __call__(self, mel: Tensor, excitation, sample_mask=None) -> Tensor:
        """mel: (B, K, bins) positive; excitation: (B, K*hop). Returns (B, K*hop), unclamped."""
        mel = as_tensor(mel)
        exc = np.asarray(excitation, dtype=self.head.weight.dtype)
        bsz, k, _ = mel.shape
        if exc.shape != (bsz, k * self.hop):
            raise VocoderError(f"excitation shape {exc.shape} does not match mel frames {k} x {self.hop}")
        upsampled = ops.take(ops.log(mel), np.repeat(np.arange(k), self.hop), axis=1)
        h = ops.concat([upsampled, Tensor(exc[..., None])], axis=-1)
        mask = None if sample_mask is None else np.asarray(sample_mask, dtype=exc.dtype)[..., None]
        for conv in self.convs:
            h = ops.relu(conv(h))
            if mask is not None:
                h = ops.mul(h, mask)
        out = self.head(h)
        return ops.reshape(out, (bsz, k * self.hop))

    def infer(self, mel: np.ndarray, excitation: np.ndarray, chunk_frames: int | None = None) -> np.ndarray:
        """Single-utterance inference; optional chunking with a receptive-field halo."""
        halo = (self.receptive_field - 1) // 2
        with ops.no_grad():
            if chunk_frames is None or chunk_frames >= len(mel):
                return self(Tensor(mel[None]), excitation[None]).data[0]
            out = np.empty(len(excitation), dtype=self.head.weight.dtype)
            halo_frames = -(-halo // self.hop)
            for start in range(0, len(mel), chunk_frames):
                stop = min(len(mel), start + chunk_frames)
                lo, hi = max(0, start - halo_frames), min(len(mel), stop + halo_frames)
                y = self(Tensor(mel[None, lo:hi]), excitation[None, lo * self.hop: hi * self.hop]).data[0]
                out[start * self.hop: stop * self.hop] = y[(start - lo) * self.hop: (stop - lo) * self.hop]
            return out


def vocode(model: Vocoder, v: VocoderInput, chunk_frames: int | None = None) -> Waveform:
    """Run the vocoder and clamp to [-1, 1]."""
    y = model.infer(np.asarray(v.mel, dtype=np.float32), np.asarray(v.excitation, dtype=np.float32),
                    chunk_frames)
    return Waveform(np.clip(y.astype(np.float64), -1.0, 1.0))


# ------------------------------------------------------------ differentiable log-mel

@lru_cache(maxsize=4)
def _dft_matrices(frame_length: int, dft_size: int):
    n = np.arange(frame_length)[:, None]
    k = np.arange(dft_size // 2 + 1)[None, :]
    angle = 2 * np.pi * n * k / dft_size
    return np.cos(angle), -np.sin(angle)


def log_mel(x, spec: FrameSpec = DEFAULT_SPEC) -> Tensor:
    """log(max(mel, floor)) of each row of ``x`` (B, T), differentiable in ``x``.

    Forward matches ``features.compute_mel_spectrogram``; the DFT is a real
    matrix product so the adjoint is two matmuls and an overlap-add.
    """
    x = as_tensor(x)
    bsz, t = x.shape
    k = spec.n_frames(t)
    assert spec.frame_length % spec.shift == 0
    idx = np.arange(k)[:, None] * spec.shift + np.arange(spec.frame_length)[None, :]
    dtype = x.dtype
    win = analysis_window(spec).astype(dtype)
    cos_m, sin_m = (m.astype(dtype) for m in _dft_matrices(spec.frame_length, spec.dft_size))
    fb = mel_filterbank(spec).astype(dtype)

    frames = x.data[:, idx] * win
    re = frames @ cos_m
    im = frames @ sin_m
    mag = np.sqrt(re * re + im * im)
    mel = mag @ fb.T
    floored = np.maximum(mel, MEL_FLOOR)
    out = np.log(floored)

    def back(g):
        g_mel = np.where(mel > MEL_FLOOR, g / floored, 0.0)
        g_mag = g_mel @ fb
        safe = np.where(mag > 0, mag, 1.0)
        scale = np.where(mag > 0, g_mag / safe, 0.0)
        g_frames = ((scale * re) @ cos_m.T + (scale * im) @ sin_m.T) * win
        gx = np.zeros((bsz, t), dtype=dtype)
        hop = spec.shift
        # frames start every hop; overlap-add one hop-wide column block at a time
        for j in range(spec.frame_length // hop):
            gx[:, j * hop: j * hop + k * hop] += g_frames[:, :, j * hop:(j + 1) * hop].reshape(bsz, k * hop)
        return (gx,)

    return ops._op(out, (x,), back)


def vocoder_loss(pred, ref, cfg: VocoderLossConfig = VocoderLossConfig(),
                 spec: FrameSpec = DEFAULT_SPEC):
    """Return ``(L_td, L_cd, L_vocoder)`` as Tensors.

    L_td is the mean squared sample error, L_cd the mean squared log-mel error
    over frames and bins, combined as lam*L_td + (1-lam)*L_cd.
    """
    pred, ref = as_tensor(pred), as_tensor(ref)
    if pred.shape != ref.shape:
        raise VocoderError(f"length mismatch: prediction {pred.shape} vs reference {ref.shape}")
    if pred.ndim == 1:
        pred, ref = ops.reshape(pred, (1, -1)), ops.reshape(ref, (1, -1))
    l_td = ops.mean(ops.square(ops.sub(ops.astype(pred, np.float64), ops.astype(ref, np.float64))))
    diff = ops.sub(ops.astype(log_mel(pred, spec), np.float64), ops.astype(log_mel(ref, spec), np.float64))
    l_cd = ops.mean(ops.square(diff))
    l_voc = ops.add(ops.mul(l_td, cfg.lam), ops.mul(l_cd, 1.0 - cfg.lam))
    return l_td, l_cd, l_voc
