"""DSP front-end: WAV I/O, mel spectrogram, f0/BAP analysis, excitation synthesis.

All functions are pure; arrays are never modified in place.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import medfilt

SAMPLE_RATE = 16000
MEL_FLOOR = 1e-5
UNVOICED_F0 = 1.0
F0_MIN = 50.0
F0_MAX = 500.0
VOICING_THRESHOLD = 0.45
F0_WINDOW_MS = 40

FEATURE_MAGIC = b"PTTSFEAT"


class AudioError(ValueError):
    """Raised for unreadable, malformed or unsupported audio."""


@dataclass(frozen=True)
class FrameSpec:
    frame_length_ms: int = 25
    frameshift_ms: int = 5
    dft_size: int = 2048
    mel_bins: int = 80
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if 1000 % self.frameshift_ms:
            raise ValueError("frameshift must divide one second evenly")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"only {SAMPLE_RATE} Hz is supported, got {self.sample_rate}")

    @property
    def frame_length(self) -> int:
        return self.sample_rate * self.frame_length_ms // 1000

    @property
    def shift(self) -> int:
        return self.sample_rate * self.frameshift_ms // 1000

    @property
    def frames_per_second(self) -> int:
        return 1000 // self.frameshift_ms

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.frame_length:
            raise AudioError(
                f"waveform too short: {n_samples} samples < one frame ({self.frame_length})")
        return (n_samples - self.frame_length) // self.shift + 1


DEFAULT_SPEC = FrameSpec()


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise AudioError(f"unsupported sample rate {self.sample_rate} Hz (need {SAMPLE_RATE})")
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise AudioError("waveform must be mono")
        if not np.all(np.isfinite(s)):
            raise AudioError("waveform contains non-finite samples")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class AcousticTrack:
    f0: np.ndarray
    bap: np.ndarray
    voiced: np.ndarray
    mel: np.ndarray

    def __post_init__(self):
        k = len(self.f0)
        if not (len(self.bap) == len(self.voiced) == len(self.mel) == k):
            raise ValueError("acoustic track arrays differ in length")

    @property
    def n_frames(self) -> int:
        return len(self.f0)


# ---------------------------------------------------------------- WAV I/O

def read_wav(path) -> Waveform:
    try:
        rate, data = wavfile.read(str(path))
    except (ValueError, OSError) as exc:
        raise AudioError(f"{path}: {exc}") from exc
    if rate != SAMPLE_RATE:
        raise AudioError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE}")
    if data.dtype != np.int16:
        raise AudioError(f"{path}: expected 16-bit PCM, got {data.dtype}")
    if data.ndim != 1:
        raise AudioError(f"{path}: expected mono, got {data.shape[1]} channels")
    return Waveform(data.astype(np.float64) / 32767.0)


def write_wav(path, wave: Waveform | np.ndarray) -> None:
    samples = wave.samples if isinstance(wave, Waveform) else np.asarray(wave, dtype=np.float64)
    pcm = np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype("<i2")
    wavfile.write(str(path), SAMPLE_RATE, pcm)


# ---------------------------------------------------------- feature cache

def write_feature_file(path, array) -> None:
    """Flat little-endian f32 matrix behind a 16-byte header."""
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError("feature arrays must be 1-D or 2-D")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_feature_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature file")
    n, dim = struct.unpack("<II", raw[8:16])
    body = raw[16:]
    if len(body) != 4 * n * dim:
        raise ValueError(f"{path}: truncated feature file")
    return np.frombuffer(body, dtype="<f4").reshape(n, dim).copy()


# ---------------------------------------------------------- mel spectrogram

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def _mel_filterbank(n_mels: int, dft_size: int, sample_rate: int) -> np.ndarray:
    fft_freqs = np.arange(dft_size // 2 + 1) * sample_rate / dft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2), n_mels + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs - lower) / (centre - lower)
    falling = (upper - fft_freqs) / (upper - centre)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_filterbank(spec: FrameSpec = DEFAULT_SPEC) -> np.ndarray:
    """Triangular filters (n_mels x dft_size//2+1), unit peak, 0 to Nyquist."""
    return _mel_filterbank(spec.mel_bins, spec.dft_size, spec.sample_rate)


@lru_cache(maxsize=8)
def _hann(n: int) -> np.ndarray:
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    w.setflags(write=False)
    return w


def analysis_window(spec: FrameSpec = DEFAULT_SPEC) -> np.ndarray:
    return _hann(spec.frame_length)


def frame_signal(x: np.ndarray, spec: FrameSpec = DEFAULT_SPEC) -> np.ndarray:
    k = spec.n_frames(len(x))
    idx = np.arange(k)[:, None] * spec.shift + np.arange(spec.frame_length)[None, :]
    return np.asarray(x)[idx]


def compute_mel_spectrogram(w: Waveform | np.ndarray, spec: FrameSpec = DEFAULT_SPEC) -> np.ndarray:
    """Magnitude mel spectrogram, shape (K, mel_bins), floored at ``MEL_FLOOR``."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if len(x) == 0:
        raise AudioError("waveform too short: empty")
    frames = frame_signal(x, spec) * analysis_window(spec)
    mag = np.abs(np.fft.rfft(frames, n=spec.dft_size, axis=1))
    return np.maximum(mag @ mel_filterbank(spec).T, MEL_FLOOR)


# ---------------------------------------------------------- f0

def _analysis_frames(x: np.ndarray, spec: FrameSpec, width: int) -> np.ndarray:
    """Windows of ``width`` samples centred on each frame centre (zero padded)."""
    k = spec.n_frames(len(x))
    centres = np.arange(k) * spec.shift + spec.frame_length // 2
    half = width // 2
    padded = np.pad(x, (half, half))
    idx = centres[:, None] + np.arange(width)[None, :]
    return padded[idx]


def _nccf(frames: np.ndarray, min_lag: int, max_lag: int) -> np.ndarray:
    """Normalized cross-correlation between each window's head and lagged tail."""
    n = frames.shape[1]
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    spec = np.fft.rfft(frames, nfft, axis=1)
    acf = np.fft.irfft(spec * np.conj(spec), nfft, axis=1)[:, : max_lag + 1]
    sq = np.cumsum(frames**2, axis=1)
    total = sq[:, -1:]
    lags = np.arange(min_lag, max_lag + 1)
    head = sq[:, n - lags - 1]                    # sum x[0 : n-lag]
    tail = total - sq[:, lags - 1]                # sum x[lag : n]
    denom = np.sqrt(np.maximum(head * tail, 0.0))
    out = np.zeros((frames.shape[0], len(lags)))
    ok = denom > 1e-10
    out[ok] = acf[:, lags][ok] / denom[ok]
    return out


def extract_f0(w: Waveform | np.ndarray, spec: FrameSpec = DEFAULT_SPEC):
    """Autocorrelation pitch tracker.

    Returns ``(f0, voiced)`` per frame; unvoiced frames carry ``UNVOICED_F0``.
    """
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    sr = spec.sample_rate
    width = sr * F0_WINDOW_MS // 1000
    frames = _analysis_frames(x, spec, width)
    frames = frames - frames.mean(axis=1, keepdims=True)
    min_lag = int(np.floor(sr / F0_MAX))
    max_lag = int(np.ceil(sr / F0_MIN))
    r = _nccf(frames, min_lag, max_lag)

    k = len(frames)
    f0 = np.full(k, UNVOICED_F0)
    peak = np.zeros(k)
    for i in range(k):
        ri = r[i]
        inner = np.flatnonzero((ri[1:-1] >= ri[:-2]) & (ri[1:-1] > ri[2:])) + 1
        if len(inner) == 0:
            continue
        best = ri[inner].max()
        if best <= 0:
            continue
        # smallest lag close to the global peak avoids sub-harmonic picks
        j = inner[ri[inner] >= 0.9 * best][0]
        a, b, c = ri[j - 1], ri[j], ri[j + 1]
        denom = a - 2 * b + c
        offset = 0.5 * (a - c) / denom if denom < 0 else 0.0
        peak[i] = b
        f0[i] = sr / (j + min_lag + offset)

    voiced = (peak >= VOICING_THRESHOLD) & (f0 >= F0_MIN) & (f0 <= F0_MAX)
    if k >= 3:
        smoothed = medfilt(voiced.astype(float), 3).astype(bool)
        smoothed[0], smoothed[-1] = voiced[0], voiced[-1]
    else:
        smoothed = voiced
    # frames switched on by smoothing with an out-of-range estimate borrow their neighbours'
    for i in np.flatnonzero(smoothed & ~voiced):
        if not F0_MIN <= f0[i] <= F0_MAX:
            f0[i] = 0.5 * (f0[i - 1] + f0[i + 1])
    f0 = np.where(smoothed, f0, UNVOICED_F0)
    return f0, smoothed


# ---------------------------------------------------------- band aperiodicity

HARMONIC_HALF_WIDTH = 1  # DFT bins either side of each harmonic


@lru_cache(maxsize=4)
def _harmonic_capture(frame_length: int, dft_size: int, half_width: int) -> float:
    """Mean fraction of a windowed sinusoid's energy that lands within
    +-half_width bins of its nearest bin, averaged over sub-bin offsets."""
    win = _hann(frame_length)
    n = np.arange(frame_length)
    fractions = []
    for offset in np.linspace(-0.5, 0.5, 21):
        centre = 200.0 + offset
        x = np.cos(2 * np.pi * centre * n / dft_size) * win
        p = np.abs(np.fft.rfft(x, dft_size)) ** 2
        b = int(round(centre))
        fractions.append(p[b - half_width: b + half_width + 1].sum() / p.sum())
    return float(np.mean(fractions))


def estimate_bap(w: Waveform | np.ndarray, f0, voiced, spec: FrameSpec = DEFAULT_SPEC) -> np.ndarray:
    """Full-band aperiodicity: 1 - periodic/total spectral energy, in [0, 1].

    Periodic energy sums the power within ``HARMONIC_HALF_WIDTH`` DFT bins of
    every harmonic of f0 below Nyquist, rescaled by the energy share a pure
    sinusoid leaves in that band under the analysis window.
    """
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    frames = frame_signal(x, spec)
    f0 = np.asarray(f0, dtype=np.float64)
    voiced = np.asarray(voiced, dtype=bool)
    if len(f0) != len(frames) or len(voiced) != len(frames):
        raise ValueError(f"f0/voiced length {len(f0)}/{len(voiced)} != frame count {len(frames)}")
    power = np.abs(np.fft.rfft(frames * analysis_window(spec), spec.dft_size, axis=1)) ** 2
    capture = _harmonic_capture(spec.frame_length, spec.dft_size, HARMONIC_HALF_WIDTH)
    bin_hz = spec.sample_rate / spec.dft_size
    nyquist_bin = spec.dft_size // 2
    bap = np.ones(len(frames))
    for i in np.flatnonzero(voiced):
        total = power[i].sum()
        if total <= 1e-20 or f0[i] <= UNVOICED_F0:
            continue
        harmonics = np.arange(1, int((spec.sample_rate / 2) // f0[i]) + 1) * f0[i]
        centres = np.round(harmonics / bin_hz).astype(int)
        bins = (centres[:, None] + np.arange(-HARMONIC_HALF_WIDTH, HARMONIC_HALF_WIDTH + 1)).ravel()
        bins = np.unique(bins[(bins >= 0) & (bins <= nyquist_bin)])
        periodic = power[i, bins].sum() / capture
        bap[i] = 1.0 - periodic / total
    return np.clip(bap, 0.0, 1.0)


def analyze(w: Waveform, spec: FrameSpec = DEFAULT_SPEC) -> AcousticTrack:
    mel = compute_mel_spectrogram(w, spec)
    f0, voiced = extract_f0(w, spec)
    bap = estimate_bap(w, f0, voiced, spec)
    return AcousticTrack(f0=f0, bap=bap, voiced=voiced, mel=mel)


# ---------------------------------------------------------- excitation

def sawtooth_pulse(period: int) -> np.ndarray:
    """Linear ramp from -1 to +1 over one period."""
    if period < 2:
        return np.zeros(max(period, 1))
    return -1.0 + 2.0 * np.arange(period) / (period - 1)


def generate_excitation(f0, bap, spec: FrameSpec = DEFAULT_SPEC, seed: int = 0) -> np.ndarray:
    """Sawtooth pulse train on voiced frames plus Gaussian noise with std ``bap``.

    Frames with f0 > 1 Hz are voiced. Pulse periods are round(sr / f0) of the
    frame in which each pulse starts; phase runs on across frame boundaries
    inside a voiced span and restarts at the beginning of every span.
    """
    f0 = np.asarray(f0, dtype=np.float64)
    bap = np.asarray(bap, dtype=np.float64)
    if f0.shape != bap.shape or f0.ndim != 1:
        raise ValueError("f0 and bap must be 1-D arrays of equal length")
    if np.any(~np.isfinite(f0)) or np.any(f0 <= 0):
        raise ValueError("f0 must be positive and finite")
    if np.any(bap < 0) or np.any(bap > 1):
        raise ValueError("bap must lie in [0, 1]")
    hop = spec.shift
    n = len(f0) * hop
    out = np.zeros(n)
    voiced = f0 > UNVOICED_F0

    k = 0
    while k < len(f0):
        if not voiced[k]:
            k += 1
            continue
        end_frame = k
        while end_frame < len(f0) and voiced[end_frame]:
            end_frame += 1
        pos, stop = k * hop, end_frame * hop
        while pos < stop:
            period = max(2, int(round(spec.sample_rate / f0[pos // hop])))
            m = min(period, stop - pos)
            out[pos: pos + m] = sawtooth_pulse(period)[:m]
            pos += period
        k = end_frame

    rng = np.random.default_rng(seed)
    out += rng.standard_normal(n) * np.repeat(bap, hop)
    return out
