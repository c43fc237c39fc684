"""Synthetic source-filter corpus for smoke tests and overfit runs.

Each phoneme class gets fixed formants; durations depend on the neighbouring
phonemes so the duration model has context to learn. Output follows the
standard corpus layout (wav/, lab/, txt/).
"""
from __future__ import annotations

import zlib
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .corpus import write_alignment
from .features import SAMPLE_RATE, write_wav

# symbol: (kind, formants Hz, base duration ms)
PHONES = {
    "a": ("vowel", (750, 1250, 2600), 110),
    "i": ("vowel", (300, 2250, 3000), 90),
    "u": ("vowel", (320, 800, 2400), 95),
    "e": ("vowel", (480, 1900, 2550), 100),
    "o": ("vowel", (500, 900, 2500), 105),
    "m": ("nasal", (280, 1100, 2300), 60),
    "n": ("nasal", (280, 1600, 2600), 55),
    "l": ("nasal", (360, 1300, 2700), 50),
    "s": ("fricative", (5500,), 85),
    "ʃ": ("fricative", (3000,), 80),
    "t": ("stop", (4000,), 45),
    "k": ("stop", (2200,), 50),
    "sil": ("silence", (), 120),
}
CONSONANTS = [p for p, v in PHONES.items() if v[0] in ("nasal", "fricative", "stop")]
VOWELS = [p for p, v in PHONES.items() if v[0] == "vowel"]


# RMS level per phoneme class; stops are measured over their burst only
LEVELS = {"vowel": 0.2, "nasal": 0.08, "fricative": 0.05, "stop": 0.1, "silence": 0.0}
FADE_MS = 2.5
NOISE_FLOOR = 1e-3


def _resonator(freq: float, bw: float):
    """Two-pole resonator scaled to unit gain at ``freq``."""
    r = np.exp(-np.pi * bw / SAMPLE_RATE)
    theta = 2 * np.pi * freq / SAMPLE_RATE
    a = np.array([1.0, -2 * r * np.cos(theta), r * r])
    gain = np.abs(np.polyval(a[::-1], np.exp(-1j * theta)))
    return [gain], a


def _formant_filter(x: np.ndarray, formants) -> np.ndarray:
    """Parallel resonators, each formant 6 dB below the previous one."""
    y = np.zeros_like(x)
    for j, f in enumerate(formants):
        b, a = _resonator(f, 80.0 + 0.05 * f)
        y += 0.5 ** j * lfilter(b, a, x)
    return y


def _set_level(y: np.ndarray, level: float) -> np.ndarray:
    rms = np.sqrt(np.mean(y ** 2))
    return y * (level / rms) if rms > 0 else y


def frozen_noise(symbol: str, n: int) -> np.ndarray:
    """The same noise for every occurrence of ``symbol``, so an overfit model can learn it."""
    return np.random.default_rng(zlib.crc32(symbol.encode("utf-8"))).standard_normal(n)


def random_phonemes(rng: np.random.Generator, n_syllables: int) -> list[str]:
    seq = ["sil"]
    for _ in range(n_syllables):
        seq.append(str(rng.choice(CONSONANTS)))
        seq.append(str(rng.choice(VOWELS)))
    seq.append("sil")
    return seq


def context_durations(phonemes, rng: np.random.Generator) -> np.ndarray:
    """Base duration shaped by neighbours, snapped to 5 ms."""
    out = []
    for i, p in enumerate(phonemes):
        kind, _, base = PHONES[p]
        d = float(base)
        nxt = PHONES[phonemes[i + 1]][0] if i + 1 < len(phonemes) else "silence"
        prev = PHONES[phonemes[i - 1]][0] if i > 0 else "silence"
        if kind == "vowel" and nxt in ("fricative", "stop"):
            d *= 0.75
        if kind == "vowel" and nxt == "silence":
            d *= 1.4
        if kind != "silence" and prev == "silence":
            d *= 1.15
        d *= rng.uniform(0.9, 1.1)
        out.append(max(5.0, 5.0 * round(d / 5.0)))
    return np.array(out)


def synthesize_utterance(phonemes, durations_ms,
                         f0_start: float = 140.0, f0_end: float = 110.0) -> np.ndarray:
    """Each segment is filtered on its own and set to its class level, so a
    phoneme sounds the same wherever it occurs apart from pitch and length."""
    n_total = int(round(np.sum(durations_ms) * SAMPLE_RATE / 1000))
    f0_track = np.linspace(f0_start, f0_end, n_total)
    out = np.zeros(n_total)
    fade = int(SAMPLE_RATE * FADE_MS / 1000)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
    phase = 0.0
    pos = 0
    for p, d in zip(phonemes, durations_ms):
        kind, formants, _ = PHONES[p]
        n = int(round(d * SAMPLE_RATE / 1000))
        noise = frozen_noise(p, n)
        y = np.zeros(n)
        if kind in ("vowel", "nasal"):
            # accent rise over the vowel nucleus
            bump = 1.0 + 0.08 * np.sin(np.linspace(0, np.pi, n)) if kind == "vowel" else 1.0
            ph = phase + np.cumsum(f0_track[pos:pos + n] * bump / SAMPLE_RATE)
            phase = ph[-1] % 1.0
            y = _set_level(_formant_filter(2.0 * (ph % 1.0) - 1.0 + 0.02 * noise, formants), LEVELS[kind])
        elif kind == "fricative":
            y = _set_level(_formant_filter(noise, formants), LEVELS[kind])
        elif kind == "stop":
            burst = min(n, 160)
            y[n - burst:] = _set_level(_formant_filter(noise[:burst] * np.hanning(burst), formants),
                                       LEVELS[kind])
        if n > 2 * fade:
            y[:fade] *= ramp
            y[n - fade:] *= ramp[::-1]
        out[pos:pos + n] = y + NOISE_FLOOR * noise
        pos += n
    return out


def make_toy_corpus(root, n_utterances: int = 5, seed: int = 7,
                    syllables=(3, 5), prefix: str = "toy") -> list[str]:
    """Write a synthetic corpus under ``root``; returns the utterance ids."""
    root = Path(root)
    for sub in ("wav", "lab", "txt"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    ids = []
    for k in range(n_utterances):
        utt_id = f"{prefix}{k:03d}"
        phonemes = random_phonemes(rng, int(rng.integers(syllables[0], syllables[1] + 1)))
        durations = context_durations(phonemes, rng)
        f0_start = rng.uniform(125, 150)
        audio = synthesize_utterance(phonemes, durations, f0_start, f0_start - 25)
        write_wav(root / "wav" / f"{utt_id}.wav", audio)
        write_alignment(root / "lab" / f"{utt_id}.lab", phonemes, durations)
        (root / "txt" / f"{utt_id}.txt").write_text(" ".join(phonemes) + "\n", encoding="utf-8")
        ids.append(utt_id)
    return ids
