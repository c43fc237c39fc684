"""Feature-level prosody control: constant-factor scaling and reference-prosody replacement."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import load_alignment
from .features import UNVOICED_F0
from .model import F0Encoder, frames_from_durations

MODES = ("none", "modify", "incorporate")
FACTOR_RANGE = (0.5, 1.5)


class ProsodyError(ValueError):
    pass


@dataclass(frozen=True)
class ProsodyOverride:
    mode: str = "none"
    dur_factor: float = 1.0
    f0_factor: float = 1.0
    ref_durations_ms: np.ndarray | None = None
    ref_f0_hz: np.ndarray | None = None
    force: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ProsodyError(f"unknown prosody mode {self.mode!r}; expected one of {MODES}")
        for name in ("dur_factor", "f0_factor"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ProsodyError(f"{name} must be positive, got {value}")
            lo, hi = FACTOR_RANGE
            if not self.force and not lo <= value <= hi:
                raise ProsodyError(f"{name} {value} outside [{lo}, {hi}] (set force to override)")
        if self.mode == "incorporate" and (self.ref_durations_ms is None or self.ref_f0_hz is None):
            raise ProsodyError("incorporate mode needs both reference durations and reference f0")

    @classmethod
    def scaled(cls, dur_factor: float = 1.0, f0_factor: float = 1.0, force: bool = False):
        return cls("modify", dur_factor, f0_factor, force=force)

    @classmethod
    def from_files(cls, durations_path, f0_path):
        utt = load_alignment(durations_path)
        return cls("incorporate", ref_durations_ms=np.asarray(utt.durations_ms, dtype=np.float64),
                   ref_f0_hz=read_f0_file(f0_path))


def apply_modification(pred_dur_ms, pred_f0_hz, dur_factor: float, f0_factor: float,
                       encoder: F0Encoder | None = None):
    """Scale durations and voiced f0; unvoiced frames keep the 1 Hz sentinel.

    With an ``encoder`` the scaled contour is checked against its table so an
    out-of-range factor fails before any synthesis work.
    """
    if dur_factor <= 0 or f0_factor <= 0:
        raise ProsodyError("scaling factors must be positive")
    dur = np.asarray(pred_dur_ms, dtype=np.float64) * dur_factor
    f0 = np.asarray(pred_f0_hz, dtype=np.float64)
    f0 = np.where(f0 > UNVOICED_F0, f0 * f0_factor, UNVOICED_F0)
    if encoder is not None:
        try:
            encoder.rounded(f0)
        except ValueError as exc:
            raise ProsodyError(f"f0 factor {f0_factor}: {exc}") from None
    return dur, f0


def apply_incorporation(n_phonemes: int, ref_durations_ms, ref_f0_hz):
    """Validate reference prosody against the utterance; returns (durations_ms, frames, f0_hz)."""
    dur = np.asarray(ref_durations_ms, dtype=np.float64)
    f0 = np.asarray(ref_f0_hz, dtype=np.float64)
    if dur.ndim != 1 or len(dur) != n_phonemes:
        raise ProsodyError(f"reference durations: expected {n_phonemes} phonemes, got {len(dur)}")
    if np.any(dur <= 0):
        raise ProsodyError("reference durations must be positive")
    frames = frames_from_durations(dur)
    if f0.ndim != 1 or len(f0) != frames.sum():
        raise ProsodyError(f"reference f0: expected {frames.sum()} frames, got {len(f0)}")
    if np.any(~np.isfinite(f0)) or np.any(f0 < 0):
        raise ProsodyError("reference f0 must be finite and non-negative")
    return dur, frames, f0


def read_f0_file(path) -> np.ndarray:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    try:
        return np.array([float(ln) for ln in lines if ln], dtype=np.float64)
    except ValueError as exc:
        raise ProsodyError(f"{path}: {exc}") from None


def write_f0_file(path, f0_hz) -> None:
    Path(path).write_text("".join(f"{v:.6f}\n" for v in np.asarray(f0_hz, dtype=np.float64)))
