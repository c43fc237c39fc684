"""Text-to-waveform inference through the trained model, with optional prosody overrides."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import PhonemeInventory, write_alignment
from .features import UNVOICED_F0, Waveform, generate_excitation, write_feature_file, write_wav
from .model import VOICED_F0_THRESHOLD, TTSModel, frames_from_durations, make_batch
from .nn import ops
from .prosody import ProsodyOverride, apply_incorporation, apply_modification, write_f0_file
from .vocoder import VocoderInput, vocode


@dataclass
class SynthesisResult:
    phonemes: tuple
    durations_ms: np.ndarray
    frames: np.ndarray
    f0_hz: np.ndarray          # 1 Hz on unvoiced frames
    bap: np.ndarray
    mel: np.ndarray
    excitation: np.ndarray
    waveform: Waveform

    @property
    def voiced(self) -> np.ndarray:
        return self.f0_hz > UNVOICED_F0

    def dump(self, out_dir, stem: str, text: bool = True) -> None:
        """Write features in the binary cache format (plus plain text for plotting)."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        streams = {"mel": self.mel, "f0": self.f0_hz, "bap": self.bap,
                   "dur": self.durations_ms}
        for name, arr in streams.items():
            write_feature_file(out / f"{stem}.{name}", arr)
            if text:
                np.savetxt(out / f"{stem}.{name}.txt", np.asarray(arr, dtype=np.float64), fmt="%.6g")
        write_alignment(out / f"{stem}.lab", self.phonemes, self.frames * 5.0)
        write_f0_file(out / f"{stem}.f0", self.f0_hz)


def voicing_from_log_f0(log_f0) -> np.ndarray:
    """Predicted f0 in Hz with frames below the voicing threshold mapped to the sentinel."""
    f0 = np.exp(np.asarray(log_f0, dtype=np.float64))
    return np.where(f0 >= VOICED_F0_THRESHOLD, f0, UNVOICED_F0)


def synthesize(model: TTSModel, inventory: PhonemeInventory, phonemes,
               override: ProsodyOverride = ProsodyOverride(), seed: int = 0,
               chunk_frames: int | None = None) -> SynthesisResult:
    phonemes = tuple(phonemes)
    if not phonemes:
        raise ValueError("empty phoneme sequence")
    cfg = model.cfg
    embeddings = inventory.embed(inventory.ids(phonemes))
    n = len(phonemes)
    with ops.no_grad():
        probe = make_batch([embeddings], [np.ones(n, dtype=np.int64)], cfg, model.dtype)
        encoded = model.encode(probe)

        ref_f0 = None
        if override.mode == "incorporate":
            durations, frames, ref_f0 = apply_incorporation(n, override.ref_durations_ms, override.ref_f0_hz)
        else:
            durations = model.predict_durations(encoded).data[0].astype(np.float64)
            if override.mode == "modify":
                durations, _ = apply_modification(durations, [], override.dur_factor, 1.0)
            frames = frames_from_durations(durations)

        batch = make_batch([embeddings], [frames], cfg, model.dtype)
        log_f0, bap, bottleneck = model.predict_f0_bap(model.upsample(encoded, batch), batch)
        f0 = voicing_from_log_f0(log_f0.data[0])
        if ref_f0 is not None:
            f0 = np.where(ref_f0 >= VOICED_F0_THRESHOLD, ref_f0, UNVOICED_F0)
        elif override.mode == "modify":
            _, f0 = apply_modification([], f0, 1.0, override.f0_factor, model.f0_encoder)
        bap = np.clip(bap.data[0].astype(np.float64), 0.0, 1.0)

        f0_enc = model.f0_conditioning(f0[None], batch)
        mel = model.decode_mel(bottleneck, f0_enc, batch).data[0]

    excitation = generate_excitation(f0, bap, seed=seed)
    wave = vocode(model.vocoder, VocoderInput(mel, excitation, cfg.hop), chunk_frames)
    return SynthesisResult(phonemes, np.asarray(durations, dtype=np.float64), frames, f0, bap,
                           mel.astype(np.float64), excitation, wave)


def synthesize_to_file(model, inventory, phonemes, path, override=ProsodyOverride(), seed: int = 0,
                       dump_dir=None) -> SynthesisResult:
    result = synthesize(model, inventory, phonemes, override, seed)
    write_wav(path, result.waveform)
    if dump_dir is not None:
        result.dump(dump_dir, Path(path).stem)
    return result


def predict_aligned(model: TTSModel, inventory: PhonemeInventory, phoneme_ids, frames):
    """Predicted (f0_hz, bap, mel, durations_ms) with the upsampling forced to ``frames``.

    Frame-synchronous with the reference track, so f0 and mel can be scored
    frame by frame while durations are still the model's own prediction.
    """
    cfg = model.cfg
    emb = inventory.embed(phoneme_ids)
    batch = make_batch([emb], [frames], cfg, model.dtype)
    with ops.no_grad():
        encoded = model.encode(batch)
        durations = model.predict_durations(encoded).data[0].astype(np.float64)
        log_f0, bap, bottleneck = model.predict_f0_bap(model.upsample(encoded, batch), batch)
        f0 = voicing_from_log_f0(log_f0.data[0])
        mel = model.decode_mel(bottleneck, model.f0_conditioning(f0[None], batch), batch).data[0]
    return f0, np.clip(bap.data[0].astype(np.float64), 0.0, 1.0), mel.astype(np.float64), durations
