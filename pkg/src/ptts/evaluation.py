"""Objective metrics: f0 errors (GPE/VDE/FFE), duration errors (RMSE/MAE/PCC) and real-time factor."""
from __future__ import annotations

import csv
import logging
import platform
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .features import SAMPLE_RATE

log = logging.getLogger(__name__)

GROSS_PITCH_TOLERANCE = 0.2
F0_ANALYSIS_CAVEAT = ("f0 of synthesized audio is measured with the built-in autocorrelation "
                      "extractor; values from other pitch trackers may differ systematically")


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricCounts:
    n_frames: int
    n_voiced: int          # voiced in the reference
    n_pitch_errors: int    # voiced in both, relative error beyond tolerance
    n_voiced_errors: int   # reference voiced, prediction unvoiced
    n_unvoiced_errors: int  # reference unvoiced, prediction voiced

    def __post_init__(self):
        if min(self.n_frames, self.n_voiced, self.n_pitch_errors, self.n_voiced_errors,
               self.n_unvoiced_errors) < 0:
            raise MetricError("counts must be non-negative")
        if self.n_voiced > self.n_frames or self.n_pitch_errors > self.n_voiced:
            raise MetricError("inconsistent counts")

    @property
    def gpe(self) -> float:
        if self.n_voiced == 0:
            return 0.0
        return 100.0 * self.n_pitch_errors / self.n_voiced

    @property
    def vde(self) -> float:
        return 100.0 * (self.n_voiced_errors + self.n_unvoiced_errors) / self.n_frames

    @property
    def ffe(self) -> float:
        return 100.0 * (self.n_pitch_errors + self.n_voiced_errors + self.n_unvoiced_errors) / self.n_frames


def _check_lengths(*arrays):
    n = len(arrays[0])
    if any(len(a) != n for a in arrays):
        raise MetricError(f"length mismatch: {[len(a) for a in arrays]}")
    if n == 0:
        raise MetricError("empty sequences")


def f0_counts(ref_f0, ref_voiced, pred_f0, pred_voiced) -> MetricCounts:
    ref_f0, pred_f0 = np.asarray(ref_f0, dtype=np.float64), np.asarray(pred_f0, dtype=np.float64)
    rv, pv = np.asarray(ref_voiced, dtype=bool), np.asarray(pred_voiced, dtype=bool)
    _check_lengths(ref_f0, rv, pred_f0, pv)
    both = rv & pv
    gross = both & (np.abs(pred_f0 - ref_f0) > GROSS_PITCH_TOLERANCE * ref_f0)
    return MetricCounts(len(rv), int(rv.sum()), int(gross.sum()), int((rv & ~pv).sum()),
                        int((~rv & pv).sum()))


def gpe(ref_f0, ref_voiced, pred_f0, pred_voiced) -> float:
    counts = f0_counts(ref_f0, ref_voiced, pred_f0, pred_voiced)
    if counts.n_voiced == 0:
        log.warning("GPE undefined without reference-voiced frames; reporting 0")
    return counts.gpe


def vde(ref_voiced, pred_voiced) -> float:
    rv, pv = np.asarray(ref_voiced, dtype=bool), np.asarray(pred_voiced, dtype=bool)
    _check_lengths(rv, pv)
    return 100.0 * np.count_nonzero(rv != pv) / len(rv)


def ffe(ref_f0, ref_voiced, pred_f0, pred_voiced) -> float:
    return f0_counts(ref_f0, ref_voiced, pred_f0, pred_voiced).ffe


def duration_metrics(ref, pred, strict: bool = True) -> tuple[float, float, float]:
    """(RMSE, MAE, Pearson correlation) in the units of the inputs.

    A constant sequence has no correlation: an error, or NaN when not ``strict``.
    """
    ref, pred = np.asarray(ref, dtype=np.float64), np.asarray(pred, dtype=np.float64)
    _check_lengths(ref, pred)
    if len(ref) < 2:
        raise MetricError("correlation needs at least two values")
    err = pred - ref
    rmse = float(np.sqrt(np.mean(err ** 2)))
    mae = float(np.mean(np.abs(err)))
    rc, pc = ref - ref.mean(), pred - pred.mean()
    denom = np.sqrt(np.sum(rc ** 2) * np.sum(pc ** 2))
    if denom == 0:
        if not strict:
            return rmse, mae, float("nan")
        raise MetricError("correlation undefined: zero variance")
    return rmse, mae, float(np.sum(rc * pc) / denom)


# ------------------------------------------------------------ RTF

@dataclass(frozen=True)
class RtfResult:
    synth_seconds: float
    audio_seconds: float

    def __post_init__(self):
        if self.synth_seconds <= 0 or self.audio_seconds <= 0:
            raise MetricError("RTF needs positive times")

    @property
    def rtf(self) -> float:
        return self.synth_seconds / self.audio_seconds


def hardware_string() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'} python {platform.python_version()}"


def measure_rtf(synth_fn, texts, repeats: int = 3) -> RtfResult:
    """Median over ``repeats`` of the wall time to synthesize all ``texts``.

    ``synth_fn(text)`` must return a waveform (anything with ``samples``
    or a 1-D array); timing is pinned to one BLAS thread.
    """
    times, audio = [], None
    with threadpool_limits(1):
        for _ in range(repeats):
            t0 = time.perf_counter()
            outputs = [synth_fn(t) for t in texts]
            times.append(time.perf_counter() - t0)
            n = sum(len(getattr(o, "samples", o)) for o in outputs)
            audio = n / SAMPLE_RATE
    return RtfResult(statistics.median(times), audio)


# ------------------------------------------------------------ reports

F0_COLUMNS = ("utterance", "GPE", "VDE", "FFE")
DURATION_COLUMNS = ("unit", "RMSE", "MAE", "PCC")


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in row])


def format_table(header, rows, footer=()) -> str:
    cells = [[str(h) for h in header]] + [[f"{v:.3f}" if isinstance(v, float) else str(v) for v in r]
                                          for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines + list(footer)) + "\n"


# ------------------------------------------------------------ model evaluation

@dataclass
class EvaluationReport:
    per_utterance: list          # (id, GPE, VDE, FFE, duration MAPE, log-mel MSE)
    counts: MetricCounts         # pooled over every utterance
    duration_ms: tuple           # (RMSE, MAE, PCC)
    duration_frames: tuple
    duration_mape: float
    log_mel_mse: float
    audio_counts: MetricCounts | None = None   # f0 re-analysed from the vocoded output

    def summary_rows(self):
        return [("ms",) + tuple(self.duration_ms), ("frames",) + tuple(self.duration_frames)]

    def format(self) -> str:
        c = self.counts
        f0_rows = [r[:4] for r in self.per_utterance] + [("all", c.gpe, c.vde, c.ffe)]
        footer = ()
        if self.audio_counts is not None:
            a = self.audio_counts
            f0_rows.append(("all (audio)", a.gpe, a.vde, a.ffe))
            footer = (F0_ANALYSIS_CAVEAT,)
        return (format_table(F0_COLUMNS, f0_rows, footer) + "\n"
                + format_table(DURATION_COLUMNS, self.summary_rows(),
                               (f"duration MAPE {self.duration_mape:.4f}",
                                f"log-mel MSE {self.log_mel_mse:.4f}")))

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        c = self.counts
        rows = [r[:4] for r in self.per_utterance] + [("all", c.gpe, c.vde, c.ffe)]
        if self.audio_counts is not None:
            a = self.audio_counts
            rows.append(("all (audio)", a.gpe, a.vde, a.ffe))
        write_csv(out / "f0_metrics.csv", F0_COLUMNS, rows)
        write_csv(out / "duration_metrics.csv", DURATION_COLUMNS, self.summary_rows())
        (out / "report.txt").write_text(self.format())


def pool(counts) -> MetricCounts:
    counts = list(counts)
    return MetricCounts(*(sum(getattr(c, f) for c in counts) for f in
                          ("n_frames", "n_voiced", "n_pitch_errors", "n_voiced_errors",
                           "n_unvoiced_errors")))


def evaluate_model(model, inventory, examples, audio: bool = True, seed: int = 0) -> EvaluationReport:
    """Score predicted f0/voicing, mel and durations against the analysed references.

    f0 and mel are predicted frame-synchronously with each reference (the
    upsampling follows the reference durations); durations are the model's own.
    With ``audio`` the prediction is also vocoded and its f0 re-extracted.
    """
    from .features import extract_f0, generate_excitation
    from .vocoder import VocoderInput, vocode
    from .synthesis import predict_aligned
    if not examples:
        raise MetricError("empty evaluation set")
    rows, all_counts, audio_counts = [], [], []
    ref_dur, pred_dur, mel_err, n_mel = [], [], 0.0, 0
    for ex in examples:
        tr = ex.track
        f0, bap, mel, durations = predict_aligned(model, inventory, ex.phoneme_ids, ex.durations_frames)
        if audio:
            exc = generate_excitation(f0, bap, seed=seed)
            wave = vocode(model.vocoder, VocoderInput(mel, exc, model.cfg.hop))
            syn_f0, syn_voiced = extract_f0(wave)
            k = len(syn_f0)
            audio_counts.append(f0_counts(tr.f0[:k], tr.voiced[:k], syn_f0, syn_voiced))
        counts = f0_counts(tr.f0, tr.voiced, f0, f0 > 1.0)
        all_counts.append(counts)
        err = float(np.sum((np.log(mel) - np.log(tr.mel)) ** 2))
        mel_err += err
        n_mel += mel.size
        mape = float(np.mean(np.abs(durations - ex.durations_ms) / ex.durations_ms))
        rows.append((ex.id, counts.gpe, counts.vde, counts.ffe, mape, err / mel.size))
        ref_dur.append(ex.durations_ms)
        pred_dur.append(durations)
    pooled = pool(all_counts)
    ref_dur, pred_dur = np.concatenate(ref_dur), np.concatenate(pred_dur)
    return EvaluationReport(rows, pooled, duration_metrics(ref_dur, pred_dur),
                            duration_metrics(ref_dur / 5.0, pred_dur / 5.0),
                            float(np.mean(np.abs(pred_dur - ref_dur) / ref_dur)), mel_err / n_mel,
                            pool(audio_counts) if audio else None)
