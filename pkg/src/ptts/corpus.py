"""Corpus ingestion: phoneme inventory, alignment labels, cached training targets."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import (DEFAULT_SPEC, AcousticTrack, AudioError, FrameSpec, Waveform, analyze,
                       read_feature_file, read_wav, write_feature_file)

log = logging.getLogger(__name__)

EMBEDDING_DIM = 128
DEFAULT_INVENTORY_SEED = 1234


class AlignmentError(ValueError):
    pass


class InventoryError(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "inventory error"


class CorpusError(RuntimeError):
    pass


class PhonemeInventory:
    """Ordered phoneme symbols with fixed random embeddings (never trained)."""

    def __init__(self, symbols, seed: int = DEFAULT_INVENTORY_SEED, dim: int = EMBEDDING_DIM,
                 table: np.ndarray | None = None):
        symbols = list(symbols)
        if len(set(symbols)) != len(symbols):
            raise InventoryError("duplicate symbols in inventory")
        if not symbols:
            raise InventoryError("empty inventory")
        self.symbols = symbols
        self.seed = seed
        self.dim = dim
        self._index = {s: i for i, s in enumerate(symbols)}
        if table is None:
            table = np.random.default_rng(seed).uniform(-0.5, 0.5, size=(len(symbols), dim))
        self.table = np.asarray(table, dtype=np.float64)
        self.table.setflags(write=False)
        if self.table.shape != (len(symbols), dim):
            raise InventoryError(f"embedding table shape {self.table.shape} does not fit symbols")

    @classmethod
    def from_symbols(cls, symbols, seed: int = DEFAULT_INVENTORY_SEED):
        return cls(sorted(set(symbols)), seed=seed)

    def __len__(self):
        return len(self.symbols)

    def __contains__(self, symbol):
        return symbol in self._index

    def ids(self, phonemes) -> np.ndarray:
        unknown = [p for p in phonemes if p not in self._index]
        if unknown:
            raise InventoryError(f"unknown phoneme(s): {' '.join(sorted(set(unknown)))}")
        return np.array([self._index[p] for p in phonemes], dtype=np.int64)

    def embed(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self.symbols)):
            raise InventoryError(f"phoneme id out of range 0..{len(self.symbols) - 1}")
        return self.table[ids]

    def is_injective(self, tol: float = 1e-6) -> bool:
        t = self.table
        d = np.sqrt(((t[:, None, :] - t[None, :, :]) ** 2).sum(-1))
        np.fill_diagonal(d, np.inf)
        return bool(d.min() > tol) if len(t) > 1 else True

    def save(self, path) -> None:
        data = {"seed": self.seed, "dim": self.dim,
                "symbols": {s: self.table[i].tolist() for i, s in enumerate(self.symbols)}}
        Path(path).write_text(json.dumps(data, ensure_ascii=False, indent=1))

    @classmethod
    def load(cls, path) -> "PhonemeInventory":
        data = json.loads(Path(path).read_text())
        symbols = list(data["symbols"])
        table = np.array([data["symbols"][s] for s in symbols], dtype=np.float64)
        return cls(symbols, seed=data["seed"], dim=data.get("dim", table.shape[1]), table=table)


@dataclass(frozen=True)
class Utterance:
    id: str
    phonemes: tuple
    durations_ms: np.ndarray
    audio_path: str = ""
    start_ms: float = 0.0

    @property
    def total_ms(self) -> float:
        return float(np.sum(self.durations_ms))


@dataclass
class TrainingExample:
    id: str
    phonemes: tuple
    phoneme_ids: np.ndarray
    durations_frames: np.ndarray
    track: AcousticTrack
    waveform: Waveform

    def __post_init__(self):
        if int(self.durations_frames.sum()) != self.track.n_frames:
            raise CorpusError(f"{self.id}: frame counts sum {self.durations_frames.sum()} "
                              f"!= track length {self.track.n_frames}")

    @property
    def durations_ms(self) -> np.ndarray:
        return self.durations_frames * 5.0


def snap_ms(value: float, frameshift_ms: int = 5) -> float:
    return frameshift_ms * round(value / frameshift_ms)


def parse_alignment(text: str, source: str = "<string>", inventory=None,
                    frameshift_ms: int = 5) -> tuple[list, np.ndarray, float]:
    """Parse ``phoneme<TAB>start_ms<TAB>end_ms`` lines into (phonemes, durations_ms, start_ms).

    Boundaries are snapped to the frame grid; labels must be contiguous and increasing.
    """
    phonemes, bounds = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t") if "\t" in line else line.split()
        if len(fields) != 3:
            raise AlignmentError(f"{source}:{lineno}: expected 3 fields, got {len(fields)}")
        name, start, end = fields[0].strip(), fields[1], fields[2]
        try:
            start, end = float(start), float(end)
        except ValueError:
            raise AlignmentError(f"{source}:{lineno}: non-numeric time in {line.strip()!r}") from None
        if not name:
            raise AlignmentError(f"{source}:{lineno}: empty phoneme label")
        if end <= start:
            raise AlignmentError(f"{source}:{lineno}: non-monotone alignment (end <= start)")
        if bounds and start < bounds[-1][1]:
            raise AlignmentError(f"{source}:{lineno}: non-monotone alignment "
                                 f"(starts at {start} before previous end {bounds[-1][1]})")
        if bounds and start > bounds[-1][1]:
            raise AlignmentError(f"{source}:{lineno}: gap in alignment between "
                                 f"{bounds[-1][1]} and {start}")
        phonemes.append(name)
        bounds.append((start, end))
    if not phonemes:
        raise AlignmentError(f"{source}: no labels")
    if inventory is not None:
        inventory.ids(phonemes)
    edges = np.array([snap_ms(bounds[0][0], frameshift_ms)]
                     + [snap_ms(e, frameshift_ms) for _, e in bounds])
    durations = np.diff(edges)
    if np.any(durations <= 0):
        bad = int(np.flatnonzero(durations <= 0)[0])
        raise AlignmentError(f"{source}: label {bad + 1} ({phonemes[bad]}) is shorter than one frame")
    return phonemes, durations.astype(np.float64), float(edges[0])


def load_alignment(path, inventory=None, frameshift_ms: int = 5) -> Utterance:
    path = Path(path)
    phonemes, durations, start = parse_alignment(path.read_text(), str(path), inventory, frameshift_ms)
    return Utterance(id=path.stem, phonemes=tuple(phonemes), durations_ms=durations,
                     audio_path=str(path.parent.parent / "wav" / f"{path.stem}.wav"),
                     start_ms=start)


def write_alignment(path, phonemes, durations_ms, start_ms: float = 0.0) -> None:
    t = start_ms
    lines = []
    for p, d in zip(phonemes, durations_ms):
        lines.append(f"{p}\t{t:g}\t{t + d:g}")
        t += d
    Path(path).write_text("\n".join(lines) + "\n")


def reconcile_frames(frames: np.ndarray, n_frames: int) -> np.ndarray:
    """Adjust per-phoneme frame counts to sum to ``n_frames`` by editing the final
    phoneme (spilling into earlier ones if it would drop below one frame)."""
    frames = np.asarray(frames, dtype=np.int64).copy()
    if n_frames < len(frames):
        raise CorpusError(f"{n_frames} frames cannot hold {len(frames)} phonemes")
    diff = n_frames - int(frames.sum())
    i = len(frames) - 1
    while diff != 0:
        if diff > 0:
            frames[i] += diff
            diff = 0
        else:
            take = min(-diff, frames[i] - 1)
            frames[i] -= take
            diff += take
            i -= 1
    return frames


# ---------------------------------------------------------------- cache

CACHE_STREAMS = ("mel", "f0", "bap", "vuv", "dur")


def corpus_ids(corpus_dir) -> list[str]:
    corpus_dir = Path(corpus_dir)
    ids = {p.stem for sub in ("wav", "lab", "txt") for p in (corpus_dir / sub).glob("*.*")}
    return sorted(ids)


def read_text(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").split()


def _cache_paths(cache_dir: Path, utt_id: str) -> dict[str, Path]:
    return {s: cache_dir / f"{utt_id}.{s}" for s in CACHE_STREAMS}


def _is_fresh(cache: dict[str, Path], sources: list[Path]) -> bool:
    if not all(p.exists() for p in cache.values()):
        return False
    oldest = min(p.stat().st_mtime for p in cache.values())
    return all(s.stat().st_mtime <= oldest for s in sources)


def _load_cached(cache: dict[str, Path]):
    mel = read_feature_file(cache["mel"])
    f0 = read_feature_file(cache["f0"])[:, 0].astype(np.float64)
    bap = read_feature_file(cache["bap"])[:, 0].astype(np.float64)
    vuv = read_feature_file(cache["vuv"])[:, 0] > 0.5
    dur = read_feature_file(cache["dur"])[:, 0].astype(np.int64)
    return AcousticTrack(f0=f0, bap=bap, voiced=vuv, mel=mel.astype(np.float64)), dur


def _prepare_one(args):
    corpus_dir, utt_id, spec, cache_dir = args
    corpus_dir = Path(corpus_dir)
    wav_p, lab_p, txt_p = (corpus_dir / "wav" / f"{utt_id}.wav", corpus_dir / "lab" / f"{utt_id}.lab",
                           corpus_dir / "txt" / f"{utt_id}.txt")
    for p in (wav_p, lab_p, txt_p):
        if not p.exists():
            return utt_id, None, f"missing {p.relative_to(corpus_dir)}", False
    try:
        utt = load_alignment(lab_p, frameshift_ms=spec.frameshift_ms)
        text = read_text(txt_p)
        if list(utt.phonemes) != text:
            return utt_id, None, "text does not match alignment labels", False
        wave = read_wav(wav_p)
        cache = _cache_paths(Path(cache_dir), utt_id) if cache_dir else None
        rebuilt = True
        if cache and _is_fresh(cache, [wav_p, lab_p, txt_p]):
            track, frames = _load_cached(cache)
            rebuilt = False
        else:
            track = analyze(wave, spec)
            frames = (utt.durations_ms / spec.frameshift_ms).round().astype(np.int64)
            mismatch = int(frames.sum()) - track.n_frames
            # a 25 ms window always loses ~4 frames against the label span
            if abs(mismatch) > 2:
                log.debug("%s: alignment covers %d frames, audio has %d; adjusting final phoneme",
                            utt_id, frames.sum(), track.n_frames)
            frames = reconcile_frames(frames, track.n_frames)
            if cache:
                write_feature_file(cache["mel"], track.mel)
                write_feature_file(cache["f0"], track.f0)
                write_feature_file(cache["bap"], track.bap)
                write_feature_file(cache["vuv"], track.voiced.astype(np.float32))
                write_feature_file(cache["dur"], frames)
                track, frames = _load_cached(cache)
    except (AlignmentError, AudioError, CorpusError, OSError) as exc:
        return utt_id, None, str(exc), False
    return utt_id, (utt.phonemes, frames, track, wave), None, rebuilt


def build_training_cache(corpus_dir, spec: FrameSpec = DEFAULT_SPEC, inventory=None,
                         cache_dir=None, workers: int = 1, report: dict | None = None):
    """Analyse every utterance in ``corpus_dir`` and return TrainingExamples.

    Utterances with missing or invalid files are skipped with a warning. With
    ``cache_dir`` set, features are written there and reused while newer than
    their sources. Without an ``inventory`` one is built from the labels seen.
    ``report`` (if given) receives ``rebuilt``/``reused``/``errors``.
    """
    corpus_dir = Path(corpus_dir)
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
    jobs = [(str(corpus_dir), u, spec, str(cache_dir) if cache_dir else None)
            for u in corpus_ids(corpus_dir)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_prepare_one, jobs))
    else:
        results = [_prepare_one(j) for j in jobs]

    ok, errors, rebuilt = [], {}, 0
    for utt_id, payload, err, was_rebuilt in results:
        if err:
            log.warning("%s: skipped (%s)", utt_id, err)
            errors[utt_id] = err
        else:
            ok.append((utt_id, payload))
            rebuilt += was_rebuilt
    if not ok:
        raise CorpusError(f"{corpus_dir}: no valid utterances")
    if inventory is None:
        inventory = PhonemeInventory.from_symbols(p for _, (ph, *_rest) in ok for p in ph)

    examples = []
    for utt_id, (phonemes, frames, track, wave) in ok:
        try:
            ids = inventory.ids(phonemes)
        except InventoryError as exc:
            log.warning("%s: skipped (%s)", utt_id, exc)
            errors[utt_id] = str(exc)
            continue
        examples.append(TrainingExample(utt_id, tuple(phonemes), ids, frames, track, wave))
    if not examples:
        raise CorpusError(f"{corpus_dir}: no valid utterances")
    if report is not None:
        report.update(rebuilt=rebuilt, reused=len(examples) - rebuilt, errors=errors,
                      inventory=inventory)
    return examples


def split(items, held_out_fraction: float, seed: int = 0):
    """Deterministic train/test partition of ``items`` (ordered by ``.id`` if present)."""
    if not 0 < held_out_fraction < 1:
        raise ValueError(f"held-out fraction must lie in (0, 1), got {held_out_fraction}")
    items = sorted(items, key=lambda e: getattr(e, "id", e))
    n = len(items)
    n_test = max(1, int(round(held_out_fraction * n)))
    if n - n_test < 1:
        raise ValueError(f"held-out fraction {held_out_fraction} leaves an empty training set "
                         f"({n} utterances)")
    order = np.random.default_rng(seed).permutation(n)
    test_idx = set(order[:n_test].tolist())
    train = [it for i, it in enumerate(items) if i not in test_idx]
    test = [it for i, it in enumerate(items) if i in test_idx]
    return train, test
