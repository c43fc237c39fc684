"""Command line: prepare | train | synth | eval | bench-rtf | context-study."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, PipelineConfig, load_config
from .corpus import (AlignmentError, CorpusError, InventoryError, PhonemeInventory,
                     build_training_cache, split)
from .features import SAMPLE_RATE, AudioError
from .model import ModelError
from .nn.checkpoint import CheckpointError
from .prosody import ProsodyError, ProsodyOverride
from .trainer import TrainingDiverged

log = logging.getLogger("ptts")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


# ------------------------------------------------------------ helpers

def _inventory_path(cfg: PipelineConfig) -> Path:
    return Path(cfg.out_dir) / "inventory.json"


def _require_corpus(cfg: PipelineConfig) -> Path:
    if not cfg.corpus_dir:
        raise ConfigError("corpus_dir is not set (config file or --corpus)")
    path = Path(cfg.corpus_dir)
    if not path.is_dir():
        raise DataError(f"corpus directory {path} does not exist")
    return path


def load_dataset(cfg: PipelineConfig, report: dict | None = None):
    """(inventory, train, test) from the corpus, reusing the feature cache."""
    corpus = _require_corpus(cfg)
    inv_path = _inventory_path(cfg)
    inventory = PhonemeInventory.load(inv_path) if inv_path.exists() else None
    report = {} if report is None else report
    examples = build_training_cache(corpus, cfg.frame, inventory, cfg.cache_path, cfg.workers, report)
    inventory = report["inventory"]
    if cfg.train.held_out_fraction > 0:
        train, test = split(examples, cfg.train.held_out_fraction, cfg.seed)
    else:
        train, test = sorted(examples, key=lambda e: e.id), []
    return inventory, train, test


def _read_text(args) -> list[str]:
    if args.text_file:
        text = Path(args.text_file).read_text(encoding="utf-8")
    elif args.text:
        text = args.text
    else:
        raise ConfigError("give the phoneme text with --text or --text-file")
    phonemes = text.split()
    if not phonemes:
        raise DataError("empty phoneme text")
    return phonemes


def _load_model(path):
    from .trainer import load_model
    model, inventory, step, meta = load_model(path)
    log.info("loaded %s (step %d)", path, step)
    return model, inventory


# ------------------------------------------------------------ commands

def cmd_prepare(cfg: PipelineConfig, args) -> int:
    report = {}
    inventory, train, test = load_dataset(cfg, report)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not _inventory_path(cfg).exists():
        inventory.save(_inventory_path(cfg))
    (out / "split").mkdir(exist_ok=True)
    (out / "split" / "train.txt").write_text("".join(f"{e.id}\n" for e in train))
    (out / "split" / "test.txt").write_text("".join(f"{e.id}\n" for e in test))
    print(json.dumps({"utterances": len(train) + len(test), "rebuilt": report["rebuilt"],
                      "reused": report["reused"], "skipped": sorted(report["errors"]),
                      "train": len(train), "test": len(test)}))
    return EXIT_OK


def cmd_train(cfg: PipelineConfig, args) -> int:
    from .trainer import Trainer
    inventory, train, _ = load_dataset(cfg)
    if not _inventory_path(cfg).exists():
        inventory.save(_inventory_path(cfg))
    if not train:
        raise DataError("empty training split")
    trainer = Trainer(train, inventory, cfg.train, out_dir=Path(cfg.out_dir) / "train")
    if args.resume:
        trainer.load(args.resume)
    history = trainer.run()
    last = history[-1] if history else None
    summary = {"steps": trainer.step, "checkpoint": str(Path(cfg.out_dir) / "train" / "latest.ckpt")}
    if last:
        summary.update({k: round(getattr(last, k), 6) for k in ("L_total", "L_dur", "L_mel", "L_vocoder")})
    print(json.dumps(summary))
    return EXIT_OK


def _override_from_args(cfg: PipelineConfig, args) -> ProsodyOverride:
    if args.ref_dur or args.ref_f0:
        if not (args.ref_dur and args.ref_f0):
            raise ConfigError("--ref-dur and --ref-f0 must be given together")
        return ProsodyOverride.from_files(args.ref_dur, args.ref_f0)
    dur = args.dur_scale if args.dur_scale is not None else cfg.prosody.dur_factor
    f0 = args.f0_scale if args.f0_scale is not None else cfg.prosody.f0_factor
    force = args.force or cfg.prosody.force
    if dur == 1.0 and f0 == 1.0:
        return ProsodyOverride()
    return ProsodyOverride.scaled(dur, f0, force)


def cmd_synth(cfg: PipelineConfig, args) -> int:
    from .synthesis import synthesize_to_file
    model, inventory = _load_model(args.checkpoint)
    phonemes = _read_text(args)
    override = _override_from_args(cfg, args)
    out = Path(args.output) if args.output else Path(cfg.out_dir) / "synth.wav"
    out.parent.mkdir(parents=True, exist_ok=True)
    result = synthesize_to_file(model, inventory, phonemes, out, override, seed=cfg.seed,
                                dump_dir=args.dump_dir)
    print(json.dumps({"wav": str(out), "frames": int(result.frames.sum()),
                      "seconds": len(result.waveform.samples) / SAMPLE_RATE}))
    return EXIT_OK


def cmd_eval(cfg: PipelineConfig, args) -> int:
    from .evaluation import evaluate_model
    model, inventory = _load_model(args.checkpoint)
    _, train, test = load_dataset(cfg)
    subset = {"train": train, "test": test, "all": train + test}[args.split]
    if not subset:
        raise DataError(f"empty {args.split} set (set train.held_out_fraction for a test split)")
    report = evaluate_model(model, inventory, subset, seed=cfg.seed)
    out = Path(cfg.out_dir) / "eval"
    report.write(out)
    print(report.format(), end="")
    return EXIT_OK


def cmd_bench(cfg: PipelineConfig, args) -> int:
    from .evaluation import format_table, hardware_string, measure_rtf, write_csv
    from .synthesis import synthesize
    model, inventory = _load_model(args.checkpoint)
    texts = [t.split() for t in (args.text or [])]
    if not texts:
        texts = [list(inventory.symbols)]
    rows = []
    for label, batch in (("1x", texts), ("2x", [t + t for t in texts])):
        res = measure_rtf(lambda ph: synthesize(model, inventory, ph, seed=cfg.seed).waveform,
                          batch, repeats=args.repeats)
        rows.append((label, res.synth_seconds, res.audio_seconds, res.rtf, hardware_string()))
    header = ("text", "synth_seconds", "audio_seconds", "RTF", "hardware")
    out = Path(cfg.out_dir) / "bench"
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "rtf.csv", header, rows)
    table = format_table(header, rows)
    (out / "rtf.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_context_study(cfg: PipelineConfig, args) -> int:
    from .trainer import format_context_study, run_context_study
    if cfg.train.held_out_fraction <= 0:
        cfg = replace(cfg, train=replace(cfg.train, held_out_fraction=0.2))
    inventory, train, test = load_dataset(cfg)
    rows = run_context_study(train, test, inventory, cfg.context_study.bank_sizes,
                             cfg.context_study.steps, cfg.seed)
    text = format_context_study(rows)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "context_study.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "synth": cmd_synth, "eval": cmd_eval,
            "bench-rtf": cmd_bench, "context-study": cmd_context_study}


# ------------------------------------------------------------ parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--corpus", dest="corpus_dir")
    common.add_argument("--out", dest="out_dir")
    common.add_argument("--cache", dest="cache_dir")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--held-out", dest="held_out_fraction", type=float)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ptts", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="analyse the corpus into the feature cache")

    p = sub.add_parser("train", parents=[common], help="joint training")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", dest="lr_initial", type=float)
    p.add_argument("--bank", dest="conv_bank", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("synth", parents=[common], help="text to waveform")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", help="space separated phonemes")
    p.add_argument("--text-file")
    p.add_argument("--output", "-o")
    p.add_argument("--dur-scale", type=float)
    p.add_argument("--f0-scale", type=float)
    p.add_argument("--force", action="store_true", help="allow factors outside [0.5, 1.5]")
    p.add_argument("--ref-dur", help="reference durations (label file)")
    p.add_argument("--ref-f0", help="reference f0, one value per 5 ms frame")
    p.add_argument("--dump-dir")

    p = sub.add_parser("eval", parents=[common], help="objective metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")

    p = sub.add_parser("bench-rtf", parents=[common], help="real-time factor")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", action="append", help="phoneme text (repeatable)")
    p.add_argument("--repeats", type=int, default=3)

    p = sub.add_parser("context-study", parents=[common], help="duration accuracy per conv-bank size")
    p.add_argument("--steps", type=int)
    p.add_argument("--banks", type=lambda s: [int(x) for x in s.split(",")])
    return parser


def _overrides(args) -> dict:
    mapping = {"corpus_dir": "corpus_dir", "out_dir": "out_dir", "cache_dir": "cache_dir",
               "seed": "seed", "workers": "workers", "held_out_fraction": "train.held_out_fraction",
               "max_steps": "train.max_steps", "batch_size": "train.batch_size",
               "lr_initial": "train.lr_initial", "conv_bank": "train.conv_bank",
               "checkpoint_every": "train.checkpoint_every", "steps": "context_study.steps",
               "banks": "context_study.bank_sizes"}
    out = {key: getattr(args, attr) for attr, key in mapping.items() if hasattr(args, attr)}
    if out.get("seed") is not None:
        out["train.seed"] = out["seed"]
    return out


def _fail(code: int, kind: str, exc: BaseException) -> int:
    reason = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error code={code} kind={kind} reason={json.dumps(reason)}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        if getattr(args, "seed", None) is not None:
            cfg = replace(cfg, seed=args.seed)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ProsodyError) as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except TrainingDiverged as exc:
        return _fail(EXIT_DIVERGED, "divergence", exc)
    except (DataError, CorpusError, AlignmentError, InventoryError, AudioError, ModelError,
            CheckpointError, FileNotFoundError, ValueError) as exc:
        return _fail(EXIT_DATA, "data", exc)


if __name__ == "__main__":
    sys.exit(main())
