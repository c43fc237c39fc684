"""Joint multi-task training: duration + f0/BAP + mel + vocoder losses, summed."""
from __future__ import annotations

import csv
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .corpus import PhonemeInventory, TrainingExample
from .features import UNVOICED_F0, generate_excitation
from .model import (Batch, ModelConfig, TTSModel, VOICED_F0_THRESHOLD, duration_loss,
                    log_mse_loss, make_batch, mse_loss)
from .nn import ops
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.optim import Adam, StepSchedule
from .vocoder import VocoderLossConfig, vocoder_loss

log = logging.getLogger(__name__)

BANK_SIZES = (2, 4, 8, 16)
LOSS_NAMES = ("L_dur", "L_f0", "L_BAP", "L_mel", "L_td", "L_cd", "L_vocoder", "L_total")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr_initial: float = 0.002
    lr_final: float = 1e-4
    lr_boundary: int = 50000
    max_steps: int = 1000
    seed: int = 0
    lam: float = 0.5
    conv_bank: int = 8
    held_out_fraction: float = 0.0
    crop_frames: int = 24
    checkpoint_every: int = 500
    log_every: int = 10
    teacher_forced_f0: bool = True
    single_threaded: bool = True

    def __post_init__(self):
        for name in ("batch_size", "max_steps", "crop_frames", "checkpoint_every", "log_every",
                     "lr_boundary"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_initial <= 0 or self.lr_final <= 0:
            raise ValueError("learning rates must be positive")
        if self.conv_bank not in BANK_SIZES:
            raise ValueError(f"conv_bank must be one of {BANK_SIZES}, got {self.conv_bank}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if not 0.0 <= self.held_out_fraction < 1.0:
            raise ValueError("held_out_fraction must lie in [0, 1)")
        if self.crop_frames < 6:
            raise ValueError("crop_frames must cover at least two analysis frames (>= 6)")

    @property
    def schedule(self) -> StepSchedule:
        return StepSchedule(self.lr_initial, self.lr_final, self.lr_boundary)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class LossReport:
    step: int
    L_dur: float
    L_f0: float
    L_BAP: float
    L_mel: float
    L_td: float
    L_cd: float
    L_vocoder: float
    L_total: float
    lr: float = 0.0

    def identity_error(self) -> float:
        return abs(self.L_total - (self.L_dur + self.L_f0 + self.L_BAP + self.L_mel + self.L_vocoder))

    def finite(self) -> bool:
        return all(math.isfinite(getattr(self, n)) for n in LOSS_NAMES)


def example_seed(utt_id: str, seed: int) -> int:
    return (zlib.crc32(utt_id.encode()) + 7919 * seed) % (2**32)


def prepare_targets(examples: list[TrainingExample], inventory: PhonemeInventory, cfg: ModelConfig,
                    seed: int = 0) -> dict:
    """Per-example arrays reused every step (excitation is generated once per utterance)."""
    out = {}
    for ex in examples:
        tr = ex.track
        out[ex.id] = dict(
            embeddings=inventory.embed(ex.phoneme_ids),
            frames=ex.durations_frames,
            durations_ms=ex.durations_ms,
            log_f0=np.log(tr.f0),
            bap=tr.bap,
            f0_hz=tr.f0,
            mel=tr.mel,
            wave=ex.waveform.samples[: tr.n_frames * cfg.hop],
            excitation=generate_excitation(tr.f0, tr.bap, seed=example_seed(ex.id, seed)),
        )
        w = out[ex.id]["wave"]
        if len(w) < tr.n_frames * cfg.hop:
            out[ex.id]["wave"] = np.pad(w, (0, tr.n_frames * cfg.hop - len(w)))
    return out


def collate(items: list[dict], cfg: ModelConfig, ids=None) -> Batch:
    keys = ("durations_ms", "log_f0", "bap", "f0_hz", "mel", "wave", "excitation")
    batch = make_batch([it["embeddings"] for it in items], [it["frames"] for it in items], cfg,
                       **{k: [it[k] for it in items] for k in keys})
    batch.ids = list(ids or [])
    return batch


def forward_losses(model: TTSModel, batch: Batch, rng: np.random.Generator,
                   tcfg: TrainConfig) -> dict:
    """Build the full graph for one batch; returns the loss tensors keyed by name."""
    cfg = model.cfg
    encoded = model.encode(batch)
    dur = model.predict_durations(encoded)
    l_dur = duration_loss(dur, np.where(batch.phone_mask > 0, batch.durations_ms, 1.0), batch.phone_mask)

    upsampled = model.upsample(encoded, batch)
    log_f0, bap, bottleneck = model.predict_f0_bap(upsampled, batch)
    l_f0 = mse_loss(log_f0, batch.log_f0, batch.frame_mask)
    l_bap = mse_loss(bap, batch.bap, batch.frame_mask)

    if tcfg.teacher_forced_f0:
        f0_cond = batch.f0_hz
    else:
        f0_pred = np.exp(log_f0.data.astype(np.float64))
        f0_cond = np.where(f0_pred >= VOICED_F0_THRESHOLD, f0_pred, UNVOICED_F0)
    mel = model.decode_mel(bottleneck, model.f0_conditioning(f0_cond, batch), batch)
    l_mel = log_mse_loss(mel, batch.mel, batch.frame_mask)

    bsz, k_max, bins = mel.shape
    crop = int(min(tcfg.crop_frames, batch.n_frames.min()))
    starts = np.array([rng.integers(0, n - crop + 1) for n in batch.n_frames])
    frame_idx = (np.arange(bsz)[:, None] * k_max + starts[:, None] + np.arange(crop)[None, :]).ravel()
    mel_crop = ops.reshape(ops.take(ops.reshape(mel, (bsz * k_max, bins)), frame_idx, axis=0),
                           (bsz, crop, bins))
    hop = cfg.hop
    sample_idx = starts[:, None] * hop + np.arange(crop * hop)[None, :]
    rows = np.arange(bsz)[:, None]
    exc = batch.excitation[rows, sample_idx]
    ref = batch.wave[rows, sample_idx]
    pred = model.vocoder(mel_crop, exc)
    l_td, l_cd, l_voc = vocoder_loss(pred, ref, VocoderLossConfig(tcfg.lam))

    total = ops.add(ops.add(ops.add(ops.add(l_dur, l_f0), l_bap), l_mel), l_voc)
    return {"L_dur": l_dur, "L_f0": l_f0, "L_BAP": l_bap, "L_mel": l_mel, "L_td": l_td,
            "L_cd": l_cd, "L_vocoder": l_voc, "L_total": total}


def make_batches(ids_by_length: list[str], batch_size: int) -> list[list[str]]:
    """Bucket utterances of similar length together."""
    return [ids_by_length[i: i + batch_size] for i in range(0, len(ids_by_length), batch_size)]


class Trainer:
    def __init__(self, examples, inventory: PhonemeInventory, tcfg: TrainConfig = TrainConfig(),
                 model_cfg: ModelConfig | None = None, out_dir=None):
        if not examples:
            raise ValueError("empty training set")
        self.tcfg = tcfg
        self.model_cfg = model_cfg or ModelConfig(encoder_bank=tcfg.conv_bank)
        self.inventory = inventory
        self.model = TTSModel(self.model_cfg, seed=tcfg.seed)
        self.optimizer = Adam(self.model.parameters(), tcfg.schedule)
        self.targets = prepare_targets(examples, inventory, self.model_cfg, tcfg.seed)
        by_len = sorted(self.targets, key=lambda i: (len(self.targets[i]["f0_hz"]), i))
        self.batches = make_batches(by_len, tcfg.batch_size)
        self.history: list[LossReport] = []
        self.out_dir = Path(out_dir) if out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    @property
    def step(self) -> int:
        return self.optimizer.step_count

    def batch_for_step(self, step: int) -> Batch:
        n = len(self.batches)
        epoch, pos = divmod(step, n)
        order = np.random.default_rng([self.tcfg.seed, epoch]).permutation(n)
        ids = self.batches[order[pos]]
        return collate([self.targets[i] for i in ids], self.model_cfg, ids)

    def train_step(self) -> LossReport:
        step = self.step
        rng = np.random.default_rng([self.tcfg.seed, step, 1])
        batch = self.batch_for_step(step)
        lr = self.optimizer.lr
        self.optimizer.zero_grad()
        losses = forward_losses(self.model, batch, rng, self.tcfg)
        values = {k: float(v.data) for k, v in losses.items()}
        report = LossReport(step=step, lr=lr, **values)
        if not report.finite():
            raise TrainingDiverged(f"non-finite loss at step {step}: {values}",
                                   self._diagnostic_checkpoint())
        losses["L_total"].backward()
        self.optimizer.step()
        self.history.append(report)
        return report

    def run(self, steps: int | None = None, callback=None) -> list[LossReport]:
        target = self.tcfg.max_steps if steps is None else self.step + steps
        limits = threadpool_limits(1) if self.tcfg.single_threaded else None
        try:
            t0 = time.time()
            while self.step < target:
                report = self.train_step()
                if report.step % self.tcfg.log_every == 0:
                    log.info("step %d total %.4f dur %.4f f0 %.4f bap %.4f mel %.4f voc %.4f (%.1fs)",
                             report.step, report.L_total, report.L_dur, report.L_f0, report.L_BAP,
                             report.L_mel, report.L_vocoder, time.time() - t0)
                if callback:
                    callback(report)
                if self.out_dir and self.step % self.tcfg.checkpoint_every == 0:
                    self.save(self.out_dir / f"step{self.step:07d}.ckpt")
                    self.save(self.out_dir / "latest.ckpt")
        finally:
            if limits is not None:
                limits.unregister()
        if self.out_dir:
            self.save(self.out_dir / "latest.ckpt")
            write_history(self.out_dir / "loss_history.csv", self.history)
        return self.history

    # --- persistence
    def metadata(self) -> dict:
        inv = self.inventory
        return {"train_config": asdict(self.tcfg), "model_config": self.model_cfg.to_dict(),
                "inventory": {"seed": inv.seed, "symbols": inv.symbols, "table": inv.table.tolist()}}

    def save(self, path) -> None:
        arrays = {}
        for name, p in self.model.named_parameters():
            arrays[name] = p.data
            arrays[f"adam.m/{name}"] = p.m
            arrays[f"adam.v/{name}"] = p.v
        save_checkpoint(path, arrays, self.step, self.model_cfg.arch_hash, self.metadata())

    def load(self, path) -> None:
        arrays, step, _, _ = load_checkpoint(path, self.model_cfg.arch_hash)
        params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
        self.model.load_state_dict(params)
        for name, p in self.model.named_parameters():
            p.m = arrays.get(f"adam.m/{name}", np.zeros_like(p.data)).astype(p.dtype)
            p.v = arrays.get(f"adam.v/{name}", np.zeros_like(p.data)).astype(p.dtype)
        self.optimizer.step_count = step

    def _diagnostic_checkpoint(self):
        if not self.out_dir:
            return None
        path = self.out_dir / "diverged.ckpt"
        self.save(path)
        return path


def write_history(path, history: list[LossReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("step",) + LOSS_NAMES + ("lr",))
        for r in history:
            writer.writerow([r.step] + [f"{getattr(r, n):.9g}" for n in LOSS_NAMES] + [r.lr])


def load_model(path, expected_hash: str | None = None):
    """Rebuild a trained model and its inventory from a checkpoint."""
    arrays, step, arch, meta = load_checkpoint(path)
    cfg = ModelConfig(**meta["model_config"])
    if arch != cfg.arch_hash or (expected_hash is not None and arch != expected_hash):
        from .nn.checkpoint import CheckpointError
        raise CheckpointError(f"{path}: architecture hash mismatch")
    model = TTSModel(cfg, seed=0)
    model.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("adam.")})
    inv_meta = meta["inventory"]
    inventory = PhonemeInventory(inv_meta["symbols"], seed=inv_meta["seed"],
                                 table=np.array(inv_meta["table"]))
    return model, inventory, step, meta


def train(examples, inventory: PhonemeInventory, tcfg: TrainConfig = TrainConfig(), out_dir=None,
          resume_from=None, callback=None):
    """Train from scratch (or resume) and return ``(trainer, history)``."""
    trainer = Trainer(examples, inventory, tcfg, out_dir=out_dir)
    if resume_from:
        trainer.load(resume_from)
    trainer.run(callback=callback)
    return trainer, trainer.history


# ------------------------------------------------------------ context study

REFERENCE_CONTEXT_ROW = {"filters": 8, "RMSE": 4.437, "MAE": 2.694, "PCC": 0.818}


@dataclass
class ContextStudyRow:
    filters: int
    receptive_field: int
    rmse_ms: float
    mae_ms: float
    pcc: float
    rmse_frames: float
    mae_frames: float


def train_duration_path(examples, inventory: PhonemeInventory, bank: int, steps: int, seed: int = 0,
                        batch_size: int = 16, schedule: StepSchedule | None = None) -> TTSModel:
    """Fit only the text encoder and duration head (the part the bank size affects)."""
    cfg = ModelConfig(encoder_bank=bank)
    model = TTSModel(cfg, seed=seed)
    params = model.encoder.parameters() + model.duration.parameters()
    opt = Adam(params, schedule or StepSchedule())
    items = [(inventory.embed(ex.phoneme_ids), ex.durations_frames, ex.durations_ms) for ex in examples]
    order = sorted(range(len(items)), key=lambda i: len(items[i][0]))
    batches = make_batches(order, batch_size)
    for step in range(steps):
        epoch, pos = divmod(step, len(batches))
        pick = np.random.default_rng([seed, epoch]).permutation(len(batches))[pos]
        chosen = [items[i] for i in batches[pick]]
        batch = make_batch([c[0] for c in chosen], [c[1] for c in chosen], cfg,
                           durations_ms=[c[2] for c in chosen])
        opt.zero_grad()
        pred = model.predict_durations(model.encode(batch))
        loss = duration_loss(pred, np.where(batch.phone_mask > 0, batch.durations_ms, 1.0), batch.phone_mask)
        if not math.isfinite(float(loss.data)):
            raise TrainingDiverged(f"duration path diverged at step {step} (bank {bank})")
        loss.backward()
        opt.step()
    return model


def predict_durations_ms(model: TTSModel, inventory: PhonemeInventory, phoneme_ids) -> np.ndarray:
    emb = inventory.embed(phoneme_ids)
    batch = make_batch([emb], [np.ones(len(emb), dtype=np.int64)], model.cfg)
    with ops.no_grad():
        return model.predict_durations(model.encode(batch)).data[0].astype(np.float64)


def run_context_study(train_set, test_set, inventory: PhonemeInventory, bank_sizes=BANK_SIZES,
                      steps: int = 500, seed: int = 0) -> list[ContextStudyRow]:
    from .evaluation import duration_metrics
    if not test_set:
        raise ValueError("context study needs a non-empty held-out set")
    rows = []
    for bank in bank_sizes:
        model = train_duration_path(train_set, inventory, bank, steps, seed)
        ref = np.concatenate([ex.durations_ms for ex in test_set])
        pred = np.concatenate([predict_durations_ms(model, inventory, ex.phoneme_ids) for ex in test_set])
        rmse, mae, pcc = duration_metrics(ref, pred, strict=False)
        rmse_f, mae_f, _ = duration_metrics(ref / 5.0, pred / 5.0, strict=False)
        rows.append(ContextStudyRow(bank, model.cfg.encoder_receptive_field, rmse, mae, pcc, rmse_f, mae_f))
        log.info("bank %d: RMSE %.3f ms MAE %.3f ms PCC %.3f", bank, rmse, mae, pcc)
    return rows


def format_context_study(rows: list[ContextStudyRow]) -> str:
    from .evaluation import format_table
    header = ("filters", "receptive field", "RMSE (ms)", "MAE (ms)", "PCC", "RMSE (frames)", "MAE (frames)")
    body = [(r.filters, r.receptive_field, r.rmse_ms, r.mae_ms, r.pcc, r.rmse_frames, r.mae_frames)
            for r in rows]
    ref = REFERENCE_CONTEXT_ROW
    footer = ("",
              f"published reference for {ref['filters']} filters (full-size corpus, not reproducible at this scale): "
              f"RMSE {ref['RMSE']} MAE {ref['MAE']} PCC {ref['PCC']}")
    return format_table(header, body, footer)
