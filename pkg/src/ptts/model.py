"""Text-to-acoustics network and the joint model.

Text encoder -> duration head -> duration-based upsampling with frame
position encodings -> f0/BAP estimator -> f0-conditioned mel decoder,
followed by the excitation-driven vocoder.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .features import MEL_FLOOR, UNVOICED_F0
from .nn import ops
from .nn.autograd import Tensor
from .nn.checkpoint import config_hash
from .nn.layers import BiGRU, Conv1d, ConvBank, Dense, Module
from .vocoder import Vocoder

FRAMESHIFT_MS = 5
# geometric midpoint of the 1 Hz sentinel and the 50 Hz search floor
VOICED_F0_THRESHOLD = float(np.sqrt(50.0))
DURATION_UNIT_MS = 100.0


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embedding_dim: int = 128
    channels: int = 128
    encoder_bank: int = 8
    encoder_projections: int = 2
    gru_hidden: int = 128
    position_dim: int = 16
    position_clamp: int = 255
    f0_layers: int = 3
    f0_kernel: int = 5
    f0_encoding_dim: int = 32
    f0_table_max: int = 1000
    decoder_bank: int = 16
    decoder_projections: int = 3
    mel_bins: int = 80
    vocoder_layers: int = 8
    vocoder_channels: int = 64
    vocoder_kernel: int = 3
    hop: int = 80

    def __post_init__(self):
        if self.embedding_dim != self.channels:
            raise ModelError("the residual connection needs embedding_dim == channels")
        if min(self.encoder_bank, self.decoder_bank, self.f0_layers, self.vocoder_layers) < 1:
            raise ModelError("layer counts must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def arch_hash(self) -> str:
        return config_hash(self.to_dict())

    @property
    def encoder_receptive_field(self) -> int:
        return self.encoder_bank + 2 * self.encoder_projections

    @property
    def decoder_receptive_field(self) -> int:
        return self.decoder_bank + 2 * self.decoder_projections

    @property
    def f0_receptive_field(self) -> int:
        return 1 + self.f0_layers * (self.f0_kernel - 1)


# ------------------------------------------------------------ fixed encodings

def sinusoid(positions, dim: int, base: float = 10000.0) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)[..., None]
    freqs = base ** (-2.0 * np.arange(dim // 2) / dim)
    return np.concatenate([np.sin(pos * freqs), np.cos(pos * freqs)], axis=-1)


def frames_from_durations(durations_ms, frameshift_ms: int = FRAMESHIFT_MS) -> np.ndarray:
    """Frames per phoneme: round(duration / shift), at least one."""
    d = np.asarray(durations_ms, dtype=np.float64)
    if np.any(~np.isfinite(d)) or np.any(d < 0):
        raise ModelError("durations must be finite and non-negative")
    return np.maximum(1, np.round(d / frameshift_ms)).astype(np.int64)


def frame_positions(frames) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per frame: owning phoneme index, index from phoneme start, index from phoneme end."""
    frames = np.asarray(frames, dtype=np.int64)
    owner = np.repeat(np.arange(len(frames)), frames)
    starts = np.repeat(np.cumsum(frames) - frames, frames)
    from_start = np.arange(frames.sum()) - starts
    from_end = np.repeat(frames, frames) - 1 - from_start
    return owner, from_start, from_end


def position_encoding(frames, dim: int = 16, clamp: int = 255) -> np.ndarray:
    """Fixed 2*dim encoding of every frame's offset from its phoneme's start and end."""
    _, from_start, from_end = frame_positions(frames)
    return np.concatenate([sinusoid(np.minimum(from_start, clamp), dim),
                           sinusoid(np.minimum(from_end, clamp), dim)], axis=-1)


class F0Encoder:
    """Lookup of integer-rounded f0 into a sinusoidal table covering 1..max Hz."""

    def __init__(self, dim: int = 32, max_hz: int = 1000):
        self.dim = dim
        self.max_hz = max_hz
        self.table = sinusoid(np.arange(1, max_hz + 1), dim)
        self.table.setflags(write=False)

    def rounded(self, f0_hz) -> np.ndarray:
        f = np.rint(np.asarray(f0_hz, dtype=np.float64)).astype(np.int64)
        bad = (f < 1) | (f > self.max_hz)
        if np.any(bad):
            value = np.asarray(f0_hz).ravel()[np.flatnonzero(bad.ravel())[0]]
            raise ModelError(f"f0 {value:.2f} Hz rounds outside the encoding table 1..{self.max_hz}")
        return f

    def __call__(self, f0_hz) -> np.ndarray:
        return self.table[self.rounded(f0_hz) - 1]


# ------------------------------------------------------------ losses

def masked_mean(err: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over each sequence's valid positions (and trailing feature dims), then over the batch."""
    mask = np.asarray(mask, dtype=np.float64)
    per_item = err.data.size // mask.size
    counts = mask.reshape(mask.shape[0], -1).sum(axis=1) * per_item
    weights = mask / (counts.reshape((-1,) + (1,) * (mask.ndim - 1)) * mask.shape[0])
    weights = weights.reshape(weights.shape + (1,) * (err.ndim - mask.ndim))
    return ops.total(ops.mul(ops.astype(err, np.float64), weights))


def duration_loss(pred_ms: Tensor, target_ms, mask=None) -> Tensor:
    """Mean absolute percentage error."""
    target = np.asarray(target_ms, dtype=np.float64)
    pred = pred_ms if isinstance(pred_ms, Tensor) else Tensor(np.asarray(pred_ms, dtype=np.float64))
    if mask is None:
        mask = np.ones(target.shape)
    safe = np.where(np.asarray(mask) > 0, target, 1.0)
    if np.any(safe <= 0):
        raise ModelError("duration targets must be positive")
    err = ops.mul(ops.absolute(ops.sub(ops.astype(pred, np.float64), target)), 1.0 / safe)
    return masked_mean(err, mask)


def mse_loss(pred: Tensor, target, mask=None) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float64))
    err = ops.square(ops.sub(ops.astype(pred, np.float64), target))
    if mask is None:
        return ops.mean(err)
    return masked_mean(err, mask)


def log_mse_loss(pred: Tensor, target, mask=None) -> Tensor:
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float64))
    return mse_loss(ops.log(ops.astype(pred, np.float64)), np.log(np.asarray(target, dtype=np.float64)), mask)


# ------------------------------------------------------------ modules

class TextEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        c = cfg.channels
        self.bank = ConvBank(cfg.embedding_dim, c, cfg.encoder_bank, rng, dtype)
        dims = [cfg.encoder_bank * c] + [c] * cfg.encoder_projections
        self.projections = [Conv1d(dims[i], dims[i + 1], 3, rng, dtype)
                            for i in range(cfg.encoder_projections)]
        self.rnn = BiGRU(c, cfg.gru_hidden, c, rng, dtype)
        self.receptive_field = cfg.encoder_receptive_field

    def conv_stack(self, emb: Tensor, mask) -> Tensor:
        """Bank + projections + residual embedding: the pre-recurrence tap."""
        h = self.bank(emb, mask)
        for conv in self.projections:
            h = ops.mul(ops.relu(conv(h)), mask)
        return ops.add(h, emb)

    def __call__(self, emb: Tensor, lengths, mask) -> Tensor:
        return ops.mul(self.rnn(self.conv_stack(emb, mask), lengths), mask)


class DurationPredictor(Module):
    """Single dense layer + ReLU; output in units of DURATION_UNIT_MS."""

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        self.dense = Dense(cfg.channels, 1, rng, dtype, bias_init=1.0)

    def __call__(self, encoded: Tensor) -> Tensor:
        out = ops.relu(self.dense(encoded))
        return ops.mul(ops.reshape(out, out.shape[:-1]), DURATION_UNIT_MS)


class F0Estimator(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        c = cfg.channels
        dims = [c + 2 * cfg.position_dim] + [c] * cfg.f0_layers
        self.convs = [Conv1d(dims[i], dims[i + 1], cfg.f0_kernel, rng, dtype)
                      for i in range(cfg.f0_layers)]
        self.f0_head = Dense(c, 1, rng, dtype, bias_init=1.0)
        self.bap_head = Dense(c, 1, rng, dtype, bias_init=0.5)

    def __call__(self, upsampled: Tensor, mask):
        """Returns (log_f0, bap, bottleneck); heads are ReLU so both are >= 0."""
        h = upsampled
        for conv in self.convs:
            h = ops.mul(ops.relu(conv(h)), mask)
        log_f0 = ops.relu(self.f0_head(h))
        bap = ops.relu(self.bap_head(h))
        return ops.reshape(log_f0, log_f0.shape[:-1]), ops.reshape(bap, bap.shape[:-1]), h


class AcousticDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        c = cfg.channels
        self.bank = ConvBank(c + cfg.f0_encoding_dim, c, cfg.decoder_bank, rng, dtype)
        dims = [cfg.decoder_bank * c] + [c] * cfg.decoder_projections
        self.projections = [Conv1d(dims[i], dims[i + 1], 3, rng, dtype)
                            for i in range(cfg.decoder_projections)]
        self.rnn = BiGRU(c, cfg.gru_hidden, c, rng, dtype)
        self.head = Dense(c, cfg.mel_bins, rng, dtype)
        self.receptive_field = cfg.decoder_receptive_field

    def conv_stack(self, bottleneck: Tensor, f0_encoding, mask) -> Tensor:
        if bottleneck.shape[:2] != np.shape(f0_encoding)[:2]:
            raise ModelError(f"frame mismatch: bottleneck {bottleneck.shape[:2]} vs f0 encoding "
                             f"{np.shape(f0_encoding)[:2]}")
        h = ops.concat([bottleneck, Tensor(np.asarray(f0_encoding, dtype=bottleneck.dtype))], axis=-1)
        h = self.bank(h, mask)
        for conv in self.projections:
            h = ops.mul(ops.relu(conv(h)), mask)
        return h

    def __call__(self, bottleneck: Tensor, f0_encoding, lengths, mask) -> Tensor:
        h = self.rnn(self.conv_stack(bottleneck, f0_encoding, mask), lengths)
        # softplus rather than ReLU: a ReLU head here dies under the log-domain loss
        return ops.add(ops.softplus(self.head(h)), MEL_FLOOR)


@dataclass
class Batch:
    """Zero-padded batch; masks mark valid phonemes/frames."""

    embeddings: np.ndarray        # (B, N, E)
    n_phones: np.ndarray          # (B,)
    phone_mask: np.ndarray        # (B, N)
    frames: np.ndarray            # (B, N) frames per phoneme (0 on padding)
    n_frames: np.ndarray          # (B,)
    frame_mask: np.ndarray        # (B, K)
    frame_owner: np.ndarray       # (B, K) flat index into (B*N)
    positions: np.ndarray         # (B, K, 2*pos_dim)
    durations_ms: np.ndarray | None = None
    log_f0: np.ndarray | None = None
    bap: np.ndarray | None = None
    f0_hz: np.ndarray | None = None
    mel: np.ndarray | None = None
    wave: np.ndarray | None = None
    excitation: np.ndarray | None = None
    ids: list = field(default_factory=list)


def make_batch(embeddings, frames, cfg: ModelConfig, dtype=np.float32, **targets) -> Batch:
    """Pad per-utterance embeddings (N_i, E) and frame counts (N_i,) into a Batch.

    ``targets`` are optional lists of per-utterance arrays (log_f0, bap, f0_hz,
    mel, durations_ms, wave, excitation) padded along their first axis.
    """
    bsz = len(embeddings)
    n_phones = np.array([len(e) for e in embeddings])
    n_max = n_phones.max()
    frames = [np.asarray(f, dtype=np.int64) for f in frames]
    n_frames = np.array([f.sum() for f in frames])
    k_max = n_frames.max()
    emb = np.zeros((bsz, n_max, cfg.embedding_dim), dtype=dtype)
    phone_mask = np.zeros((bsz, n_max), dtype=dtype)
    fr = np.zeros((bsz, n_max), dtype=np.int64)
    frame_mask = np.zeros((bsz, k_max), dtype=dtype)
    owner = np.zeros((bsz, k_max), dtype=np.int64)
    pos = np.zeros((bsz, k_max, 2 * cfg.position_dim), dtype=dtype)
    for b in range(bsz):
        n, k = n_phones[b], n_frames[b]
        emb[b, :n] = embeddings[b]
        phone_mask[b, :n] = 1
        fr[b, :n] = frames[b]
        frame_mask[b, :k] = 1
        own, _, _ = frame_positions(frames[b])
        owner[b, :k] = b * n_max + own
        owner[b, k:] = b * n_max
        pos[b, :k] = position_encoding(frames[b], cfg.position_dim, cfg.position_clamp)
    batch = Batch(emb, n_phones, phone_mask, fr, n_frames, frame_mask, owner, pos)
    for name, seqs in targets.items():
        if seqs is None:
            continue
        seqs = [np.asarray(s) for s in seqs]
        length = max(len(s) for s in seqs)
        fill = 1.0 if name == "mel" else 0.0
        out = np.full((bsz, length) + seqs[0].shape[1:], fill, dtype=np.float64)
        for b, s in enumerate(seqs):
            out[b, :len(s)] = s
        setattr(batch, name, out)
    return batch


class TTSModel(Module):
    """All trainable parts; the phoneme embeddings themselves are fixed and live in the inventory."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = TextEncoder(cfg, rng, dtype)
        self.duration = DurationPredictor(cfg, rng, dtype)
        self.f0_estimator = F0Estimator(cfg, rng, dtype)
        self.decoder = AcousticDecoder(cfg, rng, dtype)
        self.vocoder = Vocoder(rng, cfg.mel_bins, cfg.vocoder_channels, cfg.vocoder_layers,
                               cfg.vocoder_kernel, cfg.hop, dtype)
        self.f0_encoder = F0Encoder(cfg.f0_encoding_dim, cfg.f0_table_max)
        self.dtype = dtype

    # --- stages
    def encode(self, batch: Batch) -> Tensor:
        mask = batch.phone_mask[..., None]
        return self.encoder(Tensor(batch.embeddings.astype(self.dtype)), batch.n_phones, mask)

    def predict_durations(self, encoded: Tensor) -> Tensor:
        return self.duration(encoded)

    def upsample(self, encoded: Tensor, batch: Batch) -> Tensor:
        bsz, n, c = encoded.shape
        flat = ops.reshape(encoded, (bsz * n, c))
        k = batch.frame_owner.shape[1]
        rep = ops.reshape(ops.take(flat, batch.frame_owner.ravel(), axis=0), (bsz, k, c))
        rep = ops.mul(rep, batch.frame_mask[..., None])
        return ops.concat([rep, Tensor(batch.positions.astype(self.dtype))], axis=-1)

    def predict_f0_bap(self, upsampled: Tensor, batch: Batch):
        return self.f0_estimator(upsampled, batch.frame_mask[..., None])

    def f0_conditioning(self, f0_hz: np.ndarray, batch: Batch) -> np.ndarray:
        f0 = np.where(batch.frame_mask > 0, f0_hz, UNVOICED_F0)
        return self.f0_encoder(f0) * batch.frame_mask[..., None]

    def decode_mel(self, bottleneck: Tensor, f0_encoding: np.ndarray, batch: Batch) -> Tensor:
        return self.decoder(bottleneck, f0_encoding, batch.n_frames, batch.frame_mask[..., None])
