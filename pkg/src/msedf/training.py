"""Teacher-forced cross entropy, Adam, the epoch loop with ROUGE-L early
stopping, and checkpoint files.

Checkpoint layout ("MSCK", little-endian)::

    magic   b"MSCK"
    u8      version (1)
    u32     header byte length, then UTF-8 JSON header
            {"model": ModelConfig, "vocab": {...}, "train": TrainConfig | null,
             "tensors": [[name, rows, cols], ...], "adam_step": int | null}
    per tensor, in header order: u64 byte length, rows*cols f64 values
    (parameters first, then Adam first moments, then second moments when
    the optimizer was saved)
    u32     CRC32 of every preceding byte
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import DatasetSplit, Vocabulary
from .layers import DropoutSpec
from .metrics import corpus_rouge_l
from .model import ModelConfig, ModelParams, encode_image, forward_sequence, init_params

__all__ = [
    "TrainConfig",
    "AdamState",
    "EarlyStopState",
    "CheckpointError",
    "Checkpoint",
    "cross_entropy_loss",
    "adam_step",
    "training_pairs",
    "batch_loss",
    "train_epoch",
    "dataset_loss",
    "greedy_rouge_hook",
    "fit",
    "save_checkpoint",
    "load_checkpoint",
]

CKPT_MAGIC = b"MSCK"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    patience: int = 8
    max_epochs: int = 100
    seed: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")


# --------------------------------------------------------------------------
# objective
# --------------------------------------------------------------------------


def cross_entropy_loss(probs_seq: Sequence[Tensor], target_ids, pad_id: int = 0) -> Tensor:
    """Mean negative log-likelihood over non-pad targets.

    ``target_ids`` is a length-T sequence for a single row, or a (batch, T)
    array; with a batch the loss is the mean of the per-row means.
    """
    targets = np.asarray(target_ids, dtype=np.int64)
    if targets.ndim == 1:
        targets = targets[None, :]
    if targets.shape[1] != len(probs_seq):
        raise ValueError(f"{len(probs_seq)} probability steps vs {targets.shape[1]} targets")
    live = targets != pad_id
    per_row = live.sum(axis=1)
    if np.any(per_row == 0):
        raise ValueError("a target row is all padding; its mean loss is undefined")
    weights = live / (per_row[:, None] * targets.shape[0])
    total = None
    for t, probs in enumerate(probs_seq):
        if not live[:, t].any():
            continue
        term = ad.nll(probs, targets[:, t], weights[:, t])
        total = term if total is None else total + term
    return total


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], cfg: TrainConfig | None = None) -> "AdamState":
        cfg = cfg or TrainConfig()
        return cls(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, 0,
                   [np.zeros_like(p.values) for p in params], [np.zeros_like(p.values) for p in params])


def adam_step(state: AdamState, params: Sequence[Tensor], names: Sequence[str] | None = None) -> None:
    """Bias-corrected Adam update using each parameter's accumulated ``grad``."""
    if len(params) != len(state.m):
        raise ValueError(f"optimizer tracks {len(state.m)} tensors, got {len(params)}")
    for i, p in enumerate(params):
        # a single NaN/inf anywhere makes the sum non-finite
        if not math.isfinite(float(np.sum(p.grad))):
            label = names[i] if names else p.name or f"param[{i}]"
            raise FloatingPointError(f"non-finite gradient in {label}")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    step = state.lr / c1
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        buf = np.multiply(g, 1.0 - state.beta1)
        m *= state.beta1
        m += buf
        np.square(g, out=buf)
        buf *= 1.0 - state.beta2
        v *= state.beta2
        v += buf
        # p -= lr * (m / c1) / (sqrt(v / c2) + eps)
        np.multiply(v, 1.0 / c2, out=buf)
        np.sqrt(buf, out=buf)
        buf += state.eps
        np.divide(m, buf, out=buf)
        buf *= step
        p.values -= buf


# --------------------------------------------------------------------------
# epochs
# --------------------------------------------------------------------------


def training_pairs(split: DatasetSplit) -> np.ndarray:
    """(image index, caption index) for every caption of every image."""
    n, k = split.encoded.shape[:2]
    return np.array([(i, j) for i in range(n) for j in range(k)], dtype=np.int64).reshape(-1, 2)


def batch_loss(params: ModelParams, split: DatasetSplit, pairs: np.ndarray,
               dropout: DropoutSpec | None) -> Tensor:
    img, cap = pairs[:, 0], pairs[:, 1]
    seqs = split.encoded[img, cap]
    image = encode_image(params, split.features_a[img], split.features_b[img], dropout)
    mode = "train" if dropout is not None and dropout.active else "eval"
    probs = forward_sequence(params, image, seqs[:, :-1], mode=mode, dropout=dropout)
    return cross_entropy_loss(probs, seqs[:, 1:], Vocabulary.pad_id)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch]))


def train_epoch(params: ModelParams, optimizer: AdamState, data: DatasetSplit, cfg: TrainConfig,
                epoch: int = 0) -> float:
    """One shuffled pass of mini-batch Adam; returns the mean batch loss."""
    pairs = training_pairs(data)
    if len(pairs) == 0:
        raise ValueError("empty training split")
    rng = _epoch_rng(cfg.seed, epoch)
    order = rng.permutation(len(pairs))
    dropout = DropoutSpec(params.config.dropout_rate, "train", int(rng.integers(2**63)))
    named = params.named_parameters()
    tensors = [t for _, t in named]
    names = [n for n, _ in named]
    losses = []
    for b, start in enumerate(range(0, len(order), cfg.batch_size)):
        idx = pairs[order[start : start + cfg.batch_size]]
        ad.zero_grads(tensors)
        with Tape() as tape:
            loss = batch_loss(params, data, idx, dropout)
        value = loss.item()
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss in batch {b} of epoch {epoch}")
        ad.backward(tape, loss)
        adam_step(optimizer, tensors, names)
        losses.append(value)
    ad.zero_grads(tensors)
    return float(np.mean(losses))


def dataset_loss(params: ModelParams, data: DatasetSplit) -> float:
    """Eval-mode cross entropy over every caption of ``data`` (mean of per-caption means)."""
    return batch_loss(params, data, training_pairs(data), None).item()


# --------------------------------------------------------------------------
# early stopping
# --------------------------------------------------------------------------


@dataclass
class EarlyStopState:
    patience: int
    best_rouge_l: float = -math.inf
    best_epoch: int = 0
    epochs_since_improve: int = 0
    best_checkpoint: dict | None = None

    def update(self, score: float, epoch: int, params: ModelParams) -> bool:
        """Record an epoch's validation score; returns True when training should stop."""
        if score > self.best_rouge_l:
            self.best_rouge_l = score
            self.best_epoch = epoch
            self.epochs_since_improve = 0
            self.best_checkpoint = params.state()
        else:
            self.epochs_since_improve += 1
        return self.epochs_since_improve >= self.patience


MetricsHook = Callable[[ModelParams, int], float]


def greedy_rouge_hook(val: DatasetSplit, vocab: Vocabulary, max_len: int) -> MetricsHook:
    """Validation hook: corpus ROUGE-L of greedy captions."""
    from .inference import DecodeConfig, decode_split

    dcfg = DecodeConfig(beam_width=1, max_len=max_len, rerank=False)

    def hook(params: ModelParams, epoch: int) -> float:
        caps = decode_split(params, val, dcfg, vocab, greedy=True)
        return corpus_rouge_l(caps, val.references)

    return hook


def fit(params: ModelParams, train: DatasetSplit, val: DatasetSplit, cfg: TrainConfig,
        metrics_hook: MetricsHook | None = None, vocab: Vocabulary | None = None,
        optimizer: AdamState | None = None, log: Callable[[str], None] | None = None):
    """Train with early stopping on validation ROUGE-L.

    Returns ``(best_params, history)``: a copy of the parameters from the best
    epoch and one ``{"epoch", "loss", "val_rouge_l"}`` entry per completed epoch.
    Epochs are numbered from 1.
    """
    if len(val) == 0:
        raise ValueError("fit needs a non-empty validation split")
    if metrics_hook is None:
        if vocab is None:
            raise ValueError("the default metrics hook needs the vocabulary")
        metrics_hook = greedy_rouge_hook(val, vocab, train.encoded.shape[2])
    if optimizer is None:
        optimizer = AdamState.for_params(params.parameters(), cfg)
    stopper = EarlyStopState(cfg.patience)
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        loss = train_epoch(params, optimizer, train, cfg, epoch)
        score = float(metrics_hook(params, epoch))
        history.append({"epoch": epoch, "loss": loss, "val_rouge_l": score})
        if log:
            log(f"epoch {epoch}: loss {loss:.4f} val ROUGE-L {score:.4f}")
        if stopper.update(score, epoch, params):
            break
    best = params.copy()
    best.load_state(stopper.best_checkpoint)
    return best, history


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    vocab: Vocabulary
    train_config: TrainConfig | None
    optimizer: AdamState | None


def encode_checkpoint(params: ModelParams, optimizer: AdamState | None, vocab: Vocabulary,
                      cfg: TrainConfig | None) -> bytes:
    named = params.named_parameters()
    blobs = [t.values for _, t in named]
    if optimizer is not None:
        if len(optimizer.m) != len(named):
            raise CheckpointError("optimizer state does not match the parameter set")
        blobs += list(optimizer.m) + list(optimizer.v)
    header = {
        "model": params.config.to_dict(),
        "vocab": vocab.to_dict(),
        "train": asdict(cfg) if cfg is not None else None,
        "tensors": [[n, t.shape[0], t.shape[1]] for n, t in named],
        "adam_step": optimizer.t if optimizer is not None else None,
    }
    if optimizer is not None:
        header["adam"] = {"lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
                          "eps": optimizer.eps}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<BI", CKPT_VERSION, len(raw)), raw]
    for arr in blobs:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        parts.append(struct.pack("<Q", len(data)))
        parts.append(data)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 13 or data[:4] != CKPT_MAGIC:
        raise CheckpointError("not an MSCK checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch; checkpoint is corrupted or truncated")
    version, hlen = struct.unpack("<BI", body[4:9])
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 9 + hlen
    header = json.loads(body[9:pos].decode("utf-8"))
    cfg = ModelConfig.from_dict(header["model"])
    params = init_params(cfg, 0)
    shapes = header["tensors"]
    n_blobs = len(shapes) * (3 if header["adam_step"] is not None else 1)
    arrays = []
    for k in range(n_blobs):
        name, rows, cols = shapes[k % len(shapes)]
        (size,) = struct.unpack("<Q", body[pos : pos + 8])
        pos += 8
        if size != rows * cols * 8 or pos + size > len(body):
            raise CheckpointError(f"tensor blob {k} ({name}) has a bad length")
        arrays.append(np.frombuffer(body[pos : pos + size], dtype="<f8").astype(np.float64).reshape(rows, cols))
        pos += size
    if pos != len(body):
        raise CheckpointError("trailing bytes before checksum")
    named = params.named_parameters()
    if [n for n, _ in named] != [s[0] for s in shapes]:
        raise CheckpointError("tensor list does not match the model configuration")
    params.load_state({n: arr for (n, _), arr in zip(named, arrays)})
    optimizer = None
    if header["adam_step"] is not None:
        k = len(shapes)
        hp = header["adam"]
        optimizer = AdamState(hp["lr"], hp["beta1"], hp["beta2"], hp["eps"], header["adam_step"],
                              arrays[k : 2 * k], arrays[2 * k : 3 * k])
    train_cfg = TrainConfig(**header["train"]) if header["train"] is not None else None
    return Checkpoint(params, Vocabulary.from_dict(header["vocab"]), train_cfg, optimizer)


def save_checkpoint(params: ModelParams, optimizer: AdamState | None, vocab: Vocabulary,
                    cfg: TrainConfig | None, path) -> None:
    Path(path).write_bytes(encode_checkpoint(params, optimizer, vocab, cfg))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
