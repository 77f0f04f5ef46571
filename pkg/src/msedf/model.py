"""The full captioning network.

Image path: two encoder vectors -> concat -> dropout -> L1 (GELU).
Word path: token -> embedding -> dropout -> GRU stack -> stack aggregation.
Head: concat(L1 output, aggregated output) -> dropout -> L2 (GELU) -> L3 -> softmax.

The image enters only through the head concatenation and is repeated at
every timestep; GRU states start at zero.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fusion import FusedFeature, fuse_vectors
from .layers import (
    DropoutSpec,
    EmbeddingLayer,
    GruCell,
    LinearLayer,
    apply_dropout,
    embedding_lookup,
    gru_layer_stacked,
    gru_step,
)
from .stacking import StackConfig, StackWeights, normalize_weights, stack_forward

__all__ = [
    "ModelConfig",
    "ModelParams",
    "init_params",
    "parameter_count",
    "encode_image",
    "initial_hidden",
    "forward_step",
    "forward_sequence",
]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    feature_dim_a: int
    feature_dim_b: int
    stack: StackConfig = field(default_factory=StackConfig)
    embed_dim: int = 256
    gru_hidden: int = 256
    l1_out: int = 256
    l2_out: int = 512
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ValueError(f"vocab_size must be >= 1, got {self.vocab_size}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def output_dim(self) -> int:
        # one extra slot for the reserved padding id 0
        return self.vocab_size + 1

    @property
    def l2_in(self) -> int:
        return self.l1_out + self.stack.output_width(self.gru_hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stack"] = {"strategy": self.stack.strategy, "depth": self.stack.depth}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["stack"] = StackConfig(**d["stack"])
        return cls(**d)


@dataclass
class ModelParams:
    config: ModelConfig
    embedding: EmbeddingLayer
    gru_stack: list[GruCell]
    stack_weights: StackWeights
    l1: LinearLayer
    l2: LinearLayer
    l3: LinearLayer

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Trainable tensors in the fixed order used by checkpoints."""
        out = [("embedding.table", self.embedding.table)]
        for i, cell in enumerate(self.gru_stack):
            out += [(f"gru{i}.{k}", getattr(cell, k)) for k in GruCell.FIELDS]
        strategy = self.config.stack.strategy
        if strategy == "gws":
            out.append(("stack.gws_logits", self.stack_weights.gws_logits))
        elif strategy == "lws":
            out.append(("stack.lws_logits", self.stack_weights.lws_logits))
        for name, layer in (("l1", self.l1), ("l2", self.l2), ("l3", self.l3)):
            out += [(f"{name}.W", layer.W), (f"{name}.b", layer.b)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def copy(self) -> "ModelParams":
        dup = copy.deepcopy(self)
        for t in dup.parameters():
            t.zero_grad()
        return dup

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            if state[name].shape != t.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {t.shape}")
            t.values[...] = state[name]


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    embedding = EmbeddingLayer.create(cfg.output_dim, cfg.embed_dim, rng)
    cells = []
    for i in range(cfg.stack.depth):
        in_dim = cfg.embed_dim if i == 0 else cfg.gru_hidden
        cells.append(GruCell.create(in_dim, cfg.gru_hidden, rng, name=f"gru{i}"))
    l1 = LinearLayer.create(cfg.feature_dim_a + cfg.feature_dim_b, cfg.l1_out, rng, "gelu", "l1")
    l2 = LinearLayer.create(cfg.l2_in, cfg.l2_out, rng, "gelu", "l2")
    l3 = LinearLayer.create(cfg.l2_out, cfg.output_dim, rng, "none", "l3")
    return ModelParams(cfg, embedding, cells, StackWeights.create(cfg.stack.depth, cfg.gru_hidden), l1, l2, l3)


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form number of trainable scalars."""
    V1, E, H, n = cfg.output_dim, cfg.embed_dim, cfg.gru_hidden, cfg.stack.depth
    total = V1 * E
    for i in range(n):
        in_dim = E if i == 0 else H
        total += 3 * in_dim * H + 3 * H * H + 3 * H
    if cfg.stack.strategy == "gws":
        total += n
    elif cfg.stack.strategy == "lws":
        total += n * H
    total += (cfg.feature_dim_a + cfg.feature_dim_b + 1) * cfg.l1_out
    total += (cfg.l2_in + 1) * cfg.l2_out
    total += (cfg.l2_out + 1) * V1
    return total


def encode_image(params: ModelParams, vec_a, vec_b, dropout: DropoutSpec | None = None) -> Tensor:
    return fuse_vectors(params.l1, vec_a, vec_b, dropout)


def initial_hidden(params: ModelParams, batch: int = 1) -> list[Tensor]:
    H = params.config.gru_hidden
    return [Tensor._wrap(np.zeros((batch, H))) for _ in params.gru_stack]


def _image_rows(fused) -> Tensor:
    return fused.projected if isinstance(fused, FusedFeature) else fused


def _head(params: ModelParams, image: Tensor, O: Tensor, dropout: DropoutSpec | None) -> Tensor:
    if image.shape[0] != O.shape[0]:
        raise ValueError(f"image rows {image.shape[0]} != token rows {O.shape[0]}")
    joined = apply_dropout(dropout, ad.concat([image, O], axis=1))
    return ad.softmax(params.l3(params.l2(joined)), axis=1)


def _check_tokens(params: ModelParams, ids: np.ndarray) -> None:
    V1 = params.config.output_dim
    if ids.size and (ids.min() < 0 or ids.max() >= V1):
        raise IndexError(f"token id out of range [0, {V1}): {ids.tolist()}")


def forward_step(params: ModelParams, fused, token_id, hidden: Sequence[Tensor],
                 dropout: DropoutSpec | None = None,
                 normalized: tuple[Tensor, Tensor] | None = None) -> tuple[Tensor, list[Tensor]]:
    """One decoding step.  Rows of ``fused``/``token_id``/``hidden`` are batch items."""
    cfg = params.config
    if len(hidden) != cfg.stack.depth:
        raise ValueError(f"expected {cfg.stack.depth} hidden states, got {len(hidden)}")
    ids = np.atleast_1d(np.asarray(token_id, dtype=np.int64))
    _check_tokens(params, ids)
    x = apply_dropout(dropout, embedding_lookup(params.embedding, ids))
    new_hidden = []
    for i, (cell, h) in enumerate(zip(params.gru_stack, hidden)):
        if i > 0:
            x = apply_dropout(dropout, x)
        x = gru_step(cell, x, h)
        new_hidden.append(x)
    if normalized is None and cfg.stack.strategy in ("gws", "lws"):
        normalized = normalize_weights(params.stack_weights)
    O = stack_forward(cfg.stack, params.stack_weights, new_hidden, normalized)
    return _head(params, _image_rows(fused), O, dropout), new_hidden


def forward_sequence(params: ModelParams, fused, token_ids, mode: str = "eval",
                     dropout: DropoutSpec | None = None) -> list[Tensor]:
    """Teacher-forced forward: step t reads ``token_ids[..., t]`` and predicts t + 1.

    ``token_ids`` is a 1-D sequence, or a (batch, T) array with one row per
    image row of ``fused``.  ``mode="train"`` without an explicit ``dropout``
    uses the configured rate with seed 0.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.shape[1] == 0:
        raise ValueError("forward_sequence: empty token sequence")
    _check_tokens(params, ids)
    if mode == "eval":
        dropout = None
    elif mode == "train":
        if dropout is None:
            dropout = DropoutSpec(params.config.dropout_rate, "train", 0)
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = params.config
    B, T = ids.shape
    # time-major stacking: rows t*B .. (t+1)*B - 1 belong to step t
    X = apply_dropout(dropout, embedding_lookup(params.embedding, ids.T.reshape(-1)))
    D = []
    for i, (cell, h) in enumerate(zip(params.gru_stack, initial_hidden(params, B))):
        if i > 0:
            X = apply_dropout(dropout, X)
        X, _ = gru_layer_stacked(cell, X, B, h)
        D.append(X)
    normalized = normalize_weights(params.stack_weights) if cfg.stack.strategy in ("gws", "lws") else None
    O = stack_forward(cfg.stack, params.stack_weights, D, normalized)
    image = _image_rows(fused)
    if image.shape[0] != B:
        raise ValueError(f"image rows {image.shape[0]} != token rows {B}")
    probs = _head(params, image if T == 1 else ad.concat([image] * T, axis=0), O, dropout)
    if T == 1:
        return [probs]
    return [ad.rows(probs, t * B, (t + 1) * B) for t in range(T)]
