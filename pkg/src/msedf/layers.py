"""Trainable building blocks: linear, embedding, GRU cell and dropout."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

__all__ = [
    "glorot_uniform",
    "LinearLayer",
    "EmbeddingLayer",
    "GruCell",
    "DropoutSpec",
    "linear_forward",
    "embedding_lookup",
    "gru_step",
    "gru_layer_stacked",
    "gru_sequence",
    "apply_dropout",
]


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, name: str | None = None) -> Tensor:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=(fan_in, fan_out)), requires_grad=True, name=name)


def _zeros(shape, name=None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


@dataclass
class LinearLayer:
    W: Tensor
    b: Tensor
    activation: str = "none"

    @classmethod
    def create(cls, in_dim: int, out_dim: int, rng: np.random.Generator, activation: str = "none",
               name: str = "linear") -> "LinearLayer":
        return cls(glorot_uniform(rng, in_dim, out_dim, f"{name}.W"), _zeros((1, out_dim), f"{name}.b"), activation)

    @property
    def in_dim(self) -> int:
        return self.W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)


def linear_forward(layer: LinearLayer, x: Tensor) -> Tensor:
    if x.shape[1] != layer.in_dim:
        raise DimensionError(f"linear: input width {x.shape[1]} != layer input {layer.in_dim}")
    return ad.activation(layer.activation, ad.add_row(ad.matmul(x, layer.W), layer.b))


@dataclass
class EmbeddingLayer:
    table: Tensor

    @classmethod
    def create(cls, rows: int, dim: int, rng: np.random.Generator) -> "EmbeddingLayer":
        return cls(glorot_uniform(rng, rows, dim, "embedding.table"))

    @property
    def rows(self) -> int:
        return self.table.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.table]


def embedding_lookup(layer: EmbeddingLayer, token_ids) -> Tensor:
    """One row per token id; a scalar id gives a 1 x dim tensor."""
    return ad.take_rows(layer.table, token_ids)


@dataclass
class GruCell:
    Wz: Tensor
    Wr: Tensor
    Wh: Tensor
    Uz: Tensor
    Ur: Tensor
    Uh: Tensor
    bz: Tensor
    br: Tensor
    bh: Tensor

    FIELDS = ("Wz", "Wr", "Wh", "Uz", "Ur", "Uh", "bz", "br", "bh")

    @classmethod
    def create(cls, in_dim: int, hidden: int, rng: np.random.Generator, name: str = "gru") -> "GruCell":
        w = {k: glorot_uniform(rng, in_dim, hidden, f"{name}.{k}") for k in ("Wz", "Wr", "Wh")}
        u = {k: glorot_uniform(rng, hidden, hidden, f"{name}.{k}") for k in ("Uz", "Ur", "Uh")}
        b = {k: _zeros((1, hidden), f"{name}.{k}") for k in ("bz", "br", "bh")}
        return cls(**w, **u, **b)

    @property
    def in_dim(self) -> int:
        return self.Wz.shape[0]

    @property
    def hidden(self) -> int:
        return self.Uz.shape[0]

    def parameters(self) -> list[Tensor]:
        return [getattr(self, k) for k in self.FIELDS]


def _gru_update(cell: GruCell, xz: Tensor, xr: Tensor, xh: Tensor, h_prev: Tensor) -> Tensor:
    # xz/xr/xh already hold the input projections plus biases
    z = ad.sigmoid(xz + ad.matmul(h_prev, cell.Uz))
    r = ad.sigmoid(xr + ad.matmul(h_prev, cell.Ur))
    cand = ad.tanh(xh + ad.matmul(r * h_prev, cell.Uh))
    return h_prev + z * (cand - h_prev)


def _input_projections(cell: GruCell, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    return (ad.add_row(ad.matmul(x, cell.Wz), cell.bz),
            ad.add_row(ad.matmul(x, cell.Wr), cell.br),
            ad.add_row(ad.matmul(x, cell.Wh), cell.bh))


def gru_step(cell: GruCell, x: Tensor, h_prev: Tensor) -> Tensor:
    """One GRU update.

    z = sigmoid(x Wz + h Uz + bz), r = sigmoid(x Wr + h Ur + br),
    h~ = tanh(x Wh + (r * h) Uh + bh), h' = (1 - z) * h + z * h~.
    The last line is evaluated as h + z * (h~ - h).
    """
    if x.shape[1] != cell.in_dim or h_prev.shape[1] != cell.hidden or x.shape[0] != h_prev.shape[0]:
        raise DimensionError(f"gru_step: x {x.shape}, h {h_prev.shape} for cell {cell.in_dim}->{cell.hidden}")
    return _gru_update(cell, *_input_projections(cell, x), h_prev)


@dataclass
class DropoutSpec:
    """Inverted dropout; ``mode="eval"`` is the identity."""

    rate: float = 0.5
    mode: str = "eval"
    rng_seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"dropout mode must be 'train' or 'eval', got {self.mode!r}")
        self._rng = np.random.default_rng(self.rng_seed)

    @property
    def active(self) -> bool:
        return self.mode == "train" and self.rate > 0.0


EVAL = DropoutSpec(0.0, "eval")


def apply_dropout(spec: DropoutSpec | None, x: Tensor) -> Tensor:
    if spec is None or not spec.active:
        return x
    keep = spec._rng.random(x.shape) >= spec.rate
    return ad.hadamard(x, Tensor._wrap(keep / (1.0 - spec.rate)))


def gru_layer_stacked(cell: GruCell, X: Tensor, batch: int, h0: Tensor) -> tuple[Tensor, list[Tensor]]:
    """Run one GRU layer over a time-major stacked sequence.

    ``X`` holds T blocks of ``batch`` rows (block t = timestep t).  Input
    projections for all timesteps are computed in one matmul per gate.
    Returns the hidden states stacked the same way, and as a per-step list.
    """
    if X.shape[1] != cell.in_dim or X.shape[0] % batch or h0.shape != (batch, cell.hidden):
        raise DimensionError(f"gru layer: input {X.shape}, h0 {h0.shape}, batch {batch}, "
                             f"cell {cell.in_dim}->{cell.hidden}")
    pz, pr, ph = _input_projections(cell, X)
    h = h0
    states = []
    for t in range(X.shape[0] // batch):
        lo, hi = t * batch, (t + 1) * batch
        h = _gru_update(cell, ad.rows(pz, lo, hi), ad.rows(pr, lo, hi), ad.rows(ph, lo, hi), h)
        states.append(h)
    return states[0] if len(states) == 1 else ad.concat(states, axis=0), states


def gru_sequence(cells: Sequence[GruCell], inputs: Sequence[Tensor], h0: Sequence[Tensor],
                 dropout: DropoutSpec | None = None) -> list[list[Tensor]]:
    """Run a GRU stack over a sequence; returns ``outputs[layer][t]``.

    Layer i > 0 reads layer i-1's outputs, passed through dropout when
    ``dropout`` is in train mode.  The returned outputs are undropped.
    """
    if not inputs:
        raise ValueError("gru_sequence: empty input sequence")
    if len(cells) != len(h0):
        raise ValueError(f"gru_sequence: {len(cells)} cells but {len(h0)} initial states")
    batch = inputs[0].shape[0]
    X = inputs[0] if len(inputs) == 1 else ad.concat(list(inputs), axis=0)
    outputs = []
    for i, (cell, h) in enumerate(zip(cells, h0)):
        if i > 0:
            X = apply_dropout(dropout, X)
        X, states = gru_layer_stacked(cell, X, batch, h)
        outputs.append(states)
    return outputs
