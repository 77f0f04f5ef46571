"""Combining per-layer GRU outputs into the decoder output.

Strategies:

* ``ns``  - a single GRU layer, its output used directly.
* ``ss``  - simple stacking, the last layer's output.
* ``cs``  - concatenation of every layer's output.
* ``gws`` - convex combination with one scalar weight per layer.
* ``lws`` - convex combination with one weight per layer and feature.

The simplex constraints on the weights are enforced by a softmax over the
layer axis of unconstrained logits, so optimisers can update the logits
freely.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

__all__ = [
    "STRATEGIES",
    "MAX_DEPTH",
    "StackConfig",
    "StackWeights",
    "normalize_weights",
    "aggregate_ss",
    "aggregate_cs",
    "aggregate_gws",
    "aggregate_lws",
    "stack_forward",
]

STRATEGIES = ("ns", "ss", "cs", "gws", "lws")
MAX_DEPTH = 5


@dataclass(frozen=True)
class StackConfig:
    strategy: str = "lws"
    depth: int = 3

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown stacking strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not 1 <= self.depth <= MAX_DEPTH:
            raise ValueError(f"stack depth must be in [1, {MAX_DEPTH}], got {self.depth}")
        if self.strategy == "ns" and self.depth != 1:
            raise ValueError("strategy 'ns' requires depth 1")

    def output_width(self, hidden: int) -> int:
        return self.depth * hidden if self.strategy == "cs" else hidden

    @property
    def label(self) -> str:
        return self.strategy.upper()


@dataclass
class StackWeights:
    gws_logits: Tensor
    lws_logits: Tensor

    @classmethod
    def create(cls, depth: int, hidden: int) -> "StackWeights":
        return cls(
            Tensor(np.zeros((1, depth)), requires_grad=True, name="stack.gws_logits"),
            Tensor(np.zeros((depth, hidden)), requires_grad=True, name="stack.lws_logits"),
        )

    @property
    def depth(self) -> int:
        return self.gws_logits.shape[1]

    def parameters(self, strategy: str) -> list[Tensor]:
        if strategy == "gws":
            return [self.gws_logits]
        if strategy == "lws":
            return [self.lws_logits]
        return []


def normalize_weights(weights: StackWeights) -> tuple[Tensor, Tensor]:
    """Map logits onto the simplex: ``alpha`` over layers, ``W`` per column."""
    return ad.softmax(weights.gws_logits, axis=1), ad.softmax(weights.lws_logits, axis=0)


def _require(D: Sequence[Tensor]) -> None:
    if not D:
        raise ValueError("no layer outputs to aggregate")


def aggregate_ss(D: Sequence[Tensor]) -> Tensor:
    _require(D)
    return D[-1]


def aggregate_cs(D: Sequence[Tensor]) -> Tensor:
    _require(D)
    if len(D) == 1:
        return D[0]
    return ad.concat(D, axis=1)


def aggregate_gws(D: Sequence[Tensor], alpha: Tensor) -> Tensor:
    _require(D)
    if alpha.shape != (1, len(D)):
        raise DimensionError(f"gws: alpha shape {alpha.shape} for {len(D)} layers")
    return ad.weighted_sum(D, alpha)


def aggregate_lws(D: Sequence[Tensor], W: Tensor) -> Tensor:
    _require(D)
    if W.shape != (len(D), D[0].shape[1]):
        raise DimensionError(f"lws: weight shape {W.shape} for {len(D)} layers of width {D[0].shape[1]}")
    out = ad.mul_row(D[0], ad.row(W, 0))
    for i in range(1, len(D)):
        out = out + ad.mul_row(D[i], ad.row(W, i))
    return out


def stack_forward(cfg: StackConfig, weights: StackWeights | None, per_layer_last: Sequence[Tensor],
                  normalized: tuple[Tensor, Tensor] | None = None) -> Tensor:
    """Aggregate the current-timestep outputs of every layer.

    ``normalized`` may carry a precomputed :func:`normalize_weights` result so
    a sequence forward normalises once rather than per step.
    """
    if len(per_layer_last) != cfg.depth:
        raise ValueError(f"expected {cfg.depth} layer outputs, got {len(per_layer_last)}")
    if cfg.strategy in ("ns", "ss"):
        return aggregate_ss(per_layer_last)
    if cfg.strategy == "cs":
        return aggregate_cs(per_layer_last)
    if weights is None:
        raise ValueError(f"strategy {cfg.strategy!r} needs stack weights")
    alpha, W = normalized if normalized is not None else normalize_weights(weights)
    if cfg.strategy == "gws":
        return aggregate_gws(per_layer_last, alpha)
    return aggregate_lws(per_layer_last, W)
