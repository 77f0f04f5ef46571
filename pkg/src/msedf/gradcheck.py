"""Finite-difference verification of the whole network on tiny dimensions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import finite_difference_check
from .model import ModelConfig, encode_image, forward_sequence, init_params
from .stacking import StackConfig
from .training import cross_entropy_loss

TOLERANCE = 1e-4


@dataclass(frozen=True)
class TinyDims:
    vocab_size: int = 11
    feature_dim_a: int = 4
    feature_dim_b: int = 4
    embed_dim: int = 8
    gru_hidden: int = 8
    l1_out: int = 8
    l2_out: int = 8
    seq_len: int = 4
    batch: int = 2


def grid_cells(depths=(2, 3)) -> list[StackConfig]:
    """NS once, then every weighted/unweighted strategy at each depth."""
    cells = [StackConfig("ns", 1)]
    for depth in depths:
        for strategy in ("ss", "cs", "gws", "lws"):
            cells.append(StackConfig(strategy, depth))
    return cells


def gradcheck_cell(stack: StackConfig, dims: TinyDims = TinyDims(), seed: int = 0, h: float = 1e-5) -> float:
    """Max relative error of the sequence loss gradient over every parameter."""
    cfg = ModelConfig(dims.vocab_size, dims.feature_dim_a, dims.feature_dim_b, stack,
                      dims.embed_dim, dims.gru_hidden, dims.l1_out, dims.l2_out, 0.0)
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    # move off the symmetric zero initialisation of biases and stack logits
    for name, t in params.named_parameters():
        if name.endswith(".b") or name.startswith("stack.") or name.split(".")[-1] in ("bz", "br", "bh"):
            t.values[...] = rng.normal(scale=0.5, size=t.shape)
    fa = rng.normal(size=(dims.batch, dims.feature_dim_a))
    fb = rng.normal(size=(dims.batch, dims.feature_dim_b))
    tokens = rng.integers(1, cfg.output_dim, size=(dims.batch, dims.seq_len + 1))
    tokens[0, -1] = 0  # one padded target exercises the mask

    def loss():
        image = encode_image(params, fa, fb)
        probs = forward_sequence(params, image, tokens[:, :-1], mode="eval")
        return cross_entropy_loss(probs, tokens[:, 1:], 0)

    return finite_difference_check(loss, dict(params.named_parameters()), h)


def gradcheck_grid(dims: TinyDims = TinyDims(), seed: int = 0, depths=(2, 3)) -> list[dict]:
    report = []
    for stack in grid_cells(depths):
        err = gradcheck_cell(stack, dims, seed)
        report.append({"strategy": stack.strategy, "depth": stack.depth, "max_rel_error": err,
                       "pass": bool(err < TOLERANCE)})
    return report
