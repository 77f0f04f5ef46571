"""Greedy decoding, beam search and comparison-based reranking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor
from .data import DatasetSplit, Vocabulary
from .fusion import FeatureStore, FusedFeature, fuse, fuse_vectors, nearest_neighbors
from .metrics import comparison_score
from .model import ModelParams, forward_step, initial_hidden

__all__ = [
    "DecodeConfig",
    "BeamHypothesis",
    "TrainPool",
    "model_stepper",
    "greedy_search",
    "beam_search_core",
    "greedy_decode",
    "beam_search",
    "comparison_rerank",
    "build_train_pool",
    "caption_image",
    "decode_split",
]

PAD_ID, START_ID, END_ID = Vocabulary.pad_id, Vocabulary.start_id, Vocabulary.end_id
# ids the decoder may never emit
BANNED = (PAD_ID, START_ID)

# step(prefixes, states) -> (log-prob rows, new per-row states)
StepFn = Callable[[list[list[int]], list], tuple[np.ndarray, list]]


@dataclass(frozen=True)
class DecodeConfig:
    beam_width: int = 5
    max_len: int = 20
    k_similar: int = 4
    rerank: bool = True

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError(f"beam_width must be >= 1, got {self.beam_width}")
        if self.rerank and self.k_similar < 1:
            raise ValueError("k_similar must be >= 1 when reranking")
        if self.max_len < 0:
            raise ValueError(f"max_len must be >= 0, got {self.max_len}")


@dataclass
class BeamHypothesis:
    token_ids: list[int]
    log_prob_sum: float = 0.0
    finished: bool = False
    state: object = field(default=None, repr=False, compare=False)


def model_stepper(params: ModelParams, fused) -> tuple[StepFn, object]:
    """Wrap the network as a step function over per-hypothesis GRU states."""
    image = fused.projected if isinstance(fused, FusedFeature) else fused
    init_state = [h.values for h in initial_hidden(params, 1)]

    def step(prefixes: list[list[int]], states: list) -> tuple[np.ndarray, list]:
        B = len(prefixes)
        last = [p[-1] if p else START_ID for p in prefixes]
        hidden = [Tensor._wrap(np.vstack([s[i] for s in states])) for i in range(len(init_state))]
        img = Tensor._wrap(np.repeat(image.values, B, axis=0))
        probs, new_hidden = forward_step(params, img, last, hidden)
        with np.errstate(divide="ignore"):
            logp = np.log(probs.values)
        new_states = [[h.values[b : b + 1] for h in new_hidden] for b in range(B)]
        return logp, new_states

    return step, init_state


def greedy_search(step: StepFn, init_state, max_len: int) -> list[int]:
    tokens: list[int] = []
    state = init_state
    for _ in range(max_len):
        logp, states = step([tokens], [state])
        row = logp[0].copy()
        row[list(BANNED)] = -np.inf
        tok = int(np.argmax(row))
        if tok == END_ID:
            break
        tokens.append(tok)
        state = states[0]
    return tokens


def _rank_key(h: BeamHypothesis):
    return (-h.log_prob_sum, h.token_ids)


def beam_search_core(step: StepFn, init_state, width: int, max_len: int) -> list[BeamHypothesis]:
    """Unnormalised beam search; finished hypotheses stay in the beam.

    Returned hypotheses are sorted by log-prob sum (desc), ties by token ids.
    ``token_ids`` exclude the start token and include a final end token.
    """
    beams = [BeamHypothesis([], 0.0, False, init_state)]
    for _ in range(max_len):
        alive = [b for b in beams if not b.finished]
        if not alive:
            break
        logp, states = step([b.token_ids for b in alive], [b.state for b in alive])
        candidates = [b for b in beams if b.finished]
        for r, b in enumerate(alive):
            row = logp[r].copy()
            row[list(BANNED)] = -np.inf
            tok_ids = np.arange(row.size)
            order = np.lexsort((tok_ids, -row))[:width]
            for tok in order:
                if row[tok] == -np.inf:
                    continue
                tok = int(tok)
                candidates.append(BeamHypothesis(b.token_ids + [tok], b.log_prob_sum + float(row[tok]),
                                                 tok == END_ID, states[r]))
        candidates.sort(key=_rank_key)
        beams = candidates[:width]
    beams.sort(key=_rank_key)
    return beams


def greedy_decode(params: ModelParams, fused, cfg: DecodeConfig) -> list[int]:
    step, state = model_stepper(params, fused)
    return greedy_search(step, state, cfg.max_len)


def _strip(ids: Sequence[int]) -> list[int]:
    return [i for i in ids if i not in (PAD_ID, START_ID, END_ID)]


def beam_search(params: ModelParams, fused, cfg: DecodeConfig) -> list[tuple[list[int], float]]:
    """(token ids without specials, log-prob sum), best first."""
    step, state = model_stepper(params, fused)
    return [(_strip(h.token_ids), h.log_prob_sum) for h in beam_search_core(step, state, cfg.beam_width, cfg.max_len)]


@dataclass
class TrainPool:
    """Fused training images with their tokenised reference captions."""

    features: list[FusedFeature]
    references: dict[str, list[list[str]]]


def build_train_pool(params: ModelParams, split: DatasetSplit) -> TrainPool:
    projected = fuse_vectors(params.l1, split.features_a, split.features_b)
    feats = [FusedFeature(image_id, Tensor._wrap(projected.values[i : i + 1]))
             for i, image_id in enumerate(split.image_ids)]
    return TrainPool(feats, dict(zip(split.image_ids, split.references)))


def comparison_rerank(hypotheses: Sequence[tuple[list[str], float]], query: FusedFeature,
                      train_pool: TrainPool, k: int = 4) -> list[str]:
    """Pick the hypothesis closest to the captions of the ``k`` most similar training images.

    Each hypothesis scores the mean, over all pooled reference captions, of
    its comparison score against that single caption; ties go to the higher
    log-prob sum.
    """
    if not hypotheses:
        raise ValueError("no hypotheses to rerank")
    neighbours = nearest_neighbors(query, train_pool.features, k)
    pooled = [ref for image_id in neighbours for ref in train_pool.references[image_id]]
    if not pooled:
        raise ValueError("neighbouring images carry no reference captions")
    best_key, best = None, None
    for tokens, logp in hypotheses:
        score = sum(comparison_score(tokens, [ref]) for ref in pooled) / len(pooled)
        key = (score, logp)
        if best_key is None or key > best_key:
            best_key, best = key, tokens
    return best


def _decode_tokens(params: ModelParams, fused: FusedFeature, cfg: DecodeConfig, vocab: Vocabulary,
                   pool: TrainPool | None) -> list[str]:
    if cfg.beam_width == 1 and not cfg.rerank:
        return vocab.decode(greedy_decode(params, fused, cfg))
    hyps = [(vocab.decode(ids), lp) for ids, lp in beam_search(params, fused, cfg)]
    if cfg.rerank:
        if pool is None:
            raise ValueError("reranking needs a training pool")
        return comparison_rerank(hyps, fused, pool, cfg.k_similar)
    return hyps[0][0]


def caption_image(params: ModelParams, stores: tuple[FeatureStore, FeatureStore], image_id: str,
                  cfg: DecodeConfig, vocab: Vocabulary, pool: TrainPool | None = None) -> str:
    a, b = stores
    if image_id not in a or image_id not in b:
        raise KeyError(f"unknown image id {image_id!r}")
    fused = fuse(a, b, params.l1, None, image_id)
    return " ".join(_decode_tokens(params, fused, cfg, vocab, pool))


def decode_split(params: ModelParams, split: DatasetSplit, cfg: DecodeConfig, vocab: Vocabulary,
                 pool: TrainPool | None = None, greedy: bool = False) -> list[list[str]]:
    """One tokenised caption per image of ``split``."""
    projected = fuse_vectors(params.l1, split.features_a, split.features_b)
    out = []
    for i, image_id in enumerate(split.image_ids):
        fused = FusedFeature(image_id, Tensor._wrap(projected.values[i : i + 1]))
        if greedy:
            out.append(vocab.decode(greedy_decode(params, fused, cfg)))
        else:
            out.append(_decode_tokens(params, fused, cfg, vocab, pool))
    return out
