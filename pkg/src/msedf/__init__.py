"""Dual-encoder fusion and stacked-GRU captioning on a small numpy autodiff engine."""

from .autodiff import Tape, Tensor, backward, finite_difference_check
from .data import SyntheticSpec, Vocabulary, generate_synthetic, load_dataset, tokenize
from .inference import DecodeConfig, beam_search, caption_image, comparison_rerank, greedy_decode
from .metrics import MetricReport, corpus_evaluate
from .model import ModelConfig, ModelParams, forward_sequence, forward_step, init_params
from .stacking import StackConfig
from .training import TrainConfig, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "backward", "finite_difference_check",
    "SyntheticSpec", "Vocabulary", "generate_synthetic", "load_dataset", "tokenize",
    "DecodeConfig", "beam_search", "caption_image", "comparison_rerank", "greedy_decode",
    "MetricReport", "corpus_evaluate",
    "ModelConfig", "ModelParams", "forward_sequence", "forward_step", "init_params",
    "StackConfig",
    "TrainConfig", "fit", "load_checkpoint", "save_checkpoint",
]
