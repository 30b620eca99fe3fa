"""Toy decoder-only transformer that runs in two halves around a splitting point."""

from .config import LmConfig
from .cost import c_ue, flops_per_layer
from .metrics import PerplexityResult, SplitEvaluator, perplexity
from .model import SplitTransformerLM, load_lm, save_lm
from .tokenizer import CharTokenizer, detokenize, split_sequences, tokenize
from .train import train_lm
from .transformer import (
    LmParams,
    hidden_states,
    init_lm_params,
    lm_forward_edge,
    lm_forward_full,
    lm_forward_ue,
    lm_loss_and_grads,
)

__all__ = [
    "CharTokenizer",
    "LmConfig",
    "LmParams",
    "PerplexityResult",
    "SplitEvaluator",
    "SplitTransformerLM",
    "c_ue",
    "detokenize",
    "flops_per_layer",
    "hidden_states",
    "init_lm_params",
    "lm_forward_edge",
    "lm_forward_full",
    "lm_forward_ue",
    "lm_loss_and_grads",
    "load_lm",
    "perplexity",
    "save_lm",
    "split_sequences",
    "tokenize",
    "train_lm",
]
