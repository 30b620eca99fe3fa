"""Estimator wrapper and JSON checkpoints for the split transformer."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..channel import ChannelParams
from ..exceptions import InvalidParameterError
from ..neuralnet import CHECKPOINT_FORMAT, tensors_from_json, tensors_to_json
from .config import LmConfig
from .metrics import PerplexityResult, perplexity
from .tokenizer import CharTokenizer, split_sequences
from .train import train_lm
from .transformer import LmParams, lm_forward_edge, lm_forward_full, lm_forward_ue


def save_lm(path, params: LmParams, tokenizer: CharTokenizer, header: dict | None = None) -> None:
    """Tensor checkpoint with ``config`` and ``vocab`` header objects."""
    doc = {"format": CHECKPOINT_FORMAT, "config": params.config.to_dict(), "vocab": tokenizer.to_dict()}
    if header:
        doc.update(header)
    doc["tensors"] = tensors_to_json(params.named_tensors())
    Path(path).write_text(json.dumps(doc, ensure_ascii=False))


def load_lm(path):
    """Returns ``(params, tokenizer, doc)``."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT or "config" not in doc:
        raise InvalidParameterError(f"{path} is not a language-model checkpoint")
    config = LmConfig.from_dict(doc["config"])
    params = LmParams.from_named_tensors(config, tensors_from_json(doc.pop("tensors")))
    return params, CharTokenizer.from_dict(doc["vocab"]), doc


class SplitTransformerLM(BaseEstimator):
    """Character-level transformer that can be evaluated at any splitting point.

    Parameters
    ----------
    n_layers, context, width, n_heads, ff_width : int
        Architecture; ``vocab_size`` is taken from the training text.
    steps, lr, batch_size : training schedule for :func:`train_lm`.
    random_state : int
        Root seed for initialization and batch sampling.
    """

    def __init__(self, n_layers=8, context=64, width=64, n_heads=4, ff_width=256,
                 steps=2000, lr=3e-3, batch_size=16, random_state=0):
        self.n_layers = n_layers
        self.context = context
        self.width = width
        self.n_heads = n_heads
        self.ff_width = ff_width
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y=None):
        """``X`` is the training text."""
        if not isinstance(X, str):
            raise InvalidParameterError("fit expects the training corpus as a string")
        self.tokenizer_ = CharTokenizer().fit(X)
        self.config_ = LmConfig(self.n_layers, self.context, self.width, self.n_heads,
                                self.ff_width, self.tokenizer_.vocab_size)
        self.loss_curve_ = []
        self.params_ = train_lm(X, self.config_, self.steps, self.lr, self.random_state,
                                self.batch_size, self.tokenizer_, self.loss_curve_)
        return self

    def sequences(self, text: str) -> np.ndarray:
        """Non-overlapping ``context + 1`` token windows of ``text``."""
        check_is_fitted(self, "params_")
        return split_sequences(self.tokenizer_.encode(text), self.config_.context + 1)

    def forward_ue(self, tokens, p: int) -> np.ndarray:
        check_is_fitted(self, "params_")
        return lm_forward_ue(self.params_, tokens, p)

    def forward_edge(self, intermediate, p: int) -> np.ndarray:
        check_is_fitted(self, "params_")
        return lm_forward_edge(self.params_, intermediate, p)

    def predict_logits(self, tokens) -> np.ndarray:
        check_is_fitted(self, "params_")
        return lm_forward_full(self.params_, tokens)

    def perplexity(self, text_or_seqs, p: int | None = None, channel: ChannelParams | None = None,
                   rng=0, n_trials: int = 4) -> PerplexityResult:
        check_is_fitted(self, "params_")
        seqs = self.sequences(text_or_seqs) if isinstance(text_or_seqs, str) else text_or_seqs
        return perplexity(self.params_, seqs, p, channel, rng, n_trials)

    def score(self, X, y=None) -> float:
        """Negative clean perplexity on text ``X`` (higher is better)."""
        return -self.perplexity(X).ppl

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        save_lm(path, self.params_, self.tokenizer_, {"estimator": self.get_params()})

    @classmethod
    def load(cls, path) -> "SplitTransformerLM":
        params, tokenizer, doc = load_lm(path)
        cfg = params.config
        kw = dict(doc.get("estimator", {}))
        kw.update(n_layers=cfg.n_layers, context=cfg.context, width=cfg.width,
                  n_heads=cfg.n_heads, ff_width=cfg.ff_width)
        est = cls(**kw)
        est.params_, est.tokenizer_, est.config_ = params, tokenizer, cfg
        est.loss_curve_ = []
        return est
