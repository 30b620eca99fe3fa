"""Character-level next-token training of the toy transformer."""

from __future__ import annotations

import math

import numpy as np

from ..exceptions import InvalidDatasetError, TrainingFailure
from ..mathcore import RngStream, as_stream
from ..neuralnet import AdamState, adam_step
from .config import LmConfig
from .tokenizer import CharTokenizer
from .transformer import LmParams, init_lm_params, lm_loss_and_grads

MIN_CORPUS_CHARS = 10_000


def train_lm(text: str, config: LmConfig, steps: int, lr: float = 3e-3, rng: RngStream | int = 0,
             batch_size: int = 16, tokenizer: CharTokenizer | None = None,
             losses: list | None = None, max_grad_norm: float = 1.0) -> LmParams:
    """Train on random ``context + 1`` windows of ``text`` with Adam.

    ``config.vocab_size`` must match the tokenizer (built from ``text`` when
    not given). Per-step training losses are appended to ``losses`` if a
    list is passed.

    Raises
    ------
    InvalidDatasetError
        If ``text`` is shorter than 10^4 characters.
    TrainingFailure
        If the loss becomes non-finite; ``step`` holds the offending index.
    """
    if len(text) < MIN_CORPUS_CHARS:
        raise InvalidDatasetError(f"corpus needs at least {MIN_CORPUS_CHARS} characters, got {len(text)}")
    tokenizer = tokenizer or CharTokenizer().fit(text)
    if tokenizer.vocab_size != config.vocab_size:
        raise InvalidDatasetError(
            f"config vocab_size {config.vocab_size} != tokenizer vocab size {tokenizer.vocab_size}")
    ids = tokenizer.encode(text)
    rng = as_stream(rng)
    params = init_lm_params(config, rng.child("init"))
    arrays = params.arrays()
    adam = AdamState.for_params(arrays, lr=lr, max_grad_norm=max_grad_norm)
    window = config.context + 1
    gen = rng.child("batches").generator
    for step in range(steps):
        starts = gen.integers(0, len(ids) - window + 1, size=batch_size)
        batch = ids[starts[:, None] + np.arange(window)]
        loss, grads = lm_loss_and_grads(params, batch[:, :-1], batch[:, 1:])
        if not math.isfinite(loss):
            raise TrainingFailure(f"non-finite training loss at step {step}", step=step)
        adam_step(arrays, grads.arrays(), adam)
        if losses is not None:
            losses.append(loss)
    return params
