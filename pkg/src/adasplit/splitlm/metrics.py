"""Perplexity of the split model, optionally through an impaired channel."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..channel import ChannelParams, apply_channel
from ..exceptions import InvalidParameterError
from ..mathcore import RngStream, as_stream
from ..neuralnet import log_softmax
from .transformer import (
    LmParams,
    _check_split,
    as_token_batch,
    hidden_states,
    lm_forward_edge,
    lm_forward_full,
    lm_forward_ue,
    output_head,
    run_layers,
)

LOGPROB_FLOOR = 1e-12
MAX_NLL = -math.log(LOGPROB_FLOOR)


@dataclass(frozen=True)
class PerplexityResult:
    """``ppl`` with a delta-method standard error over sequence-trial means."""

    ppl: float
    stderr: float
    mean_nll: float
    n_tokens: int
    clamped: bool

    def __float__(self):
        return self.ppl


def token_nll(logits: np.ndarray, targets: np.ndarray):
    """Per-token negative log-likelihood, clamped at ``-log(1e-12)``.

    Returns ``(nll, clamped)``; ``clamped`` is true if any value hit the floor
    or was not finite.
    """
    logp = log_softmax(logits)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    nll = -picked
    bad = ~np.isfinite(nll) | (nll > MAX_NLL)
    if bad.any():
        nll = np.where(bad, MAX_NLL, nll)
    return nll, bool(bad.any())


def summarize_nll(seq_means: np.ndarray, n_tokens: int, clamped: bool) -> PerplexityResult:
    """Collapse per-(trial, sequence) mean NLLs into a :class:`PerplexityResult`."""
    seq_means = np.asarray(seq_means, dtype=np.float64).ravel()
    mean_nll = float(seq_means.mean())
    ppl = math.exp(mean_nll)
    se = float(seq_means.std(ddof=1) / math.sqrt(seq_means.size)) if seq_means.size > 1 else 0.0
    return PerplexityResult(ppl, ppl * se, mean_nll, int(n_tokens), clamped)


def _as_corpus(params: LmParams, corpus):
    """Stack sequences into a batch; each row predicts its own next tokens."""
    if isinstance(corpus, np.ndarray) and corpus.ndim == 2:
        rows = corpus
    else:
        seqs = [np.asarray(s) for s in corpus]
        if not seqs:
            raise InvalidParameterError("corpus must contain at least one sequence")
        lengths = {len(s) for s in seqs}
        if len(lengths) != 1:
            raise InvalidParameterError("all sequences must share one length")
        rows = np.stack(seqs)
    if rows.shape[0] == 0:
        raise InvalidParameterError("corpus must contain at least one sequence")
    if rows.shape[1] < 2:
        raise InvalidParameterError("sequences need at least 2 tokens")
    inputs, _ = as_token_batch(rows[:, :-1], params.config)
    return inputs, np.asarray(rows[:, 1:])


def perplexity(params: LmParams, corpus, p: int | None = None, channel: ChannelParams | None = None,
               rng: RngStream | int = 0, n_trials: int = 4) -> PerplexityResult:
    """Exponentiated mean next-token NLL over every position of ``corpus``.

    ``corpus`` holds equal-length token sequences of up to ``context + 1``
    tokens: positions ``0..n-2`` are inputs, ``1..n-1`` targets. With a split
    point ``p`` the UE output passes through ``apply_channel`` once per trial;
    ``p=None`` evaluates the unsplit model.
    """
    if n_trials < 1:
        raise InvalidParameterError(f"n_trials must be >= 1, got {n_trials}")
    inputs, targets = _as_corpus(params, corpus)
    if p is None:
        nll, clamped = token_nll(lm_forward_full(params, inputs), targets)
        return summarize_nll(nll.mean(axis=1), nll.size, clamped)

    y = lm_forward_ue(params, inputs, p)
    channel = channel or ChannelParams.ideal()
    rng = as_stream(rng)
    means, clamped = [], False
    for trial in range(n_trials):
        y_hat, _ = apply_channel(y, channel, rng.child("trial", trial))
        nll, c = token_nll(lm_forward_edge(params, y_hat, p), targets)
        clamped |= c
        means.append(nll.mean(axis=1))
    return summarize_nll(np.stack(means), targets.size * n_trials, clamped)


class SplitEvaluator:
    """Perplexity oracle over a fixed pool of sequences.

    The UE-side activations of the pool are computed once for every split
    point, so each query only pays for the channel draw and the edge layers.
    ``dtype`` sets the precision of the edge layers; float32 halves their
    cost and is far below the channel-induced spread of the result.
    """

    def __init__(self, params: LmParams, pool, dtype=np.float64):
        self.params = params
        self.dtype = np.dtype(dtype)
        inputs, self.targets = _as_corpus(params, pool)
        self._states = hidden_states(params, inputs)
        self.n_sequences = inputs.shape[0]
        if self.dtype == np.float64:
            self._edge_params = params
        else:
            self._edge_params = LmParams(
                params.config, {k: v.astype(self.dtype) for k, v in params.top.items()},
                [{k: v.astype(self.dtype) for k, v in layer.items()} for layer in params.layers])

    def edge_logits(self, y_hat: np.ndarray, p: int) -> np.ndarray:
        if self.dtype == np.float64:
            return lm_forward_edge(self.params, y_hat, p)
        _check_split(self.params, p)
        x = run_layers(self._edge_params, y_hat.astype(self.dtype), p, self.params.config.n_layers)
        return output_head(self._edge_params, x).astype(np.float64)

    def intermediate(self, p: int, rows=None) -> np.ndarray:
        y = self._states[p]
        return y if rows is None else y[rows]

    def seq_nll(self, p: int, channel: ChannelParams, rng: RngStream, rows=None, n_trials: int = 1):
        """Mean NLL per (trial, sequence), plus the clamp flag."""
        y = self.intermediate(p, rows)
        targets = self.targets if rows is None else self.targets[rows]
        out, clamped = [], False
        for trial in range(n_trials):
            y_hat, _ = apply_channel(y, channel, rng.child("trial", trial))
            nll, c = token_nll(self.edge_logits(y_hat, p), targets)
            clamped |= c
            out.append(nll.mean(axis=1))
        return np.stack(out), clamped

    def perplexity(self, p: int, channel: ChannelParams, rng: RngStream, rows=None,
                   n_trials: int = 1) -> PerplexityResult:
        means, clamped = self.seq_nll(p, channel, rng, rows, n_trials)
        return summarize_nll(means, means.size * self.targets.shape[1], clamped)
