"""Pre-norm decoder-only transformer in numpy, executable in two halves.

The UE half runs the embeddings and layers ``1..p``; the edge half runs
layers ``p+1..L``, the final norm and the output projection. Both halves
use exactly the same code as the unsplit forward, so an ideal channel makes
the split computation bit-identical to the full one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..exceptions import InvalidParameterError, InvalidSplitError, ShapeError
from ..mathcore import RngStream
from ..neuralnet import dense_backward, dense_forward, gelu, gelu_backward, log_softmax, softmax
from .config import LmConfig

LN_EPS = 1e-5
LAYER_KEYS = ("ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_o", "b_o",
              "ln2_g", "ln2_b", "w_1", "b_1", "w_2", "b_2")
TOP_KEYS = ("tok_emb", "pos_emb", "lnf_g", "lnf_b", "w_out", "b_out")


@dataclass
class LmParams:
    config: LmConfig
    top: dict = field(default_factory=dict)
    layers: list = field(default_factory=list)

    def arrays(self) -> list:
        out = [self.top[k] for k in TOP_KEYS]
        for layer in self.layers:
            out.extend(layer[k] for k in LAYER_KEYS)
        return out

    def named_tensors(self) -> dict:
        out = {k: self.top[k] for k in TOP_KEYS}
        for i, layer in enumerate(self.layers):
            for k in LAYER_KEYS:
                out[f"layers.{i}.{k}"] = layer[k]
        return out

    @classmethod
    def from_named_tensors(cls, config: LmConfig, tensors: dict) -> "LmParams":
        top = {k: np.asarray(tensors[k], dtype=np.float64) for k in TOP_KEYS}
        layers = [{k: np.asarray(tensors[f"layers.{i}.{k}"], dtype=np.float64) for k in LAYER_KEYS}
                  for i in range(config.n_layers)]
        params = cls(config, top, layers)
        params.check_shapes()
        return params

    def zeros_like(self) -> "LmParams":
        return LmParams(self.config, {k: np.zeros_like(v) for k, v in self.top.items()},
                        [{k: np.zeros_like(v) for k, v in layer.items()} for layer in self.layers])

    def copy(self) -> "LmParams":
        return LmParams(self.config, {k: v.copy() for k, v in self.top.items()},
                        [{k: v.copy() for k, v in layer.items()} for layer in self.layers])

    def check_shapes(self) -> None:
        cfg = self.config
        d, f, v = cfg.width, cfg.ff_width, cfg.vocab_size
        expected_top = {"tok_emb": (v, d), "pos_emb": (cfg.context, d), "lnf_g": (d,),
                        "lnf_b": (d,), "w_out": (d, v), "b_out": (v,)}
        expected_layer = {"ln1_g": (d,), "ln1_b": (d,), "w_qkv": (d, 3 * d), "b_qkv": (3 * d,),
                          "w_o": (d, d), "b_o": (d,), "ln2_g": (d,), "ln2_b": (d,),
                          "w_1": (d, f), "b_1": (f,), "w_2": (f, d), "b_2": (d,)}
        for k, shape in expected_top.items():
            if self.top[k].shape != shape:
                raise ShapeError(f"{k}: expected {shape}, got {self.top[k].shape}")
        if len(self.layers) != cfg.n_layers:
            raise ShapeError(f"expected {cfg.n_layers} layers, got {len(self.layers)}")
        for i, layer in enumerate(self.layers):
            for k, shape in expected_layer.items():
                if layer[k].shape != shape:
                    raise ShapeError(f"layers.{i}.{k}: expected {shape}, got {layer[k].shape}")


def init_lm_params(config: LmConfig, rng: RngStream, std: float = 0.02) -> LmParams:
    """GPT-2 style init: N(0, std) weights, residual projections scaled by 1/sqrt(2L)."""
    g = rng.generator
    d, f, v = config.width, config.ff_width, config.vocab_size
    resid_std = std / math.sqrt(2 * config.n_layers)
    top = {
        "tok_emb": g.normal(0, std, (v, d)),
        "pos_emb": g.normal(0, std, (config.context, d)),
        "lnf_g": np.ones(d),
        "lnf_b": np.zeros(d),
        "w_out": g.normal(0, std, (d, v)),
        "b_out": np.zeros(v),
    }
    layers = []
    for _ in range(config.n_layers):
        layers.append({
            "ln1_g": np.ones(d), "ln1_b": np.zeros(d),
            "w_qkv": g.normal(0, std, (d, 3 * d)), "b_qkv": np.zeros(3 * d),
            "w_o": g.normal(0, resid_std, (d, d)), "b_o": np.zeros(d),
            "ln2_g": np.ones(d), "ln2_b": np.zeros(d),
            "w_1": g.normal(0, std, (d, f)), "b_1": np.zeros(f),
            "w_2": g.normal(0, resid_std, (f, d)), "b_2": np.zeros(d),
        })
    return LmParams(config, top, layers)


# -- building blocks -------------------------------------------------------------

def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def layer_norm_backward(cache, g, dy):
    xhat, inv = cache
    n = xhat.shape[-1]
    dg = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    db = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = (inv / n) * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                      - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True))
    return dx, dg, db


_MASKS: dict = {}


def _causal_mask(t: int) -> np.ndarray:
    mask = _MASKS.get(t)
    if mask is None:
        mask = np.triu(np.full((t, t), -np.inf), k=1)
        _MASKS[t] = mask
    return mask


def attention_forward(layer, a, n_heads):
    bsz, t, d = a.shape
    dh = d // n_heads
    qkv = dense_forward(a, layer["w_qkv"], layer["b_qkv"])
    qkv = qkv.reshape(bsz, t, 3, n_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scale = 1.0 / math.sqrt(dh)
    scores = q @ k.transpose(0, 1, 3, 2)
    scores *= scale
    scores += _causal_mask(t)
    probs = softmax(scores)
    o = (probs @ v).transpose(0, 2, 1, 3).reshape(bsz, t, d)
    out = dense_forward(o, layer["w_o"], layer["b_o"])
    return out, (a, q, k, v, probs, o)


def attention_backward(layer, cache, dout, n_heads, grads):
    a, q, k, v, probs, o = cache
    bsz, t, d = a.shape
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)
    do, grads["w_o"], grads["b_o"] = dense_backward(o, layer["w_o"], dout)
    do = do.reshape(bsz, t, n_heads, dh).transpose(0, 2, 1, 3)
    dprobs = do @ v.transpose(0, 1, 3, 2)
    dv = probs.transpose(0, 1, 3, 2) @ do
    dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True)) * scale
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(bsz, t, 3 * d)
    da, grads["w_qkv"], grads["b_qkv"] = dense_backward(a, layer["w_qkv"], dqkv)
    return da


def block_forward(layer, x, n_heads, keep_cache=False):
    """``x + attn(ln1(x))`` followed by ``h + ffn(ln2(h))``."""
    a, ln1_cache = layer_norm(x, layer["ln1_g"], layer["ln1_b"])
    attn_out, attn_cache = attention_forward(layer, a, n_heads)
    h = x + attn_out
    c, ln2_cache = layer_norm(h, layer["ln2_g"], layer["ln2_b"])
    f = dense_forward(c, layer["w_1"], layer["b_1"])
    gf, tanh_f = gelu(f, return_tanh=True)
    y = dense_forward(gf, layer["w_2"], layer["b_2"])
    y += h
    if not keep_cache:
        return y, None
    return y, (ln1_cache, attn_cache, ln2_cache, c, f, gf, tanh_f)


def block_backward(layer, cache, dy, n_heads):
    """Returns ``(dx, grads)`` for one block."""
    ln1_cache, attn_cache, ln2_cache, c, f, gf, tanh_f = cache
    grads = {}
    dgf, grads["w_2"], grads["b_2"] = dense_backward(gf, layer["w_2"], dy)
    df = gelu_backward(f, dgf, tanh_f)
    dc, grads["w_1"], grads["b_1"] = dense_backward(c, layer["w_1"], df)
    dh_ln, grads["ln2_g"], grads["ln2_b"] = layer_norm_backward(ln2_cache, layer["ln2_g"], dc)
    dh = dy + dh_ln
    da = attention_backward(layer, attn_cache, dh, n_heads, grads)
    dx_ln, grads["ln1_g"], grads["ln1_b"] = layer_norm_backward(ln1_cache, layer["ln1_g"], da)
    return dh + dx_ln, grads


# -- split forward -----------------------------------------------------------------

def as_token_batch(tokens, config: LmConfig) -> tuple[np.ndarray, bool]:
    """Coerce to a (batch, length) int array. Second value: input was 1-d."""
    arr = np.asarray(tokens)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeError(f"tokens must be 1-d or 2-d, got shape {arr.shape}")
    if arr.shape[1] == 0:
        raise InvalidParameterError("empty token sequence")
    if arr.shape[1] > config.context:
        raise InvalidParameterError(f"sequence length {arr.shape[1]} exceeds context {config.context}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise InvalidParameterError("token ids must be integers")
    if arr.min() < 0 or arr.max() >= config.vocab_size:
        raise InvalidParameterError(f"token ids must lie in [0, {config.vocab_size})")
    return arr, single


def _check_split(params: LmParams, p: int) -> None:
    L = params.config.n_layers
    if not isinstance(p, (int, np.integer)) or not 1 <= p <= L - 1:
        raise InvalidSplitError(f"splitting point must be an integer in [1, {L - 1}], got {p!r}")


def embed(params: LmParams, tokens: np.ndarray) -> np.ndarray:
    t = tokens.shape[1]
    return params.top["tok_emb"][tokens] + params.top["pos_emb"][:t]


def run_layers(params: LmParams, x: np.ndarray, start: int, stop: int) -> np.ndarray:
    """Apply layers with 0-based indices ``start..stop-1``."""
    heads = params.config.n_heads
    for layer in params.layers[start:stop]:
        x, _ = block_forward(layer, x, heads)
    return x


def output_head(params: LmParams, x: np.ndarray) -> np.ndarray:
    xf, _ = layer_norm(x, params.top["lnf_g"], params.top["lnf_b"])
    return dense_forward(xf, params.top["w_out"], params.top["b_out"])


def lm_forward_ue(params: LmParams, tokens, p: int) -> np.ndarray:
    """Embeddings plus layers ``1..p``. Output shape (len, width) or (batch, len, width)."""
    _check_split(params, p)
    batch, single = as_token_batch(tokens, params.config)
    y = run_layers(params, embed(params, batch), 0, p)
    return y[0] if single else y


def lm_forward_edge(params: LmParams, intermediate, p: int) -> np.ndarray:
    """Layers ``p+1..L``, final norm and output projection; returns logits."""
    _check_split(params, p)
    y = np.asarray(intermediate, dtype=np.float64)
    single = y.ndim == 2
    if single:
        y = y[None]
    if y.ndim != 3 or y.shape[-1] != params.config.width:
        raise ShapeError(f"intermediate tensor must have width {params.config.width}, got shape {np.shape(intermediate)}")
    logits = output_head(params, run_layers(params, y, p, params.config.n_layers))
    return logits[0] if single else logits


def lm_forward_full(params: LmParams, tokens) -> np.ndarray:
    """Unsplit forward pass: logits of shape (len, vocab) or (batch, len, vocab)."""
    batch, single = as_token_batch(tokens, params.config)
    x = run_layers(params, embed(params, batch), 0, params.config.n_layers)
    logits = output_head(params, x)
    return logits[0] if single else logits


def hidden_states(params: LmParams, tokens) -> list:
    """Residual stream after each layer: ``out[p]`` is what the UE sends at split ``p``.

    ``out[0]`` is the embedding output.
    """
    batch, _ = as_token_batch(tokens, params.config)
    x = embed(params, batch)
    states = [x]
    heads = params.config.n_heads
    for layer in params.layers:
        x, _ = block_forward(layer, x, heads)
        states.append(x)
    return states


# -- training objective ------------------------------------------------------------

def lm_loss_and_grads(params: LmParams, inputs: np.ndarray, targets: np.ndarray):
    """Mean next-token cross-entropy and its gradient (an ``LmParams`` of grads)."""
    cfg = params.config
    inputs, _ = as_token_batch(inputs, cfg)
    targets = np.asarray(targets).reshape(inputs.shape)
    x = embed(params, inputs)
    caches = []
    for layer in params.layers:
        x, cache = block_forward(layer, x, cfg.n_heads, keep_cache=True)
        caches.append(cache)
    xf, lnf_cache = layer_norm(x, params.top["lnf_g"], params.top["lnf_b"])
    logits = dense_forward(xf, params.top["w_out"], params.top["b_out"])
    logp = log_softmax(logits)
    n = targets.size
    bi, ti = np.indices(targets.shape)
    loss = -float(np.sum(logp[bi, ti, targets])) / n

    grads = params.zeros_like()
    dlogits = np.exp(logp)
    dlogits[bi, ti, targets] -= 1.0
    dlogits /= n
    dxf, grads.top["w_out"], grads.top["b_out"] = dense_backward(xf, params.top["w_out"], dlogits)
    dx, grads.top["lnf_g"], grads.top["lnf_b"] = layer_norm_backward(lnf_cache, params.top["lnf_g"], dxf)
    for i in reversed(range(cfg.n_layers)):
        dx, layer_grads = block_backward(params.layers[i], caches[i], dx, cfg.n_heads)
        grads.layers[i].update(layer_grads)
    t = inputs.shape[1]
    grads.top["pos_emb"][:t] = dx.sum(axis=0)
    np.add.at(grads.top["tok_emb"], inputs.reshape(-1), dx.reshape(-1, cfg.width))
    return loss, grads
