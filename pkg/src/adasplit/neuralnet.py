"""Small dense networks with hand-written backpropagation and Adam.

The MLP here backs the PPO policy/value networks, the DQN baseline and the
reward surrogate. The activation and dense primitives are shared with the
transformer in :mod:`adasplit.splitlm.transformer`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .exceptions import InvalidParameterError, ShapeError
from .mathcore import RngStream

CHECKPOINT_FORMAT = "adasplit.tensors/1"

HIDDEN_ACTIVATIONS = ("relu", "tanh")
OUTPUT_ACTIVATIONS = ("identity", "softmax")


# -- primitives ---------------------------------------------------------------

def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = z - np.max(z, axis=axis, keepdims=True)
    np.exp(e, out=e)
    e /= np.sum(e, axis=axis, keepdims=True)
    return e


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def activation_forward(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "identity":
        return z
    if name == "softmax":
        return softmax(z)
    raise InvalidParameterError(f"unknown activation {name!r}")


def activation_backward(name: str, z: np.ndarray, a: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the pre-activation ``z`` given ``a = act(z)``."""
    if name == "relu":
        return grad * (z > 0)
    if name == "tanh":
        return grad * (1.0 - a * a)
    if name == "identity":
        return grad
    if name == "softmax":
        return a * (grad - np.sum(grad * a, axis=-1, keepdims=True))
    raise InvalidParameterError(f"unknown activation {name!r}")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray, return_tanh: bool = False):
    """tanh approximation of GELU. Optionally also returns the inner tanh."""
    t = x * x
    t *= x
    t *= 0.044715
    t += x
    t *= _GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= x
    out *= 0.5
    return (out, t) if return_tanh else out


def gelu_backward(x: np.ndarray, grad: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    if t is None:
        t = np.tanh(_GELU_C * (x + 0.044715 * x * x * x))
    du = x * x
    du *= 3 * 0.044715 * _GELU_C
    du += _GELU_C
    du *= x
    du *= 1.0 - t * t
    du += 1.0 + t
    du *= 0.5
    du *= grad
    return du


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"input width {x.shape[-1]} does not match weight rows {w.shape[0]}")
    return x @ w + b


def dense_backward(x: np.ndarray, w: np.ndarray, grad: np.ndarray):
    """Returns ``(dx, dw, db)`` for ``y = x @ w + b`` with any leading batch dims."""
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad.reshape(-1, grad.shape[-1])
    dw = x2.T @ g2
    db = g2.sum(axis=0)
    dx = grad @ w.T
    return dx, dw, db


# -- MLP ----------------------------------------------------------------------

@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise InvalidParameterError("an MLP needs at least input and output sizes")
        if any(s < 1 for s in sizes):
            raise InvalidParameterError(f"layer sizes must be >= 1, got {sizes}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise InvalidParameterError(f"hidden activation must be one of {HIDDEN_ACTIVATIONS}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise InvalidParameterError(f"output activation must be one of {OUTPUT_ACTIVATIONS}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["layer_sizes"]), d["hidden_activation"], d["output_activation"])


@dataclass
class MlpParams:
    spec: MlpSpec
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    def arrays(self) -> list:
        """Parameter arrays in a fixed order (w0, b0, w1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "MlpParams":
        return MlpParams(self.spec, [np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases])

    def load_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        """Copy values in from another parameter set, in ``arrays()`` order."""
        for dst, src in zip(self.arrays(), arrays):
            dst[...] = src

    def named_tensors(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"layers.{i}.weight"] = w
            out[f"layers.{i}.bias"] = b
        return out


def init_mlp(spec: MlpSpec, rng: RngStream) -> MlpParams:
    """He-uniform for relu layers, Xavier-uniform otherwise; zero biases."""
    weights, biases = [], []
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.layer_sizes[i], spec.layer_sizes[i + 1]
        last = i == spec.n_layers - 1
        if not last and spec.hidden_activation == "relu":
            limit = math.sqrt(6.0 / fan_in)
        else:
            limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.generator.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(spec, weights, biases)


@dataclass
class MlpCache:
    inputs: list
    pre: list
    post: list


def mlp_forward(params: MlpParams, x: np.ndarray):
    """Forward pass. Returns ``(output, cache)``; ``x`` has shape (n, input)."""
    x = np.asarray(x, dtype=np.float64)
    spec = params.spec
    if x.ndim != 2 or x.shape[1] != spec.layer_sizes[0]:
        raise ShapeError(f"expected input of shape (n, {spec.layer_sizes[0]}), got {x.shape}")
    inputs, pre, post = [], [], []
    h = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = dense_forward(h, w, b)
        act = spec.output_activation if i == spec.n_layers - 1 else spec.hidden_activation
        h = activation_forward(act, z)
        pre.append(z)
        post.append(h)
    return h, MlpCache(inputs, pre, post)


def mlp_backward(params: MlpParams, cache: MlpCache, grad_out: np.ndarray) -> MlpParams:
    """Gradients of the scalar whose gradient w.r.t. the output is ``grad_out``."""
    spec = params.spec
    if len(cache.pre) != spec.n_layers or cache.post[-1].shape != np.shape(grad_out):
        raise ShapeError("cache does not match these parameters or grad_out")
    grads = params.zeros_like()
    g = np.asarray(grad_out, dtype=np.float64)
    for i in reversed(range(spec.n_layers)):
        act = spec.output_activation if i == spec.n_layers - 1 else spec.hidden_activation
        g = activation_backward(act, cache.pre[i], cache.post[i], g)
        g, dw, db = dense_backward(cache.inputs[i], params.weights[i], g)
        grads.weights[i] = dw
        grads.biases[i] = db
    return grads


def mlp_predict(params: MlpParams, x: np.ndarray) -> np.ndarray:
    return mlp_forward(params, x)[0]


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over all entries and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    n = diff.size
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


# -- Adam -----------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = 0.5

    @classmethod
    def for_params(cls, arrays: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **kw)


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_by_global_norm(grads: Sequence[np.ndarray], max_norm: float | None):
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return list(grads), norm
    scale = max_norm / norm
    return [g * scale for g in grads], norm


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> float:
    """In-place Adam update with bias correction; returns the pre-clip grad norm."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state have different lengths")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"param shape {p.shape} != grad shape {g.shape}")
    grads, norm = clip_by_global_norm(grads, state.max_grad_norm)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return norm


# -- gradient checking ----------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), floor)


def finite_difference_check(loss_fn: Callable[[], float], arrays: Sequence[np.ndarray],
                            analytic: Sequence[np.ndarray], tol: float, eps: float = 1e-5,
                            rng: RngStream | None = None, max_per_array: int | None = None
                            ) -> GradCheckReport:
    """Compare analytic gradients against central differences of ``loss_fn``.

    ``loss_fn`` must read the current contents of ``arrays``, which are
    perturbed in place and restored.
    """
    worst, count = 0.0, 0
    for arr, grad in zip(arrays, analytic):
        flat_idx = np.arange(arr.size)
        if max_per_array is not None and arr.size > max_per_array:
            gen = rng.generator if rng is not None else np.random.default_rng(0)
            flat_idx = gen.choice(arr.size, size=max_per_array, replace=False)
        for k in flat_idx:
            idx = np.unravel_index(k, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + eps
            fp = loss_fn()
            arr[idx] = orig - eps
            fm = loss_fn()
            arr[idx] = orig
            num = (fp - fm) / (2 * eps)
            err = float(relative_error(np.asarray(grad[idx]), np.asarray(num)))
            worst = max(worst, err)
            count += 1
    return GradCheckReport(worst, count, tol)


def grad_check(spec: MlpSpec, loss: str = "mse", tol: float = 1e-4, seed: int = 0,
               n_samples: int = 4) -> GradCheckReport:
    """Check :func:`mlp_backward` on a random instance of ``spec``.

    ``loss`` is ``"mse"`` against a random target, or ``"nll"`` (negative
    log of a random class probability, only for softmax outputs).
    """
    rng = RngStream(seed, 7)
    params = init_mlp(spec, rng)
    for b in params.biases:
        b[...] = rng.generator.normal(0, 0.1, b.shape)
    x = rng.generator.normal(size=(n_samples, spec.layer_sizes[0]))
    out_dim = spec.layer_sizes[-1]
    target = rng.generator.normal(size=(n_samples, out_dim))
    labels = rng.generator.integers(0, out_dim, size=n_samples)

    def value_and_grad():
        out, cache = mlp_forward(params, x)
        if loss == "mse":
            val, g = mse_loss(out, target)
        elif loss == "nll":
            picked = out[np.arange(n_samples), labels]
            val = float(-np.mean(np.log(picked)))
            g = np.zeros_like(out)
            g[np.arange(n_samples), labels] = -1.0 / (picked * n_samples)
        else:
            raise InvalidParameterError(f"unknown loss {loss!r}")
        return val, g, cache

    _, g, cache = value_and_grad()
    grads = mlp_backward(params, cache, g)
    return finite_difference_check(lambda: value_and_grad()[0], params.arrays(), grads.arrays(), tol)


# -- checkpoints ---------------------------------------------------------------

def tensors_to_json(tensors: dict) -> dict:
    return {name: np.asarray(t).tolist() for name, t in tensors.items()}


def tensors_from_json(obj: dict) -> dict:
    return {name: np.asarray(v, dtype=np.float64) for name, v in obj.items()}


def save_checkpoint(path, params: MlpParams, header: dict | None = None) -> None:
    """Write ``{"format", "spec", "tensors", **header}`` as JSON.

    Python's float repr is the shortest round-tripping form, so reloading is exact.
    """
    doc = {"format": CHECKPOINT_FORMAT, "spec": params.spec.to_dict()}
    if header:
        doc.update(header)
    doc["tensors"] = tensors_to_json(params.named_tensors())
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path):
    """Returns ``(params, doc)`` where ``doc`` holds any extra header fields."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise InvalidParameterError(f"unsupported checkpoint format {doc.get('format')!r}")
    spec = MlpSpec.from_dict(doc["spec"])
    tensors = tensors_from_json(doc.pop("tensors"))
    weights = [tensors[f"layers.{i}.weight"] for i in range(spec.n_layers)]
    biases = [tensors[f"layers.{i}.bias"] for i in range(spec.n_layers)]
    return MlpParams(spec, weights, biases), doc
