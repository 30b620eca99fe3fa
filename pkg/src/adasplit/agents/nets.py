"""Hyperparameters, policy/value/Q networks and experience buffers."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..exceptions import InvalidParameterError
from ..mathcore import RngStream
from ..neuralnet import (
    AdamState,
    MlpParams,
    MlpSpec,
    init_mlp,
    log_softmax,
    mlp_backward,
    mlp_forward,
    mlp_predict,
    softmax,
)

OBS_DIM = 3


@dataclass(frozen=True)
class PpoHyper:
    alpha: float = 3e-4
    gamma: float = 0.99
    epsilon_clip: float = 0.2
    n_step: int = 400
    batch: int = 100
    steps_per_episode: int = 5
    xi_gae: float = 0.95
    ppo_epochs: int = 4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    hidden: tuple = (64, 64)
    max_grad_norm: float = 0.5
    scale_rewards: bool = True

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise InvalidParameterError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0 <= self.xi_gae <= 1:
            raise InvalidParameterError(f"xi_gae must be in [0, 1], got {self.xi_gae}")
        if not self.epsilon_clip > 0:
            raise InvalidParameterError(f"epsilon_clip must be > 0, got {self.epsilon_clip}")
        if not 1 <= self.batch <= self.n_step:
            raise InvalidParameterError(f"need 1 <= batch <= n_step, got batch={self.batch}, n_step={self.n_step}")
        if self.ppo_epochs < 1 or self.steps_per_episode < 1:
            raise InvalidParameterError("ppo_epochs and steps_per_episode must be >= 1")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PpoHyper":
        return cls(**d)


@dataclass(frozen=True)
class DqnHyper:
    alpha: float = 3e-4
    gamma: float = 0.99
    batch: int = 100
    replay_size: int = 10_000
    target_sync: int = 500
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_frac: float = 0.5
    learning_starts: int = 100
    hidden: tuple = (64, 64)
    max_grad_norm: float = 0.5

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise InvalidParameterError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.batch < 1 or self.replay_size < self.batch or self.target_sync < 1:
            raise InvalidParameterError("need batch >= 1, replay_size >= batch and target_sync >= 1")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def epsilon(self, step: int, total_steps: int) -> float:
        """Linear decay from ``eps_start`` to ``eps_end`` over ``eps_decay_frac`` of training."""
        horizon = max(1.0, self.eps_decay_frac * total_steps)
        frac = min(1.0, step / horizon)
        return self.eps_start + frac * (self.eps_end - self.eps_start)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


class PolicyNet:
    """Categorical policy over ``n_actions`` moves; the MLP emits logits and
    :meth:`probs` applies the softmax."""

    def __init__(self, n_actions: int, rng: RngStream, hidden=(64, 64), params: MlpParams | None = None):
        self.n_actions = n_actions
        self.spec = MlpSpec((OBS_DIM, *hidden, n_actions), "tanh", "identity")
        self.params = params or init_mlp(self.spec, rng)
        # small final layer keeps the initial policy close to uniform
        if params is None:
            self.params.weights[-1] *= 0.01

    def logits(self, obs: np.ndarray) -> np.ndarray:
        return mlp_predict(self.params, np.atleast_2d(obs))

    def probs(self, obs: np.ndarray) -> np.ndarray:
        return softmax(self.logits(obs))

    def log_probs(self, obs: np.ndarray) -> np.ndarray:
        return log_softmax(self.logits(obs))


class ValueNet:
    def __init__(self, rng: RngStream, hidden=(64, 64), params: MlpParams | None = None):
        self.spec = MlpSpec((OBS_DIM, *hidden, 1), "tanh", "identity")
        self.params = params or init_mlp(self.spec, rng)

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        return mlp_predict(self.params, np.atleast_2d(obs))[:, 0]

    def loss_and_grads(self, obs: np.ndarray, returns: np.ndarray, coef: float):
        """``coef * mean((V - R)^2)`` and its parameter gradients."""
        out, cache = mlp_forward(self.params, obs)
        diff = out[:, 0] - returns
        loss = coef * float(np.mean(diff * diff))
        grad = (2.0 * coef / len(returns)) * diff[:, None]
        return loss, mlp_backward(self.params, cache, grad)


class QNet:
    def __init__(self, n_actions: int, rng: RngStream, hidden=(64, 64), params: MlpParams | None = None):
        self.n_actions = n_actions
        self.spec = MlpSpec((OBS_DIM, *hidden, n_actions), "tanh", "identity")
        self.params = params or init_mlp(self.spec, rng)

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        return mlp_predict(self.params, np.atleast_2d(obs))

    def copy_from(self, other: "QNet") -> None:
        self.params.load_arrays(other.params.arrays())


def make_adam(params: MlpParams, lr: float, max_grad_norm: float | None) -> AdamState:
    return AdamState.for_params(params.arrays(), lr=lr, max_grad_norm=max_grad_norm)


class RolloutBuffer:
    """On-policy storage for one update round; cleared after the update.

    Besides the PPO fields it keeps the next state's ``(p, sigma, m)`` and
    measured PPL of every step, which is the surrogate's training data.
    """

    FIELDS = ("obs", "actions", "log_probs", "values", "next_values", "rewards", "dones")

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.clear()

    def clear(self) -> None:
        self.obs, self.actions, self.log_probs = [], [], []
        self.values, self.next_values, self.rewards, self.dones = [], [], [], []
        self.records, self.sources = [], []
        self.advantages = self.returns = None

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def full(self) -> bool:
        return len(self) >= self.capacity

    def add(self, obs, action, log_prob, value, next_value, reward, done, record=None, source="true"):
        self.obs.append(np.asarray(obs, dtype=np.float64))
        self.actions.append(int(action))
        self.log_probs.append(float(log_prob))
        self.values.append(float(value))
        self.next_values.append(float(next_value))
        self.rewards.append(float(reward))
        self.dones.append(bool(done))
        self.records.append(record)
        self.sources.append(source)

    def arrays(self) -> dict:
        return {
            "obs": np.stack(self.obs),
            "actions": np.asarray(self.actions, dtype=np.int64),
            "log_probs": np.asarray(self.log_probs),
            "values": np.asarray(self.values),
            "next_values": np.asarray(self.next_values),
            "rewards": np.asarray(self.rewards),
            "dones": np.asarray(self.dones, dtype=bool),
        }

    @property
    def n_episode_ends(self) -> int:
        return int(sum(self.dones))


def compute_gae(rewards, values, next_values, dones, gamma: float, xi: float):
    """Generalized advantage estimates and return targets.

    ``delta_t = r_t + gamma * V(s_{t+1}) - V(s_t)`` with the bootstrap term
    dropped where the episode ends; the exponentially weighted sum with
    factor ``gamma * xi`` is cut at the same boundaries. Returns
    ``(advantages, returns)``; returns are ``advantages + values``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    next_values = np.asarray(next_values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    n = len(rewards)
    not_done = 1.0 - dones
    deltas = rewards + gamma * next_values * not_done - values
    adv = np.empty(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        running = deltas[t] + gamma * xi * not_done[t] * running
        adv[t] = running
    return adv, adv + values


def normalize(x: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance (left centred if the spread is zero)."""
    x = np.asarray(x, dtype=np.float64)
    centred = x - x.mean()
    std = x.std()
    return centred / std if std > 1e-12 else centred


class ReplayBuffer:
    """Uniform-sampling ring buffer for DQN."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, OBS_DIM))
        self.next_obs = np.zeros((capacity, OBS_DIM))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._pos = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, action, reward, next_obs, done) -> None:
        i = self._pos
        self.obs[i], self.actions[i], self.rewards[i] = obs, action, reward
        self.next_obs[i], self.dones[i] = next_obs, done
        self._pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int, rng: RngStream) -> dict:
        idx = rng.generator.integers(0, self.size, size=batch)
        return {"obs": self.obs[idx], "actions": self.actions[idx], "rewards": self.rewards[idx],
                "next_obs": self.next_obs[idx], "dones": self.dones[idx]}


def entropy(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return -terms.sum(axis=-1)


def finite(x) -> bool:
    return bool(np.all(np.isfinite(x))) if np.ndim(x) else math.isfinite(float(x))
