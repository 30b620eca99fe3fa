"""Splitting-point MDP: state (sigma, m, p), actions that move p by up to u
layers, and a reward trading perplexity against UE compute."""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import asdict, dataclass
from typing import Callable, Protocol

import numpy as np
from scipy import special

from .channel import DEFAULT_H_TH, DEFAULT_OMEGA, M_BRACKET, ChannelParams, ShapeCalibrator
from .exceptions import InvalidParameterError, SurrogateUnavailableError
from .mathcore import RngStream, as_stream
from .splitlm.config import LmConfig
from .splitlm.cost import c_ue
from .splitlm.metrics import PerplexityResult, SplitEvaluator, summarize_nll
from .splitlm.transformer import LmParams

STEP_LOG_FIELDS = ("step", "sigma", "m", "p", "delta", "reward", "ppl", "cost", "loss_prob", "source")


@dataclass(frozen=True)
class State:
    sigma: float
    m: float
    p: int

    def __post_init__(self):
        if not self.sigma >= 0:
            raise InvalidParameterError(f"sigma must be >= 0, got {self.sigma}")
        if not self.m > 0:
            raise InvalidParameterError(f"m must be > 0, got {self.m}")
        if int(self.p) != self.p or self.p < 1:
            raise InvalidParameterError(f"p must be a positive integer, got {self.p}")

    def as_tuple(self) -> tuple:
        return (self.sigma, self.m, self.p)


@dataclass(frozen=True)
class Action:
    delta: int

    def check(self, u: int) -> None:
        if abs(self.delta) > u:
            raise InvalidParameterError(f"|delta| must be <= {u}, got {self.delta}")


def action_set(u: int) -> list:
    """Index ``i`` of a categorical policy maps to ``delta = i - u``."""
    if u < 1:
        raise InvalidParameterError(f"u must be >= 1, got {u}")
    return list(range(-u, u + 1))


@dataclass(frozen=True)
class CaseSpec:
    name: str
    loss_range: tuple
    init_p_range: tuple

    def __post_init__(self):
        lo, hi = self.loss_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise InvalidParameterError(f"loss range must satisfy 0 <= lo <= hi <= 1, got {self.loss_range}")
        plo, phi = self.init_p_range
        if not 1 <= plo <= phi:
            raise InvalidParameterError(f"bad initial layer range {self.init_p_range}")

    def fit_layers(self, n_layers: int) -> "CaseSpec":
        """Clip the initial split range to ``[1, L-1]`` for shallower models."""
        top = n_layers - 1
        lo, hi = self.init_p_range
        if hi <= top:
            return self
        return CaseSpec(self.name, self.loss_range, (min(lo, top), top))

    def to_dict(self) -> dict:
        return {"name": self.name, "loss_range": list(self.loss_range), "init_p_range": list(self.init_p_range)}

    @classmethod
    def from_dict(cls, d: dict) -> "CaseSpec":
        return cls(d["name"], tuple(d["loss_range"]), tuple(d["init_p_range"]))


CASES = {
    "L": CaseSpec("L", (0.0, 0.1), (1, 5)),
    "H": CaseSpec("H", (0.1, 0.3), (6, 10)),
    "A": CaseSpec("A", (0.0, 0.3), (1, 10)),
}


def get_case(name_or_spec) -> CaseSpec:
    if isinstance(name_or_spec, CaseSpec):
        return name_or_spec
    if isinstance(name_or_spec, dict):
        return CaseSpec.from_dict(name_or_spec)
    try:
        return CASES[name_or_spec]
    except KeyError:
        raise InvalidParameterError(f"unknown case {name_or_spec!r}; expected one of {sorted(CASES)}") from None


@dataclass(frozen=True)
class RewardWeights:
    lam: float = 1.0
    cost_normalizer: str = "unit-interval"

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise InvalidParameterError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.cost_normalizer not in ("raw", "unit-interval"):
            raise InvalidParameterError(f"cost normalizer must be 'raw' or 'unit-interval', got {self.cost_normalizer!r}")

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "cost_normalizer": self.cost_normalizer}

    @classmethod
    def from_dict(cls, d: dict) -> "RewardWeights":
        return cls(d.get("lambda", d.get("lam", 1.0)), d.get("cost_normalizer", "unit-interval"))


@dataclass(frozen=True)
class Transition:
    s: State
    a: Action
    r: float
    s_next: State


@dataclass(frozen=True)
class EnvConfig:
    """Channel dynamics and reward-estimation settings shared by all cases."""

    sigma_range: tuple = (0.01, 0.5)
    omega: float = DEFAULT_OMEGA
    h_th: float = DEFAULT_H_TH
    dynamics: str = "iid"
    walk_frac: float = 0.1
    steps_per_episode: int = 5
    u: int = 1
    n_sequences: int = 8
    n_trials: int = 2
    ppl_clamp_factor: float = 10.0
    per_tensor: bool = False
    equalize: bool = False
    channel_mode: str = "nakagami"

    def __post_init__(self):
        lo, hi = self.sigma_range
        if not 0 <= lo <= hi:
            raise InvalidParameterError(f"bad sigma range {self.sigma_range}")
        if self.dynamics not in ("iid", "random_walk"):
            raise InvalidParameterError(f"dynamics must be 'iid' or 'random_walk', got {self.dynamics!r}")
        if self.channel_mode not in ("nakagami", "awgn"):
            raise InvalidParameterError(f"channel_mode must be 'nakagami' or 'awgn', got {self.channel_mode!r}")
        if self.steps_per_episode < 1 or self.u < 1 or self.n_sequences < 1 or self.n_trials < 1:
            raise InvalidParameterError("steps_per_episode, u, n_sequences and n_trials must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sigma_range"] = list(self.sigma_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        d = dict(d)
        if "sigma_range" in d:
            d["sigma_range"] = tuple(d["sigma_range"])
        return cls(**d)


# -- perplexity oracles ----------------------------------------------------------

class PplOracle(Protocol):
    """What the environment needs from a language model."""

    config: LmConfig
    n_calls: int

    def ppl(self, p: int, channel: ChannelParams, rng: RngStream) -> PerplexityResult: ...


class LmOracle:
    """Perplexity of the trained model at split ``p`` through the channel.

    Rewards use ``n_sequences`` rows of the evaluation pool and
    ``n_trials`` channel realizations per call. By default the rows are
    drawn once from ``rng`` and kept, so reward noise comes from the channel
    alone; ``resample=True`` draws fresh rows on every call. The edge layers
    run in ``dtype``, float32 by default for speed. ``n_calls`` counts calls
    that executed the model.
    """

    def __init__(self, params: LmParams, pool, n_sequences: int = 8, n_trials: int = 2,
                 resample: bool = False, rng: RngStream | int = 0, dtype=np.float32):
        self.evaluator = SplitEvaluator(params, pool, dtype)
        self.config = params.config
        self.n_sequences = min(n_sequences, self.evaluator.n_sequences)
        self.n_trials = n_trials
        self.resample = resample
        self.rows = self._draw_rows(as_stream(rng).child("oracle.rows"))
        self.n_calls = 0

    def _draw_rows(self, rng: RngStream) -> np.ndarray:
        rows = rng.generator.choice(self.evaluator.n_sequences, self.n_sequences, replace=False)
        rows.sort()
        return rows

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    def ppl(self, p: int, channel: ChannelParams, rng: RngStream) -> PerplexityResult:
        self.n_calls += 1
        rows = self._draw_rows(rng.child("rows")) if self.resample else self.rows
        return self.evaluator.perplexity(p, channel, rng.child("channel"), rows, self.n_trials)


class FunctionOracle:
    """Closed-form stand-in: ``fn(p, sigma, m) -> ppl`` plus optional
    multiplicative log-normal noise. Useful for tests that must not depend on
    a trained model."""

    def __init__(self, fn: Callable[[int, float, float], float], config: LmConfig, noise: float = 0.0):
        self.fn = fn
        self.config = config
        self.noise = noise
        self.n_calls = 0

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    def ppl(self, p: int, channel: ChannelParams, rng: RngStream) -> PerplexityResult:
        self.n_calls += 1
        base = float(self.fn(p, channel.sigma, channel.m))
        nll = math.log(max(base, 1.0))
        if self.noise > 0:
            nll += rng.generator.normal(0.0, self.noise)
        return summarize_nll(np.array([nll]), 1, False)


# -- reward -------------------------------------------------------------------------

def normalized_cost(config: LmConfig, p: int, weights: RewardWeights) -> float:
    raw = c_ue(config, p)
    if weights.cost_normalizer == "raw":
        return float(raw)
    return float(raw / c_ue(config, config.n_layers - 1))


def channel_for(state: State, env_cfg: EnvConfig) -> ChannelParams:
    """Channel seen in ``state``; ``awgn`` mode keeps sigma but drops fading and loss."""
    if env_cfg.channel_mode == "awgn":
        return ChannelParams("awgn", sigma=state.sigma)
    return ChannelParams("nakagami", state.m, env_cfg.omega, state.sigma, env_cfg.h_th,
                         env_cfg.per_tensor, env_cfg.equalize)


def ppl_ceiling(config: LmConfig, env_cfg: EnvConfig) -> float:
    return env_cfg.ppl_clamp_factor * config.vocab_size


def reward_true(state: State, weights: RewardWeights, oracle: PplOracle, rng: RngStream,
                env_cfg: EnvConfig = EnvConfig()):
    """``-(PPL + lambda * cost)`` with PPL measured through the channel.

    Returns ``(reward, info)``; ``info["ppl"]`` is the unclamped estimate.
    """
    res = oracle.ppl(state.p, channel_for(state, env_cfg), rng)
    cost = normalized_cost(oracle.config, state.p, weights)
    ppl = min(res.ppl, ppl_ceiling(oracle.config, env_cfg))
    return -(ppl + weights.lam * cost), {"ppl": res.ppl, "ppl_clamped": ppl < res.ppl or res.clamped,
                                        "cost": cost, "extrapolating": False}


def reward_surrogate(state: State, weights: RewardWeights, surrogate, config: LmConfig):
    """Same reward with the PPL term predicted by ``surrogate``; no model runs."""
    if surrogate is None:
        raise SurrogateUnavailableError("reward source 'surrogate' needs a fitted surrogate")
    ppl, extrapolating = surrogate.predict_one(state.p, state.sigma, state.m)
    cost = normalized_cost(config, state.p, weights)
    return -(ppl + weights.lam * cost), {"ppl": ppl, "ppl_clamped": False, "cost": cost,
                                        "extrapolating": extrapolating}


# -- environment -----------------------------------------------------------------------

def loss_probability(m: float, env_cfg: EnvConfig) -> float:
    return float(special.gammainc(m, m * env_cfg.h_th ** 2 / env_cfg.omega))


def draw_channel(case: CaseSpec, env_cfg: EnvConfig, calibrator: ShapeCalibrator, rng: RngStream,
                 previous: State | None = None):
    """Sample ``(sigma, m, target_loss)``; iid over the case ranges, or a
    bounded random walk around ``previous``."""
    g = rng.generator
    s_lo, s_hi = env_cfg.sigma_range
    l_lo, l_hi = case.loss_range
    if env_cfg.dynamics == "random_walk" and previous is not None:
        f = env_cfg.walk_frac
        sigma = float(np.clip(previous.sigma * (1 + g.uniform(-f, f)), s_lo, s_hi))
        loss = loss_probability(previous.m, env_cfg)
        loss = float(np.clip(loss + g.uniform(-f, f) * max(loss, f * (l_hi - l_lo)), l_lo, l_hi))
    else:
        sigma = float(g.uniform(s_lo, s_hi)) if s_hi > s_lo else float(s_lo)
        loss = float(g.uniform(l_lo, l_hi)) if l_hi > l_lo else float(l_lo)
    return sigma, float(calibrator(loss)), loss


def env_reset(case: CaseSpec, rng: RngStream, env_cfg: EnvConfig = EnvConfig(),
              calibrator: ShapeCalibrator | None = None) -> State:
    """Initial state: uniform p over the case's layer range, uniform loss
    target converted to ``m``, uniform sigma."""
    calibrator = calibrator or ShapeCalibrator(env_cfg.omega, env_cfg.h_th)
    lo, hi = case.init_p_range
    p = int(rng.child("p").generator.integers(lo, hi + 1))
    sigma, m, _ = draw_channel(case, env_cfg, calibrator, rng.child("channel"))
    return State(sigma, m, p)


class SplitEnv:
    """Episodic environment over splitting points.

    ``reward_source`` is ``"true"`` (run the oracle) or ``"surrogate"``
    (query ``surrogate``). Every step appends a row to ``log`` when
    ``keep_log`` is set.
    """

    def __init__(self, oracle: PplOracle, case="A", env_cfg: EnvConfig = EnvConfig(),
                 weights: RewardWeights = RewardWeights(), rng: RngStream | int = 0,
                 reward_source: str = "true", surrogate=None, keep_log: bool = False):
        self.oracle = oracle
        self.config = oracle.config
        self.case = get_case(case).fit_layers(self.config.n_layers)
        self.env_cfg = env_cfg
        self.weights = weights
        self.rng = as_stream(rng)
        self.calibrator = ShapeCalibrator(env_cfg.omega, env_cfg.h_th)
        self.surrogate = surrogate
        self.reward_source = reward_source
        self.keep_log = keep_log
        self.log = []
        self.state = None
        self.t = 0
        self.n_resets = 0
        self.n_steps = 0

    @property
    def max_p(self) -> int:
        return self.config.n_layers - 1

    @property
    def n_actions(self) -> int:
        return 2 * self.env_cfg.u + 1

    @property
    def actions(self) -> list:
        return action_set(self.env_cfg.u)

    @property
    def lm_calls(self) -> int:
        return self.oracle.n_calls

    def set_reward_source(self, source: str, surrogate=None) -> None:
        if source not in ("true", "surrogate"):
            raise InvalidParameterError(f"reward source must be 'true' or 'surrogate', got {source!r}")
        if surrogate is not None:
            self.surrogate = surrogate
        if source == "surrogate" and self.surrogate is None:
            raise SurrogateUnavailableError("reward source 'surrogate' needs a fitted surrogate")
        self.reward_source = source

    @property
    def reward_source(self) -> str:
        return self._reward_source

    @reward_source.setter
    def reward_source(self, source: str) -> None:
        if source not in ("true", "surrogate"):
            raise InvalidParameterError(f"reward source must be 'true' or 'surrogate', got {source!r}")
        self._reward_source = source

    def observe(self, state: State | None = None) -> np.ndarray:
        """Policy input: sigma scaled by its range, log m by the shape bracket, p by L-1."""
        s = state or self.state
        lo, hi = self.env_cfg.sigma_range
        sig = (s.sigma - lo) / (hi - lo) if hi > lo else 0.0
        lm_lo, lm_hi = math.log(M_BRACKET[0]), math.log(M_BRACKET[1])
        return np.array([sig, (math.log(s.m) - lm_lo) / (lm_hi - lm_lo), s.p / self.max_p])

    def reset(self, rng: RngStream | None = None) -> State:
        rng = rng or self.rng.child("reset", self.n_resets)
        self.n_resets += 1
        self.state = env_reset(self.case, rng, self.env_cfg, self.calibrator)
        self.t = 0
        return self.state

    def reward(self, state: State, rng: RngStream, source: str | None = None):
        source = source or self.reward_source
        if source == "surrogate":
            return reward_surrogate(state, self.weights, self.surrogate, self.config)
        return reward_true(state, self.weights, self.oracle, rng, self.env_cfg)

    def step(self, action, rng: RngStream | None = None):
        """Apply ``action`` (an :class:`Action` or int delta).

        Returns ``(next_state, reward, done, info)``. ``done`` is true after
        ``steps_per_episode`` steps.
        """
        if self.state is None:
            raise InvalidParameterError("call reset() before step()")
        a = action if isinstance(action, Action) else Action(int(action))
        a.check(self.env_cfg.u)
        rng = rng or self.rng.child("step", self.n_steps)
        s = self.state
        target = s.p + a.delta
        p_next = min(max(target, 1), self.max_p)
        sigma, m, loss = draw_channel(self.case, self.env_cfg, self.calibrator, rng.child("channel"), s)
        s_next = State(sigma, m, p_next)
        r, info = self.reward(s_next, rng.child("reward"))
        info.update(clamped=p_next != target, loss_prob=loss, source=self.reward_source, transition=Transition(s, a, r, s_next))
        self.state = s_next
        self.t += 1
        self.n_steps += 1
        done = self.t >= self.env_cfg.steps_per_episode
        if self.keep_log:
            self.log.append({"step": self.n_steps, "sigma": sigma, "m": m, "p": p_next, "delta": a.delta,
                             "reward": r, "ppl": info["ppl"], "cost": info["cost"], "loss_prob": loss,
                             "source": self.reward_source})
        return s_next, r, done, info

    def fork(self) -> "SplitEnv":
        """Independent copy at the current state that shares the oracle.

        Step and reset randomness is keyed by counters, so the copy and the
        original produce the same future given the same actions.
        """
        env = copy.copy(self)
        env.log = list(self.log)
        return env

    def with_case(self, case) -> "SplitEnv":
        """Shallow copy sharing the oracle, for evaluation on another case."""
        env = SplitEnv(self.oracle, case, self.env_cfg, self.weights, self.rng, self.reward_source,
                       self.surrogate)
        return env


def env_step(env: SplitEnv, state: State, action, rng: RngStream, reward_source: str = "true"):
    """Functional form of :meth:`SplitEnv.step` starting from ``state``."""
    env.state = state
    env.t = 0
    previous = env.reward_source
    env.set_reward_source(reward_source)
    try:
        return env.step(action, rng)
    finally:
        env.reward_source = previous


def write_step_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=STEP_LOG_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in STEP_LOG_FIELDS})
