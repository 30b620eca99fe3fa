"""Rollout collection, training loops, evaluation and run logs."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from ..environment import SplitEnv
from ..exceptions import InvalidParameterError, TrainingFailure
from ..mathcore import RngStream, as_stream
from ..neuralnet import CHECKPOINT_FORMAT, load_checkpoint, save_checkpoint
from .nets import DqnHyper, PolicyNet, PpoHyper, QNet, ReplayBuffer, RolloutBuffer, ValueNet, make_adam
from .updates import a2c_update, dqn_update, policy_act, ppo_update

AGENT_KINDS = ("ppo", "a2c", "dqn", "random")
STEP_FIELDS = ("step", "episode", "reward", "ppl", "cost", "p", "sigma", "m", "source")
UPDATE_FIELDS = ("policy_loss", "value_loss", "entropy", "approx_kl", "clip_fraction", "td_loss")


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RunLog:
    """Per-step and per-update history of one training run.

    ``step_seconds`` and any ``*_seconds`` event hold wall-clock times; they
    are kept out of :meth:`fingerprint` and the CSV so logs stay reproducible.
    """

    run_id: str = ""
    kind: str = "ppo"
    seed: int = 0
    config_hash: str = ""
    steps: list = field(default_factory=list)
    updates: list = field(default_factory=list)
    episode_rewards: list = field(default_factory=list)
    events: dict = field(default_factory=dict)
    step_seconds: list = field(default_factory=list)

    def rewards(self) -> np.ndarray:
        return np.array([row["reward"] for row in self.steps])

    def fingerprint(self) -> str:
        events = {k: v for k, v in self.events.items() if not k.endswith("_seconds")}
        doc = {"steps": self.steps, "updates": self.updates, "episodes": self.episode_rewards,
               "events": events}
        return hashlib.sha256(json.dumps(doc, sort_keys=True, default=repr).encode()).hexdigest()

    def to_csv(self, path) -> None:
        """One row per environment step with the latest update's loss metrics."""
        upd = iter(self.updates)
        current = next(upd, None)
        latest = {}
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=STEP_FIELDS + UPDATE_FIELDS)
            w.writeheader()
            for row in self.steps:
                while current is not None and current["step"] <= row["step"]:
                    latest = {k: current.get(k, "") for k in UPDATE_FIELDS}
                    current = next(upd, None)
                w.writerow({**{k: row[k] for k in STEP_FIELDS}, **latest})

    @classmethod
    def from_csv(cls, path, **meta) -> "RunLog":
        log = cls(**meta)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                log.steps.append({"step": int(row["step"]), "episode": int(row["episode"]),
                                  "reward": float(row["reward"]), "ppl": float(row["ppl"]),
                                  "cost": float(row["cost"]), "p": int(row["p"]),
                                  "sigma": float(row["sigma"]), "m": float(row["m"]),
                                  "source": row["source"]})
        return log


class Agent:
    """Networks and optimizers of one agent kind, with a common ``act``."""

    def __init__(self, kind: str, n_actions: int, rng: RngStream, hyper: PpoHyper = PpoHyper(),
                 dqn_hyper: DqnHyper = DqnHyper()):
        if kind not in AGENT_KINDS:
            raise InvalidParameterError(f"agent kind must be one of {AGENT_KINDS}, got {kind!r}")
        self.kind = kind
        self.n_actions = n_actions
        self.u = (n_actions - 1) // 2
        self.hyper = hyper
        self.dqn_hyper = dqn_hyper
        self.policy = self.value = self.qnet = self.target = None
        if kind in ("ppo", "a2c"):
            self.policy = PolicyNet(n_actions, rng.child("policy"), hyper.hidden)
            self.value = ValueNet(rng.child("value"), hyper.hidden)
            self.pol_opt = make_adam(self.policy.params, hyper.alpha, hyper.max_grad_norm)
            self.val_opt = make_adam(self.value.params, hyper.alpha, hyper.max_grad_norm)
        elif kind == "dqn":
            self.qnet = QNet(n_actions, rng.child("q"), dqn_hyper.hidden)
            self.target = QNet(n_actions, rng.child("q"), dqn_hyper.hidden)
            self.target.copy_from(self.qnet)
            self.q_opt = make_adam(self.qnet.params, dqn_hyper.alpha, dqn_hyper.max_grad_norm)
        self.epsilon = 1.0
        self.reward_scale = None

    def act(self, obs: np.ndarray, rng: RngStream | None = None, mode: str = "sample"):
        """Returns ``(action_index, log_prob)``; ``delta = index - u``."""
        if self.kind == "random":
            idx = int(rng.generator.integers(self.n_actions))
            return idx, -math.log(self.n_actions)
        if self.kind == "dqn":
            if mode == "sample" and rng.generator.random() < self.epsilon:
                return int(rng.generator.integers(self.n_actions)), 0.0
            return int(np.argmax(self.qnet(obs)[0])), 0.0
        return policy_act(self.policy, obs, rng, mode)

    def save(self, path, header: dict | None = None) -> None:
        """Checkpoint in the tensor format; the random agent stores only its header."""
        doc = {"agent": self.kind, "n_actions": self.n_actions, "hyper": self.hyper.to_dict(),
               **(header or {})}
        if self.kind == "random":
            with open(path, "w") as fh:
                json.dump({"format": CHECKPOINT_FORMAT, **doc}, fh, indent=1, sort_keys=True)
            return
        net = self.qnet if self.kind == "dqn" else self.policy
        save_checkpoint(path, net.params, doc)

    @classmethod
    def load(cls, path) -> "Agent":
        with open(path) as fh:
            head = json.load(fh)
        if head.get("format") == CHECKPOINT_FORMAT and head.get("agent") == "random":
            return cls("random", head["n_actions"], RngStream(0), PpoHyper.from_dict(head["hyper"]))
        params, doc = load_checkpoint(path)
        agent = cls(doc["agent"], doc["n_actions"], RngStream(0), PpoHyper.from_dict(doc["hyper"]))
        net = agent.qnet if agent.kind == "dqn" else agent.policy
        net.params.load_arrays(params.arrays())
        return agent


def reward_scale_for(rewards) -> float:
    """Root-mean-square of a batch of rewards, floored to stay positive."""
    r = np.asarray(rewards, dtype=np.float64)
    return float(max(np.sqrt(np.mean(r * r)), 1e-8))


def _record(state, info) -> tuple:
    return (state.p, state.sigma, state.m, float(info["ppl"]))


def collect_rollout(env: SplitEnv, agent: Agent, hyper: PpoHyper, rng: RngStream, log: RunLog | None = None,
                    buffer: RolloutBuffer | None = None) -> RolloutBuffer:
    """Run ``hyper.n_step`` environment steps, resetting at episode ends.

    Value estimates for ``s_t`` and ``s_{t+1}`` are filled in one batch at
    the end; the networks do not change during collection.
    """
    buffer = buffer if buffer is not None else RolloutBuffer(hyper.n_step)
    next_obs = []
    for i in range(hyper.n_step):
        if env.state is None or env.t >= env.env_cfg.steps_per_episode:
            env.reset()
        obs = env.observe()
        idx, logp = agent.act(obs, rng.child(i), "sample")
        t0 = time.perf_counter()
        s_next, r, done, info = env.step(idx - env.env_cfg.u)
        elapsed = time.perf_counter() - t0
        next_obs.append(env.observe())
        buffer.add(obs, idx, logp, 0.0, 0.0, r, done, _record(s_next, info), env.reward_source)
        if log is not None:
            _log_step(log, env, s_next, r, info, done, elapsed)
    if agent.value is not None:
        values = agent.value(np.stack(buffer.obs))
        nvalues = agent.value(np.stack(next_obs))
        buffer.values = list(values)
        buffer.next_values = list(nvalues)
    return buffer


def _log_step(log: RunLog, env: SplitEnv, s, r, info, done, elapsed) -> None:
    n = len(log.steps)
    log.steps.append({"step": n + 1, "episode": len(log.episode_rewards), "reward": r, "ppl": info["ppl"],
                      "cost": info["cost"], "p": s.p, "sigma": s.sigma, "m": s.m, "source": info["source"]})
    log.step_seconds.append(elapsed)
    if done:
        k = env.env_cfg.steps_per_episode
        log.episode_rewards.append(float(sum(row["reward"] for row in log.steps[-k:])))


def train_agent(kind: str, env: SplitEnv, hyper: PpoHyper = PpoHyper(), total_steps: int = 24_000,
                rng: RngStream | int = 0, callbacks=(), dqn_hyper: DqnHyper = DqnHyper(),
                run_id: str = "", config: dict | None = None, agent: Agent | None = None,
                log: RunLog | None = None, start_round: int = 0):
    """Train one agent kind for ``total_steps`` environment steps.

    PPO, A2C and the random baseline work in rounds of ``n_step`` steps;
    each callback is called as ``cb(agent, buffer, log, round_index)``
    after a round's rollout and before its update. DQN updates every step
    once ``learning_starts`` transitions are stored.

    Passing ``agent``, ``log`` and ``start_round`` resumes a run: all
    randomness is keyed by round, so stopping after round ``k`` and resuming
    at ``k + 1`` reproduces the uninterrupted run.

    Returns ``(agent, RunLog)``.
    """
    rng = as_stream(rng)
    if env.env_cfg.steps_per_episode != hyper.steps_per_episode:
        raise InvalidParameterError("environment and hyperparameters disagree on steps per episode")
    if agent is None:
        agent = Agent(kind, env.n_actions, rng.child("agent", "init"), hyper, dqn_hyper)
    if log is None:
        log = RunLog(run_id=run_id, kind=kind, seed=rng.seed, config_hash=config_hash(config or {}))
    if kind == "dqn":
        if start_round:
            raise InvalidParameterError("DQN runs cannot be resumed")
        _train_dqn(agent, env, total_steps, rng, log)
        return agent, log
    n_rounds = math.ceil(total_steps / hyper.n_step)
    for rnd in range(start_round, n_rounds):
        buffer = collect_rollout(env, agent, hyper, rng.child("rollout", rnd), log)
        for cb in callbacks:
            cb(agent, buffer, log, rnd)
        step = len(log.steps)
        if kind == "random":
            buffer.clear()
            continue
        if agent.reward_scale is None:
            agent.reward_scale = reward_scale_for(buffer.rewards) if hyper.scale_rewards else 1.0
        update = ppo_update if kind == "ppo" else a2c_update
        metrics = update(agent.policy, agent.value, buffer, hyper, agent.pol_opt, agent.val_opt,
                         rng.child("update", rnd), agent.reward_scale)
        if metrics.get("aborted"):
            log.events.setdefault("aborted_updates", []).append(rnd)
        log.updates.append({"step": step, "round": rnd, **metrics})
    return agent, log


def _train_dqn(agent: Agent, env: SplitEnv, total_steps: int, rng: RngStream, log: RunLog) -> None:
    h = agent.dqn_hyper
    replay = ReplayBuffer(h.replay_size)
    for i in range(total_steps):
        if env.state is None or env.t >= env.env_cfg.steps_per_episode:
            env.reset()
        agent.epsilon = h.epsilon(i, total_steps)
        obs = env.observe()
        idx, _ = agent.act(obs, rng.child("act", i), "sample")
        t0 = time.perf_counter()
        s_next, r, done, info = env.step(idx - env.env_cfg.u)
        elapsed = time.perf_counter() - t0
        replay.add(obs, idx, r, env.observe(), done)
        _log_step(log, env, s_next, r, info, done, elapsed)
        if len(replay) >= max(h.batch, h.learning_starts):
            metrics = dqn_update(agent.qnet, agent.target, replay, h.batch, h.gamma, agent.q_opt,
                                 rng.child("update", i))
            if metrics.get("aborted"):
                raise TrainingFailure(f"non-finite TD loss at step {i}", step=i)
            if (i + 1) % 400 == 0:
                log.updates.append({"step": i + 1, "round": (i + 1) // 400, **metrics, "epsilon": agent.epsilon})
        if (i + 1) % h.target_sync == 0:
            agent.target.copy_from(agent.qnet)


@dataclass
class EvalResult:
    episode_rewards: np.ndarray
    final_states: list
    final_ppl: np.ndarray


def evaluate_policy(agent: Agent, env: SplitEnv, n_episodes: int, rng: RngStream | int = 0,
                    mode: str = "greedy") -> EvalResult:
    """Run ``n_episodes`` full episodes on true rewards.

    Channel draws and reward noise come from ``rng`` only, indexed by
    episode and step, so two agents evaluated with the same ``rng`` face the
    same channel sequence.
    """
    rng = as_stream(rng)
    previous = env.reward_source
    env.reward_source = "true"
    rewards, finals, ppls = [], [], []
    try:
        for ep in range(n_episodes):
            env.reset(rng.child("reset", ep))
            total = 0.0
            for t in range(env.env_cfg.steps_per_episode):
                idx, _ = agent.act(env.observe(), rng.child("act", ep, t), mode)
                s, r, done, info = env.step(idx - env.env_cfg.u, rng.child("step", ep, t))
                total += r
            rewards.append(total)
            finals.append(s)
            ppls.append(info["ppl"])
    finally:
        env.reward_source = previous
    return EvalResult(np.array(rewards), finals, np.array(ppls))
