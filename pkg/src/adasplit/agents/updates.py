"""Action selection and the PPO, A2C and DQN parameter updates."""

from __future__ import annotations

import math

import numpy as np

from ..mathcore import RngStream
from ..neuralnet import AdamState, adam_step, log_softmax, mlp_backward, mlp_forward
from .nets import PolicyNet, PpoHyper, QNet, ReplayBuffer, RolloutBuffer, ValueNet, compute_gae, entropy, normalize

LOG_FLOOR = -1e300


def policy_act(policy: PolicyNet, obs: np.ndarray, rng: RngStream | None = None, mode: str = "sample"):
    """Pick an action index; returns ``(index, log_prob)``.

    ``greedy`` takes the argmax (ties to the lowest index); ``sample`` draws
    from the categorical distribution by inverse CDF.
    """
    logp = policy.log_probs(obs)[0]
    if mode == "greedy":
        idx = int(np.argmax(logp))
    else:
        cdf = np.cumsum(np.exp(logp))
        idx = int(np.searchsorted(cdf, rng.generator.random() * cdf[-1], side="right"))
        idx = min(idx, len(cdf) - 1)
    return idx, float(logp[idx])


def clipped_objective(ratio, adv, eps):
    """Per-sample ``min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)``."""
    ratio = np.asarray(ratio, dtype=np.float64)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def policy_loss_and_grads(policy: PolicyNet, obs, actions, adv, old_log_probs=None,
                          eps: float = 0.2, entropy_coef: float = 0.0):
    """Negated policy objective and its gradient.

    With ``old_log_probs`` this is the clipped PPO surrogate; without, the
    plain policy-gradient loss ``-mean(A * log pi(a|s))`` of A2C.
    """
    z, cache = mlp_forward(policy.params, obs)
    logp_all = log_softmax(z)
    probs = np.exp(logp_all)
    n = len(actions)
    rows = np.arange(n)
    logp = logp_all[rows, actions]
    if old_log_probs is None:
        ratio = np.ones(n)
        surr = adv * logp
        dsurr = adv
        clip_frac = 0.0
    else:
        ratio = np.exp(logp - old_log_probs)
        unclipped = ratio * adv
        surr = clipped_objective(ratio, adv, eps)
        dsurr = np.where(unclipped <= np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv, unclipped, 0.0)
        clip_frac = float(np.mean(np.abs(ratio - 1.0) > eps))
    ent = entropy(probs)
    loss = -float(np.mean(surr)) - entropy_coef * float(np.mean(ent))
    onehot = np.zeros_like(probs)
    onehot[rows, actions] = 1.0
    dz = -(dsurr / n)[:, None] * (onehot - probs)
    # d(mean H)/dz = -p (log p + H) / n
    dz += (entropy_coef / n) * probs * (logp_all + ent[:, None])
    grads = mlp_backward(policy.params, cache, dz)
    stats = {"policy_loss": -float(np.mean(surr)), "entropy": float(np.mean(ent)),
             "clip_fraction": clip_frac, "max_ratio_dev": float(np.max(np.abs(ratio - 1.0)))}
    return loss, grads, stats


def approx_kl(policy: PolicyNet, obs, actions, old_log_probs) -> float:
    """``mean((r - 1) - log r)`` with ``r = pi/pi_old``; non-negative."""
    logp = policy.log_probs(obs)[np.arange(len(actions)), actions]
    log_ratio = logp - old_log_probs
    return float(np.mean(np.expm1(log_ratio) - log_ratio))


def prepare_advantages(buffer: RolloutBuffer, gamma: float, xi: float, reward_scale: float = 1.0) -> dict:
    """GAE on ``rewards / reward_scale``; the value net learns in the same units."""
    data = buffer.arrays()
    adv, ret = compute_gae(data["rewards"] / reward_scale, data["values"], data["next_values"], data["dones"],
                           gamma, xi)
    buffer.advantages, buffer.returns = adv, ret
    data["advantages"] = normalize(adv)
    data["returns"] = ret
    return data


def _snapshot(*nets):
    return [[a.copy() for a in net.params.arrays()] for net in nets]


def _restore(snapshot, *nets):
    for arrays, net in zip(snapshot, nets):
        net.params.load_arrays(arrays)


def ppo_update(policy: PolicyNet, value: ValueNet, buffer: RolloutBuffer, hyper: PpoHyper,
               pol_opt: AdamState, val_opt: AdamState, rng: RngStream, reward_scale: float = 1.0) -> dict:
    """Clipped-surrogate update over ``ppo_epochs`` shuffled passes.

    Advantages are normalized over the buffer and again within each
    mini-batch, so the first mini-batch's policy loss is zero at
    ``theta = theta_old``. The buffer is cleared afterwards. A non-finite
    loss restores the pre-update weights and sets ``aborted``.
    """
    data = prepare_advantages(buffer, hyper.gamma, hyper.xi_gae, reward_scale)
    n = len(buffer)
    snap = _snapshot(policy, value)
    metrics = {"aborted": False}
    pl, vl, ent, cf = [], [], [], []
    gen = rng.generator
    for epoch in range(hyper.ppo_epochs):
        order = gen.permutation(n)
        for start in range(0, n, hyper.batch):
            idx = order[start:start + hyper.batch]
            adv = normalize(data["advantages"][idx])
            loss, grads, st = policy_loss_and_grads(policy, data["obs"][idx], data["actions"][idx], adv,
                                                    data["log_probs"][idx], hyper.epsilon_clip,
                                                    hyper.entropy_coef)
            v_loss, v_grads = value.loss_and_grads(data["obs"][idx], data["returns"][idx], hyper.value_coef)
            if not (math.isfinite(loss) and math.isfinite(v_loss)):
                _restore(snap, policy, value)
                metrics["aborted"] = True
                buffer.clear()
                return metrics
            if epoch == 0 and start == 0:
                metrics["first_policy_loss"] = st["policy_loss"]
                metrics["first_max_ratio_dev"] = st["max_ratio_dev"]
            adam_step(policy.params.arrays(), grads.arrays(), pol_opt)
            adam_step(value.params.arrays(), v_grads.arrays(), val_opt)
            pl.append(st["policy_loss"])
            vl.append(v_loss)
            ent.append(st["entropy"])
            cf.append(st["clip_fraction"])
    metrics.update(policy_loss=float(np.mean(pl)), value_loss=float(np.mean(vl)), entropy=float(np.mean(ent)),
                   clip_fraction=float(np.mean(cf)),
                   approx_kl=approx_kl(policy, data["obs"], data["actions"], data["log_probs"]))
    buffer.clear()
    return metrics


def a2c_update(policy: PolicyNet, value: ValueNet, buffer: RolloutBuffer, hyper: PpoHyper,
               pol_opt: AdamState, val_opt: AdamState, rng: RngStream | None = None,
               reward_scale: float = 1.0) -> dict:
    """One advantage-actor-critic gradient step on the whole buffer."""
    data = prepare_advantages(buffer, hyper.gamma, hyper.xi_gae, reward_scale)
    loss, grads, st = policy_loss_and_grads(policy, data["obs"], data["actions"], data["advantages"],
                                            None, entropy_coef=hyper.entropy_coef)
    v_loss, v_grads = value.loss_and_grads(data["obs"], data["returns"], hyper.value_coef)
    if not (math.isfinite(loss) and math.isfinite(v_loss)):
        buffer.clear()
        return {"aborted": True}
    adam_step(policy.params.arrays(), grads.arrays(), pol_opt)
    adam_step(value.params.arrays(), v_grads.arrays(), val_opt)
    buffer.clear()
    return {"aborted": False, "policy_loss": st["policy_loss"], "value_loss": v_loss, "entropy": st["entropy"]}


def dqn_update(qnet: QNet, target: QNet, replay: ReplayBuffer, batch: int, gamma: float,
               opt: AdamState, rng: RngStream) -> dict:
    """One TD step on a uniform replay sample: target ``r + gamma * max Q_target(s')``."""
    b = replay.sample(batch, rng)
    q, cache = mlp_forward(qnet.params, b["obs"])
    q_next = target(b["next_obs"]).max(axis=1)
    y = b["rewards"] + gamma * np.where(b["dones"], 0.0, q_next)
    rows = np.arange(batch)
    td = q[rows, b["actions"]] - y
    loss = float(np.mean(td * td))
    if not math.isfinite(loss):
        return {"aborted": True}
    grad = np.zeros_like(q)
    grad[rows, b["actions"]] = 2.0 * td / batch
    adam_step(qnet.params.arrays(), mlp_backward(qnet.params, cache, grad).arrays(), opt)
    return {"aborted": False, "td_loss": loss, "td_abs": float(np.mean(np.abs(td)))}
