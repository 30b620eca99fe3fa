"""PPO with GAE plus A2C, DQN and random baselines for choosing the split."""

from .nets import (
    DqnHyper,
    PolicyNet,
    PpoHyper,
    QNet,
    ReplayBuffer,
    RolloutBuffer,
    ValueNet,
    compute_gae,
    normalize,
)
from .training import (
    AGENT_KINDS,
    Agent,
    EvalResult,
    RunLog,
    collect_rollout,
    config_hash,
    evaluate_policy,
    train_agent,
)
from .updates import (
    a2c_update,
    approx_kl,
    clipped_objective,
    dqn_update,
    policy_act,
    policy_loss_and_grads,
    ppo_update,
)

__all__ = [
    "AGENT_KINDS",
    "Agent",
    "DqnHyper",
    "EvalResult",
    "PolicyNet",
    "PpoHyper",
    "QNet",
    "ReplayBuffer",
    "RolloutBuffer",
    "RunLog",
    "ValueNet",
    "a2c_update",
    "approx_kl",
    "clipped_objective",
    "collect_rollout",
    "compute_gae",
    "config_hash",
    "dqn_update",
    "evaluate_policy",
    "normalize",
    "policy_act",
    "policy_loss_and_grads",
    "ppo_update",
    "train_agent",
]
