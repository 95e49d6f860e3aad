"""Learned penalty selection: Q-networks, prioritized replay and training."""

from .agent import (MdpConfig, NotReady, RLPolicy, TrainConfig, TrainingAborted, TrainResult,
                    build_state, build_states, deploy_policy, double_q_target, reward_baseline,
                    reward_conv, reward_res, save_checkpoints, select_actions, signed_log,
                    total_reward, train)
from .qnet import CheckpointError, MomentumSGD, NonFiniteError, QNetwork
from .replay import PrioritizedReplay, SumTree

__all__ = [
    "MdpConfig", "NotReady", "RLPolicy", "TrainConfig", "TrainingAborted", "TrainResult",
    "build_state", "build_states", "deploy_policy", "double_q_target", "reward_baseline",
    "reward_conv", "reward_res", "save_checkpoints", "select_actions", "signed_log",
    "total_reward", "train", "CheckpointError", "MomentumSGD", "NonFiniteError", "QNetwork",
    "PrioritizedReplay", "SumTree",
]
