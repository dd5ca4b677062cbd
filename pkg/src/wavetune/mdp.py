"""Denoising cast as a finite-horizon MDP.

MDP step i observes s_i = (c, x_{T-i}) and acts a_i = x_{T-i-1}; transitions
are deterministic given the action and only the final transition carries
reward r(x_0, c).  Trajectories are stored in diffusion-step order (see
:class:`~wavetune.diffusion.DenoisingTrajectory`).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from wavetune.diffusion import (Condition, DenoisingTrajectory, NoiseSchedule, gaussian_log_prob,
                                reverse_mean, sample_batch, sample_trajectory)
from wavetune.model import Denoiser

MOS_MIN, MOS_MAX = 1.0, 5.0

__all__ = ["DenoisingTrajectory", "ShapedReward", "rollout", "rollout_batch", "score_terminal",
           "logprob_action", "trajectory_log_probs", "step_rewards", "replay_actions", "dump_jsonl"]


@dataclass(frozen=True)
class ShapedReward:
    """alpha * raw - beta * (active penalty); at most one penalty channel is active."""

    raw: float
    alpha: float
    beta: float
    kl_penalty: float = 0.0
    dl_penalty: float = 0.0

    def __post_init__(self):
        if self.kl_penalty < 0 or self.dl_penalty < 0:
            raise ValueError("penalties are non-negative")
        if self.kl_penalty > 0 and self.dl_penalty > 0:
            raise ValueError("only one penalty channel may be active")

    @property
    def shaped(self) -> float:
        return self.alpha * self.raw - self.beta * (self.kl_penalty + self.dl_penalty)


def rollout(policy: Denoiser, c: Condition, sched: NoiseSchedule, seed: int) -> DenoisingTrajectory:
    traj = sample_trajectory(policy, c, sched, int(seed))
    traj.version = policy.version
    return traj


def rollout_batch(policy: Denoiser, conditions: Sequence[Condition], sched: NoiseSchedule,
                  seeds: Sequence[int]) -> list[DenoisingTrajectory]:
    rngs = [np.random.default_rng(int(s)) for s in seeds]
    return sample_batch(policy, conditions, sched, rngs, seeds=[int(s) for s in seeds],
                        version=policy.version)


def score_terminal(traj: DenoisingTrajectory, reward_model: Callable, evaluator: Callable | None = None
                   ) -> DenoisingTrajectory:
    """Attach r(x_0, c), clamped to [1, 5]; scoring twice is an error."""
    if traj.terminal_reward is not None:
        raise ValueError("trajectory already scored")
    r = float(np.clip(reward_model(traj.x0, traj.condition), MOS_MIN, MOS_MAX))
    e = None if evaluator is None else float(evaluator(traj.x0, traj.condition))
    return dataclasses.replace(traj, terminal_reward=r, eval_score=e)


def step_rewards(traj: DenoisingTrajectory) -> np.ndarray:
    """Per-MDP-step rewards: zero everywhere except the final transition."""
    if traj.terminal_reward is None:
        raise ValueError("trajectory not scored")
    out = np.zeros(traj.n_steps)
    out[-1] = traj.terminal_reward
    return out


def logprob_action(policy: Denoiser, state: tuple[Condition, np.ndarray, int], action,
                   sched: NoiseSchedule) -> torch.Tensor:
    """log pi_theta(a | s) as a differentiable scalar."""
    c, x, t = state
    t = sched.check_step(t)
    x = torch.as_tensor(np.asarray(x, dtype=np.float64))
    a = torch.as_tensor(np.asarray(action, dtype=np.float64))
    if a.shape != x.shape:
        raise ValueError(f"action shape {tuple(a.shape)} != state shape {tuple(x.shape)}")
    mu = reverse_mean(policy, x[None], [c.tokens], t, sched)[0]
    return gaussian_log_prob(a, mu, sched.reverse_variance[t])


def trajectory_log_probs(policy: Denoiser, trajs: Sequence[DenoisingTrajectory],
                         sched: NoiseSchedule) -> torch.Tensor:
    """Recompute log-probs of every stored transition, shape (B, T), in one pass."""
    b, n = len(trajs), trajs[0].n_steps
    states = torch.as_tensor(np.stack([tr.states for tr in trajs]))
    steps = np.tile(trajs[0].steps, b)
    tokens = [tr.condition.tokens for tr in trajs for _ in range(n)]
    x = states[:, :-1].reshape(b * n, -1)
    a = states[:, 1:].reshape(b * n, -1)
    mu = reverse_mean(policy, x, tokens, steps, sched)
    var = torch.as_tensor(sched.reverse_variance[steps])
    d = a.shape[-1]
    lp = -0.5 * d * (np.log(2 * np.pi) + torch.log(var)) - ((a - mu) ** 2).sum(-1) / (2.0 * var)
    return lp.view(b, n)


def replay_actions(c: Condition, x_T: np.ndarray, actions: Sequence[np.ndarray]) -> np.ndarray:
    """Dirac transitions: the next state is the action, the condition is carried."""
    states = [np.asarray(x_T)]
    for a in actions:
        states.append(np.asarray(a))
    return np.stack(states)


def dump_jsonl(trajs: Sequence[DenoisingTrajectory], path) -> None:
    with open(path, "a") as fh:
        for tr in trajs:
            fh.write(json.dumps({"condition_id": tr.condition.id, "tokens": list(tr.condition.tokens),
                                 "seed": tr.seed, "reward": tr.terminal_reward,
                                 "log_probs": [float(v) for v in tr.log_probs]}) + "\n")
