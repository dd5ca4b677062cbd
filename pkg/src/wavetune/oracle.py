"""One-step Gaussian policy with a closed-form objective.

x_1 ~ N(0, 1), x_0 ~ N(theta * x_1, sigma^2), r(x_0) = -x_0^2, so
J(theta) = -(theta^2 + sigma^2) and dJ/dtheta = -2 theta.  The estimators
are run through the same coefficient and surrogate functions the trainer
uses, with the scalar mean theta * x_1 standing in for the network.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from wavetune.diffusion import gaussian_log_prob
from wavetune.objectives import ObjectiveConfig, canonical_algo, center_rewards, reward_coefficient, score_function_loss

MIN_ROLLOUTS = 1000


def quadratic_reward(x0: np.ndarray) -> np.ndarray:
    return -np.square(x0)


@dataclass(frozen=True)
class OneStepInstance:
    theta: float = 1.0
    sigma: float = 1.0
    reward_fn: Callable[[np.ndarray], np.ndarray] = field(default=quadratic_reward, compare=False)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


def analytic_value(inst: OneStepInstance) -> float:
    return -(inst.theta ** 2 + inst.sigma ** 2)


def analytic_grad(inst: OneStepInstance) -> float:
    return -2.0 * inst.theta


@dataclass(frozen=True)
class BiasReport:
    estimator: str
    baseline: str
    theta: float
    sigma: float
    n_rollouts: int
    batch_size: int
    estimate: float
    std_error: float
    target: float
    variance: float

    @property
    def z(self) -> float:
        gap = self.estimate - self.target
        if self.std_error == 0:
            return 0.0 if gap == 0 else float("inf")
        return gap / self.std_error

    @property
    def passed(self) -> bool:
        return abs(self.z) <= 3.0

    def text(self) -> str:
        return (f"[bias] estimator={self.estimator} baseline={self.baseline} theta={self.theta:g} "
                f"sigma={self.sigma:g} n={self.n_rollouts} batch={self.batch_size}\n"
                f"  estimate  {self.estimate:+.6f}\n"
                f"  std_error {self.std_error:.6f}\n"
                f"  target    {self.target:+.6f}\n"
                f"  z         {self.z:+.3f}\n"
                f"  result    {'PASS' if self.passed else 'FAIL'}\n")

    def append_to(self, path) -> None:
        with Path(path).open("a") as fh:
            fh.write(self.text())


def per_batch_estimates(estimator_id: str, inst: OneStepInstance, n_rollouts: int, seed: int,
                        baseline: str = "none", batch_size: int = 16) -> np.ndarray:
    """One gradient estimate per batch of ``batch_size`` rollouts."""
    algo = canonical_algo(estimator_id)
    if algo not in ("DDPO", "DLPO"):
        raise ValueError(f"oracle supports DDPO and DLPO(beta=0), not {algo}")
    if n_rollouts < MIN_ROLLOUTS:
        raise ValueError(f"n_rollouts must be at least {MIN_ROLLOUTS}")
    n_batches = n_rollouts // batch_size
    n = n_batches * batch_size
    cfg = ObjectiveConfig(algo=algo, alpha=1.0, beta=0.0, baseline=baseline)
    rng = np.random.default_rng(seed)
    x1 = rng.standard_normal(n)
    x0 = inst.theta * x1 + inst.sigma * rng.standard_normal(n)
    reward = torch.as_tensor(inst.reward_fn(x0), dtype=torch.float64).view(n_batches, batch_size)
    # one copy of theta per rollout, so the gradient w.r.t. copy i is rollout i's contribution
    theta = torch.full((n_batches, batch_size), float(inst.theta), requires_grad=True)
    mean = theta * torch.as_tensor(x1).view(n_batches, batch_size)
    logp = gaussian_log_prob(torch.as_tensor(x0).view(n_batches, batch_size, 1), mean[..., None],
                             inst.sigma ** 2)
    coef = reward_coefficient(cfg, center_rewards(reward, baseline), torch.zeros(n_batches, batch_size))
    score_function_loss(coef, logp).backward()
    # the loss averages over all n rollouts; batch b's ascent estimate is
    # -n_batches * sum_i dloss/dtheta_bi
    return -(theta.grad.sum(1) * n_batches).numpy()

def estimator_bias_test(estimator_id: str, inst: OneStepInstance, n_rollouts: int, seed: int,
                        baseline: str = "none", batch_size: int = 16, target: float | None = None) -> BiasReport:
    """Compare the mean estimate with ``target`` (default: the analytic gradient)."""
    est = per_batch_estimates(estimator_id, inst, n_rollouts, seed, baseline, batch_size)
    var = float(est.var(ddof=1))
    return BiasReport(canonical_algo(estimator_id), baseline, inst.theta, inst.sigma, len(est) * batch_size,
                      batch_size, float(est.mean()), float(np.sqrt(var / len(est))),
                      analytic_grad(inst) if target is None else float(target), var)
