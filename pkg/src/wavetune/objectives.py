"""Fine-tuning gradient estimators over batches of scored trajectories.

Every estimator is a surrogate loss whose gradient is the update direction:

=======  ==============================================================
RWR      mean_b alpha r_b * d_b  (reward-weighted denoising loss)
DDPO     -mean_b alpha r_b * L_b
DPOK     DDPO + beta * mean_b mean_k ||eps_theta - eps_pre||
KLinR    -mean_b (alpha r_b - beta kl_b) * L_b,  coefficient detached
DLPO     -mean_b (alpha r_b - beta d_b) * L_b + beta * mean_b d_b
OnlyDL   mean_b d_b * L_b + mean_b d_b
=======  ==============================================================

``L_b`` is the summed log-probability of trajectory b's transitions under
the current policy and ``d_b`` the mean noise-regression error over
``loss_guidance_steps`` fine-schedule re-noisings of its x_0.

Inside the REINFORCE products the penalty is a constant coefficient.  For
DLPO and OnlyDL the diffusion loss also reaches the parameters through the
trailing ``mean_b d_b`` term unless ``detach_penalty`` is set; it is added
with unit weight rather than multiplied by ``L_b``, whose sign depends on
the schedule's variances (it is negative for the default 10-step chain, so
the literal product would ascend the diffusion loss).  A zero
``beta`` switches the penalty channel off entirely, so the penalised
estimators reduce to DDPO bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from wavetune.diffusion import DenoisingTrajectory, NoiseSchedule, noise_distance
from wavetune.mdp import trajectory_log_probs
from wavetune.model import Denoiser, backward, flat_grads, zero_grads

ALGOS = ("RWR", "DDPO", "DPOK", "KLinR", "DLPO", "OnlyDL")
BASELINES = ("none", "batch_mean")


def canonical_algo(name: str) -> str:
    for a in ALGOS:
        if a.lower() == str(name).lower():
            return a
    raise ValueError(f"unknown algorithm {name!r}; valid: {', '.join(a.lower() for a in ALGOS)}")


@dataclass
class ObjectiveConfig:
    algo: str = "DLPO"
    alpha: float = 1.0
    beta: float = 1.0
    loss_guidance_steps: int = 10
    detach_penalty: bool = False
    baseline: str = "none"
    squared_norm: bool = False

    def __post_init__(self):
        self.algo = canonical_algo(self.algo)
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if int(self.loss_guidance_steps) != self.loss_guidance_steps or self.loss_guidance_steps < 1:
            raise ValueError("loss_guidance_steps must be a positive integer")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}")


@dataclass
class PenaltyDraws:
    """Fine-schedule steps ``t`` (B, K) and noises ``eps`` (B, K, L) for re-noising x_0."""

    t: np.ndarray
    eps: np.ndarray


@dataclass
class BatchGradient:
    grads: torch.Tensor
    diagnostics: dict = field(default_factory=dict)

    @property
    def norm(self) -> float:
        return self.diagnostics["grad_norm"]


class StaleBatchError(ValueError):
    pass


def draw_penalty(batch: Sequence[DenoisingTrajectory], k: int, fine: NoiseSchedule,
                 rng: np.random.Generator) -> PenaltyDraws:
    b, d = len(batch), batch[0].states.shape[-1]
    t = rng.integers(0, fine.n_steps, size=(b, k))
    return PenaltyDraws(t, rng.standard_normal((b, k, d)))


def _renoise(batch, draws: PenaltyDraws, fine: NoiseSchedule):
    b, k, d = draws.eps.shape
    x0 = torch.as_tensor(np.stack([tr.x0 for tr in batch]))
    ab = torch.as_tensor(fine.alpha_bar[draws.t])[..., None]
    eps = torch.as_tensor(draws.eps)
    x_t = ab.sqrt() * x0[:, None, :] + (1.0 - ab).sqrt() * eps
    tokens = [tr.condition.tokens for tr in batch for _ in range(k)]
    return x_t.reshape(b * k, d), eps.reshape(b * k, d), tokens, draws.t.reshape(-1)


def diffusion_penalty(policy: Denoiser, batch, draws: PenaltyDraws, fine: NoiseSchedule,
                      squared: bool = False) -> torch.Tensor:
    """d_b: mean over the K re-noisings of ||eps - eps_theta(x_t, c, t)||, shape (B,)."""
    x_t, eps, tokens, t = _renoise(batch, draws, fine)
    err = noise_distance(eps, policy.predict(x_t, tokens, t, fine), squared)
    return err.view(draws.t.shape).mean(1)


def kl_upper_bound(policy: Denoiser, reference: Denoiser, x_t, tokens, t, sched: NoiseSchedule) -> torch.Tensor:
    """||eps_theta - eps_pre|| per row; gradients reach the policy only."""
    x_t = torch.as_tensor(x_t)
    with torch.no_grad():
        eps_ref = reference.predict(x_t, tokens, t, sched)
    eps_pol = policy.predict(x_t, tokens, t, sched)
    if eps_pol.shape != eps_ref.shape:
        raise ValueError("policy and reference outputs differ in shape")
    return noise_distance(eps_pol, eps_ref)


def kl_penalty(policy, reference, batch, draws: PenaltyDraws, fine: NoiseSchedule) -> torch.Tensor:
    x_t, _, tokens, t = _renoise(batch, draws, fine)
    return kl_upper_bound(policy, reference, x_t, tokens, t, fine).view(draws.t.shape).mean(1)


def _rewards(batch, cfg: ObjectiveConfig) -> torch.Tensor:
    if any(tr.terminal_reward is None for tr in batch):
        raise ValueError("batch contains unscored trajectories")
    r = torch.as_tensor([tr.terminal_reward for tr in batch], dtype=torch.float64)
    return center_rewards(r, cfg.baseline)


def center_rewards(r: torch.Tensor, baseline: str) -> torch.Tensor:
    """Optionally subtract the batch mean (shrinks the expected gradient by (B-1)/B)."""
    return r - r.mean(-1, keepdim=True) if baseline == "batch_mean" else r


def _check_fresh(policy, batch):
    stale = [tr.version for tr in batch if tr.version != policy.version]
    if stale:
        raise StaleBatchError(f"trajectories from policy version {stale[0]} but policy is at {policy.version}")


def surrogate_loss(policy: Denoiser, batch: Sequence[DenoisingTrajectory], cfg: ObjectiveConfig,
                   coarse: NoiseSchedule, fine: NoiseSchedule, draws: PenaltyDraws | None = None,
                   reference: Denoiser | None = None, coefficient_penalty: torch.Tensor | None = None
                  ) -> tuple[torch.Tensor, dict]:
    """Scalar surrogate for ``cfg.algo`` plus per-term diagnostics.

    Penalties inside REINFORCE coefficients are constants.  By default they
    are the live penalties, detached; ``coefficient_penalty`` pins them to
    given values instead, which makes the surrogate an ordinary function of
    the parameters whose derivative at the pinning point is the update
    direction (the finite-difference checks rely on this).
    """
    algo = cfg.algo
    r = _rewards(batch, cfg) if algo != "OnlyDL" else None
    scored = [tr.terminal_reward for tr in batch if tr.terminal_reward is not None]
    raw = float(np.mean(scored)) if len(scored) == len(batch) else float("nan")
    needs_penalty = algo in ("RWR", "OnlyDL") or (algo in ("DPOK", "KLinR", "DLPO") and cfg.beta > 0)
    if algo in ("DPOK", "KLinR") and reference is None:
        raise ValueError(f"{algo} needs the frozen reference model")
    if needs_penalty and draws is None:
        raise ValueError(f"{algo} needs penalty draws")
    penalty = torch.zeros(len(batch))
    if needs_penalty:
        if algo in ("DPOK", "KLinR"):
            penalty = kl_penalty(policy, reference, batch, draws, fine)
        else:
            penalty = diffusion_penalty(policy, batch, draws, fine, cfg.squared_norm)

    frozen = penalty.detach() if coefficient_penalty is None else torch.as_tensor(coefficient_penalty)

    if algo == "RWR":
        coef = cfg.alpha * r
        loss = (coef * penalty).mean()
        return loss, _diag(raw, penalty, coef, loss)

    logp = trajectory_log_probs(policy, batch, coarse).sum(1)
    if algo == "OnlyDL":
        loss = (frozen * logp).mean()
        if not cfg.detach_penalty:
            loss = loss + penalty.mean()
        return loss, _diag(raw, penalty, -penalty, loss)

    coef = reward_coefficient(cfg, r, frozen)
    loss = score_function_loss(coef, logp)
    if algo == "DPOK" and cfg.beta > 0:
        loss = loss + cfg.beta * penalty.mean()
    if algo == "DLPO" and cfg.beta > 0 and not cfg.detach_penalty:
        loss = loss + cfg.beta * penalty.mean()
    return loss, _diag(raw, penalty, coef, loss)


def reward_coefficient(cfg: ObjectiveConfig, r: torch.Tensor, penalty: torch.Tensor) -> torch.Tensor:
    """Constant multiplier of each trajectory's log-probability."""
    if cfg.algo in ("DDPO", "DPOK") or cfg.beta == 0:
        return cfg.alpha * r
    return cfg.alpha * r - cfg.beta * penalty.detach()


def score_function_loss(coef: torch.Tensor, logp: torch.Tensor) -> torch.Tensor:
    """REINFORCE surrogate; its negative gradient estimates grad E[coef]."""
    return -(coef * logp).mean()


def _diag(raw: float, penalty: torch.Tensor, coef: torch.Tensor, loss: torch.Tensor) -> dict:
    return {"reward_mean": raw, "penalty_mean": float(penalty.detach().mean()), "penalty_values": penalty.detach(),
            "shaped_mean": float(coef.detach().mean()), "loss": float(loss.detach())}


def compute_gradient(policy: Denoiser, batch: Sequence[DenoisingTrajectory], cfg: ObjectiveConfig,
                     coarse: NoiseSchedule, fine: NoiseSchedule, rng: np.random.Generator | None = None,
                     reference: Denoiser | None = None, draws: PenaltyDraws | None = None,
                     check_version: bool = True) -> BatchGradient:
    """Backpropagate the surrogate and return the flat gradient with diagnostics.

    ``p.grad`` is left holding the same gradient so an optimizer can step.
    """
    if check_version and cfg.algo != "RWR":
        _check_fresh(policy, batch)
    if draws is None and rng is not None:
        draws = draw_penalty(batch, cfg.loss_guidance_steps, fine, rng)
    zero_grads(policy)
    loss, diag = surrogate_loss(policy, batch, cfg, coarse, fine, draws, reference)
    backward(policy, loss)
    g = flat_grads(policy)
    if not torch.isfinite(g).all():
        raise FloatingPointError(f"non-finite {cfg.algo} gradient")
    diag["grad_norm"] = float(torch.linalg.vector_norm(g))
    return BatchGradient(g, diag)


def _expect(cfg: ObjectiveConfig, algo: str):
    if cfg.algo != algo:
        raise ValueError(f"config is for {cfg.algo}, not {algo}")


def grad_rwr(policy, batch, cfg, coarse, fine, rng=None, draws=None) -> BatchGradient:
    _expect(cfg, "RWR")
    return compute_gradient(policy, batch, cfg, coarse, fine, rng, draws=draws)


def grad_ddpo(policy, batch, cfg, coarse, fine, rng=None, draws=None) -> BatchGradient:
    _expect(cfg, "DDPO")
    return compute_gradient(policy, batch, cfg, coarse, fine, rng, draws=draws)


def grad_dpok(policy, batch, cfg, coarse, fine, reference, rng=None, draws=None) -> BatchGradient:
    _expect(cfg, "DPOK")
    return compute_gradient(policy, batch, cfg, coarse, fine, rng, reference, draws)


def grad_klinr(policy, batch, cfg, coarse, fine, reference, rng=None, draws=None) -> BatchGradient:
    _expect(cfg, "KLinR")
    return compute_gradient(policy, batch, cfg, coarse, fine, rng, reference, draws)


def grad_dlpo(policy, batch, cfg, coarse, fine, rng=None, draws=None) -> BatchGradient:
    _expect(cfg, "DLPO")
    return compute_gradient(policy, batch, cfg, coarse, fine, rng, draws=draws)


def grad_onlydl(policy, batch, cfg, coarse, fine, rng=None, draws=None) -> BatchGradient:
    _expect(cfg, "OnlyDL")
    return compute_gradient(policy, batch, cfg, coarse, fine, rng, draws=draws)
