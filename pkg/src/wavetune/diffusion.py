"""Gaussian diffusion math on 1-D waveforms.

Forward process, closed form for any step t::

    q(x_t | x_0) = N(sqrt(abar_t) x_0, (1 - abar_t) I)

Reverse transitions are Gaussian with mean derived from the noise
prediction and a fixed, schedule-determined variance.  Step indices are
0-based: ``t = 0`` is the step closest to clean data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np
import torch

if TYPE_CHECKING:
    from wavetune.model import Denoiser

LOG_2PI = math.log(2.0 * math.pi)


class NonFiniteError(FloatingPointError):
    """A waveform or model output contained NaN or Inf."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances and their cumulative products."""

    n_steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    name: str = "schedule"

    @property
    def alpha_bar_prev(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bar[:-1]])

    @property
    def posterior_variance(self) -> np.ndarray:
        """beta_tilde_t; entry 0 is exactly zero."""
        return (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar) * self.beta

    @property
    def reverse_variance(self) -> np.ndarray:
        """Variance of p_theta(x_{t-1} | x_t).

        beta_tilde except at t = 0, where beta_tilde vanishes; there the
        value of step 1 is reused (or beta_0 for a one-step schedule).
        """
        var = self.posterior_variance.copy()
        var[0] = var[1] if self.n_steps > 1 else self.beta[0]
        return var

    def check_step(self, t: int) -> int:
        if not 0 <= int(t) < self.n_steps:
            raise IndexError(f"step {t} outside [0, {self.n_steps}) for {self.name}")
        return int(t)


def make_linear_schedule(n_steps: int, beta_start: float, beta_end: float,
                         name: str = "schedule") -> NoiseSchedule:
    if isinstance(n_steps, bool) or int(n_steps) != n_steps or n_steps < 1:
        raise ValueError(f"n_steps must be a positive integer, got {n_steps!r}")
    if not (math.isfinite(beta_start) and math.isfinite(beta_end)):
        raise ValueError("beta endpoints must be finite")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    n_steps = int(n_steps)
    if n_steps == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(beta_start, beta_end, n_steps, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(n_steps, beta, alpha, np.cumprod(alpha), name)


@dataclass(frozen=True)
class Condition:
    """Token sequence that conditions generation; order carries no meaning."""

    tokens: tuple[int, ...]
    id: int = -1

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(k) for k in self.tokens))
        if not 1 <= len(self.tokens) <= 4:
            raise ValueError(f"condition needs 1-4 tokens, got {len(self.tokens)}")

    def check_vocab(self, vocab_size: int) -> None:
        for k in self.tokens:
            if not 0 <= k < vocab_size:
                raise ValueError(f"token {k} outside vocabulary of size {vocab_size}")


@dataclass
class DenoisingTrajectory:
    """One reverse-chain rollout, stored in diffusion-step order.

    ``states[0]`` is x_T and ``states[-1]`` is x_0; ``log_probs[i]`` is the
    log-density of ``states[i + 1]`` given ``states[i]``, whose diffusion
    step index is ``steps[i]`` (descending T-1 ... 0).
    """

    condition: Condition
    states: np.ndarray
    log_probs: np.ndarray
    seed: int
    terminal_reward: float | None = None
    eval_score: float | None = None
    version: int = 0
    steps: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.steps is None:
            self.steps = np.arange(len(self.log_probs) - 1, -1, -1)

    @property
    def n_steps(self) -> int:
        return len(self.log_probs)

    @property
    def x0(self) -> np.ndarray:
        return self.states[-1]


def check_finite(x, what: str = "waveform") -> None:
    ok = torch.isfinite(x).all().item() if torch.is_tensor(x) else np.isfinite(x).all()
    if not ok:
        raise NonFiniteError(f"non-finite values in {what}")


def _as_tensor(x) -> torch.Tensor:
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def forward_marginal_sample(x0: np.ndarray, t: int, sched: NoiseSchedule,
                            rng: np.random.Generator, eps: np.ndarray | None = None):
    """Draw x_t ~ q(x_t | x_0); returns ``(x_t, eps)`` with the noise used."""
    t = sched.check_step(t)
    x0 = np.asarray(x0, dtype=np.float64)
    check_finite(x0, "x0")
    if eps is None:
        eps = rng.standard_normal(x0.shape)
    ab = sched.alpha_bar[t]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps, eps


def forward_step_sample(x_prev: np.ndarray, t: int, sched: NoiseSchedule,
                        rng: np.random.Generator) -> np.ndarray:
    """One step of q(x_t | x_{t-1})."""
    t = sched.check_step(t)
    noise = rng.standard_normal(np.shape(x_prev))
    return math.sqrt(sched.alpha[t]) * np.asarray(x_prev) + math.sqrt(sched.beta[t]) * noise


def posterior_coefficients(t: int, sched: NoiseSchedule) -> tuple[float, float]:
    """Coefficients (on x0, on x_t) of the forward-process posterior mean."""
    if t == 0:
        # abar_prev = 1: the posterior mean is x0 itself; avoid 1 - (1 - beta) rounding
        return 1.0, 0.0
    ab = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar_prev[t]
    c0 = math.sqrt(ab_prev) * sched.beta[t] / (1.0 - ab)
    ct = math.sqrt(sched.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab)
    return c0, ct


def posterior_mean(x0, x_t, t: int, sched: NoiseSchedule):
    t = sched.check_step(t)
    if np.shape(x0) != np.shape(x_t):
        raise ValueError(f"length mismatch: {np.shape(x0)} vs {np.shape(x_t)}")
    c0, ct = posterior_coefficients(t, sched)
    return c0 * x0 + ct * x_t


def mean_from_eps(x_t: torch.Tensor, eps_hat: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """mu_theta = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t).

    ``t`` may be an int or an integer array of per-row steps.
    """
    t = np.asarray(t)
    coef = torch.as_tensor(sched.beta[t] / np.sqrt(1.0 - sched.alpha_bar[t]))
    inv_sqrt_alpha = torch.as_tensor(1.0 / np.sqrt(sched.alpha[t]))
    if t.ndim:
        coef, inv_sqrt_alpha = coef[:, None], inv_sqrt_alpha[:, None]
    return (x_t - coef * eps_hat) * inv_sqrt_alpha


def gaussian_log_prob(a: torch.Tensor, mean: torch.Tensor, var) -> torch.Tensor:
    """Log-density of isotropic Gaussians, summed over the last axis."""
    var = torch.as_tensor(np.asarray(var, dtype=np.float64))
    d = a.shape[-1]
    return -0.5 * d * (LOG_2PI + torch.log(var)) - ((a - mean) ** 2).sum(-1) / (2.0 * var)


def reverse_mean(model: "Denoiser", x_t, tokens, t, sched: NoiseSchedule) -> torch.Tensor:
    eps_hat = model.predict(_as_tensor(x_t), tokens, t, sched)
    return mean_from_eps(_as_tensor(x_t), eps_hat, t, sched)


def reverse_step(model: "Denoiser", x_t, c: Condition, t: int, sched: NoiseSchedule,
                 rng: np.random.Generator, noise: np.ndarray | None = None):
    """Sample x_{t-1} ~ p_theta(. | x_t, c); returns ``(x_prev, log_prob)``.

    At ``t = 0`` the mean is emitted without noise.
    """
    t = sched.check_step(t)
    x = _as_tensor(x_t)
    with torch.no_grad():
        try:
            mu = reverse_mean(model, x[None], [c.tokens], t, sched)[0]
        except NonFiniteError as err:
            raise NonFiniteError(f"step {t}: {err}") from None
        var = sched.reverse_variance[t]
        if t == 0:
            x_prev = mu
        else:
            if noise is None:
                noise = rng.standard_normal(x.shape[-1])
            x_prev = mu + math.sqrt(var) * torch.as_tensor(noise)
        lp = gaussian_log_prob(x_prev, mu, var)
    return x_prev.numpy(), float(lp)


def ddpm_loss(model: "Denoiser", x0, c: Condition, t: int, eps, sched: NoiseSchedule,
              squared: bool = False) -> torch.Tensor:
    """|| eps - eps_theta(x_t, c, t) ||_2 for x_t built from (x0, eps)."""
    t = sched.check_step(t)
    x0, eps = _as_tensor(x0), _as_tensor(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} does not match x0 {tuple(x0.shape)}")
    ab = sched.alpha_bar[t]
    x_t = math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps
    eps_hat = model.predict(x_t[None], [c.tokens], t, sched)[0]
    if eps_hat.shape != eps.shape:
        raise ValueError("model output length differs from eps")
    return noise_distance(eps, eps_hat, squared)


def noise_distance(eps: torch.Tensor, eps_hat: torch.Tensor, squared: bool = False) -> torch.Tensor:
    sq = ((eps - eps_hat) ** 2).sum(-1)
    if squared:
        return sq
    # sqrt has an infinite derivative at 0: exact zeros get value 0 and gradient 0
    return torch.where(sq > 0, torch.sqrt(sq.clamp_min(1e-300)), torch.zeros_like(sq))


def gaussian_kl(mean_q, var_q, mean_p, var_p) -> torch.Tensor:
    """KL(N(mean_q, var_q I) || N(mean_p, var_p I)), summed over the last axis."""
    d = mean_q.shape[-1]
    return 0.5 * (d * (math.log(var_p / var_q) + var_q / var_p - 1.0)
                  + ((mean_q - mean_p) ** 2).sum(-1) / var_p)


def elbo_terms(model: "Denoiser", x0, c: Condition, sched: NoiseSchedule,
               rng: np.random.Generator, n_samples: int = 1) -> dict:
    """Per-term Monte Carlo estimates of the negative variational bound.

    Returns ``prior`` (scalar), ``diffusion`` (one array per step t >= 1,
    each of length ``n_samples``) and ``recon`` (array).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    check_finite(x0, "x0")
    d = x0.shape[-1]
    n = sched.n_steps
    x0_t = torch.as_tensor(np.broadcast_to(x0, (n_samples, d)).copy())
    tokens = [c.tokens] * n_samples
    ab_last = sched.alpha_bar[-1]
    prior = gaussian_kl(math.sqrt(ab_last) * torch.as_tensor(x0)[None], 1.0 - ab_last,
                        torch.zeros(1, d), 1.0)[0]
    diffusion = []
    with torch.no_grad():
        for t in range(1, n):
            x_t, _ = forward_marginal_sample(x0_t.numpy(), t, sched, rng,
                                             eps=rng.standard_normal((n_samples, d)))
            x_t = torch.as_tensor(x_t)
            mu_q = posterior_mean(x0_t, x_t, t, sched)
            mu_p = reverse_mean(model, x_t, tokens, t, sched)
            var = sched.posterior_variance[t]
            term = gaussian_kl(mu_q, var, mu_p, sched.reverse_variance[t])
            check_finite(term, f"bound term at step {t}")
            diffusion.append(term.numpy())
        x_1, _ = forward_marginal_sample(x0_t.numpy(), 0, sched, rng,
                                         eps=rng.standard_normal((n_samples, d)))
        mu_p = reverse_mean(model, torch.as_tensor(x_1), tokens, 0, sched)
        recon = -gaussian_log_prob(x0_t, mu_p, sched.reverse_variance[0])
        check_finite(recon, "reconstruction term")
    return {"prior": float(prior), "diffusion": diffusion, "recon": recon.numpy()}


def elbo_samples(model, x0, c, sched, rng, n_samples: int = 1) -> np.ndarray:
    terms = elbo_terms(model, x0, c, sched, rng, n_samples)
    total = terms["prior"] + terms["recon"]
    for term in terms["diffusion"]:
        total = total + term
    return total


def elbo_bound(model, x0, c, sched, rng, n_samples: int = 1) -> float:
    """Monte Carlo estimate of the negative ELBO (an upper bound on -log p)."""
    return float(np.mean(elbo_samples(model, x0, c, sched, rng, n_samples)))


def sample_trajectory(model: "Denoiser", c: Condition, sched: NoiseSchedule,
                      rng: np.random.Generator | int) -> DenoisingTrajectory:
    """Run the full reverse chain from x_T ~ N(0, I)."""
    seed = rng if isinstance(rng, (int, np.integer)) else -1
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    return sample_batch(model, [c], sched, [rng], seeds=[seed])[0]


def sample_batch(model: "Denoiser", conditions: Sequence[Condition], sched: NoiseSchedule,
                 rngs: Sequence[np.random.Generator], seeds: Sequence[int] | None = None,
                 version: int = 0) -> list[DenoisingTrajectory]:
    """Roll out one trajectory per condition, batched through the network.

    Each trajectory draws its noise only from its own generator, so a
    trajectory does not depend on what else is in the batch.
    """
    if len(conditions) != len(rngs):
        raise ValueError("need one generator per condition")
    b, d = len(conditions), model.length
    n = sched.n_steps
    tokens = [c.tokens for c in conditions]
    states = np.empty((b, n + 1, d))
    log_probs = np.empty((b, n))
    x = torch.as_tensor(np.stack([r.standard_normal(d) for r in rngs]))
    states[:, 0] = x.numpy()
    with torch.no_grad():
        for i, t in enumerate(range(n - 1, -1, -1)):
            try:
                mu = reverse_mean(model, x, tokens, t, sched)
            except NonFiniteError as err:
                raise NonFiniteError(f"step {t}: {err}") from None
            var = sched.reverse_variance[t]
            if t == 0:
                x = mu
            else:
                noise = np.stack([r.standard_normal(d) for r in rngs])
                x = mu + math.sqrt(var) * torch.as_tensor(noise)
            check_finite(x, f"sample at step {t}")
            log_probs[:, i] = gaussian_log_prob(x, mu, var).numpy()
            states[:, i + 1] = x.numpy()
    seeds = list(seeds) if seeds is not None else [-1] * b
    return [DenoisingTrajectory(conditions[j], states[j], log_probs[j], seeds[j], version=version)
            for j in range(b)]
