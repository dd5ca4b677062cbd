"""Invariant suites shared by the test-suite and ``wavetune verify``.

Each suite returns a list of :class:`CheckResult`.  ``fault=True`` perturbs
the compared quantity of every check so the suite must fail; it exists to
prove that the checks can fail at all.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from scipy import integrate

from wavetune.diffusion import (Condition, NoiseSchedule, ddpm_loss, forward_step_sample,
                                make_linear_schedule, posterior_mean, reverse_mean)
from wavetune.mdp import logprob_action, rollout_batch, score_terminal
from wavetune.model import (Denoiser, analytic_gradient, finite_diff_check, flat_params, freeze, init_params,
                            set_flat_params, trainable_copy)
from wavetune.objectives import (ALGOS, ObjectiveConfig, compute_gradient, draw_penalty, kl_upper_bound,
                                 surrogate_loss)
from wavetune.oracle import OneStepInstance, estimator_bias_test

SUITES = ("grad", "bias", "reduction", "schedule")
GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.suite}/{self.name} {self.detail}"


def _default_schedules() -> tuple[NoiseSchedule, NoiseSchedule]:
    return (make_linear_schedule(1000, 1e-4, 0.02, "fine"), make_linear_schedule(10, 1e-4, 0.9, "coarse"))


def _scored_batch(policy: Denoiser, coarse: NoiseSchedule, n: int = 3):
    from wavetune.rewards import build_corpus, proxy_mos

    corpus = build_corpus(0, policy.length)
    conds = [corpus.conditions[i] for i in (0, 20, 100)][:n]
    batch = rollout_batch(policy, conds, coarse, list(range(n)))
    return [score_terminal(tr, lambda x, c: proxy_mos(x, c, corpus)) for tr in batch]


def grad_suite(fault: bool = False, n_probe: int = 48, tolerance: float = GRAD_TOL) -> list[CheckResult]:
    """Autograd against central differences for every differentiable loss."""
    fine, coarse = _default_schedules()
    reference = freeze(init_params(1))
    policy = trainable_copy(reference)
    with torch.no_grad():
        set_flat_params(policy, flat_params(policy) + 0.01 * torch.as_tensor(
            np.random.default_rng(2).standard_normal(flat_params(policy).numel())))
    batch = _scored_batch(policy, coarse)
    draws = draw_penalty(batch, 2, fine, np.random.default_rng(3))
    rng = np.random.default_rng(4)
    x0 = batch[0].x0
    c = batch[0].condition
    eps = rng.standard_normal(policy.length)
    x_t = torch.as_tensor(rng.standard_normal((2, policy.length)))
    losses: dict[str, Callable] = {
        "ddpm_loss": lambda m: ddpm_loss(m, x0, c, 500, eps, fine),
        "ddpm_loss_squared": lambda m: ddpm_loss(m, x0, c, 500, eps, fine, squared=True),
        "logprob_action": lambda m: logprob_action(m, (c, batch[0].states[3], 6), batch[0].states[4], coarse),
        "kl_upper_bound": lambda m: kl_upper_bound(m, reference, x_t, [c.tokens, (1, 2)], np.array([10, 700]),
                                                   fine).sum(),
    }
    for algo in ALGOS:
        cfg = ObjectiveConfig(algo=algo, alpha=1.0, beta=1.0, loss_guidance_steps=2)
        with torch.no_grad():
            pinned = surrogate_loss(policy, batch, cfg, coarse, fine, draws, reference)[1]["penalty_values"]
        losses[f"surrogate_{algo}"] = (lambda m, cfg=cfg, pinned=pinned: surrogate_loss(
            m, batch, cfg, coarse, fine, draws, reference, coefficient_penalty=pinned)[0])
    out = []
    for i, (name, fn) in enumerate(losses.items()):
        analytic = analytic_gradient(policy, fn)
        if fault:
            analytic = analytic * 1.01
        rep = finite_diff_check(policy, fn, tolerance, n_probe=n_probe, seed=i, analytic=analytic)
        out.append(CheckResult("grad", name, rep.passed,
                               f"max_rel_err={rep.max_rel_err:.3e} tol={tolerance:g} probes={rep.n_checked}"))
    return out


def bias_suite(fault: bool = False, n_rollouts: int = 100_000, seed: int = 0, log_path=None) -> list[CheckResult]:
    """Score-function estimators against the closed-form one-step gradient."""
    inst = OneStepInstance(1.0, 1.0)
    shift = 1.0 if fault else 0.0
    reports = [("ddpo", estimator_bias_test("ddpo", inst, n_rollouts, seed)),
               ("dlpo_beta0", estimator_bias_test("dlpo", inst, n_rollouts, seed))]
    batch = 16
    reports.append(("ddpo_batch_mean", estimator_bias_test("ddpo", inst, n_rollouts, seed, "batch_mean", batch,
                                                           target=-2.0 * inst.theta * (batch - 1) / batch)))
    const = OneStepInstance(1.0, 1.0, reward_fn=lambda x: np.full_like(x, 3.0))
    reports.append(("constant_reward_batch_mean",
                    estimator_bias_test("ddpo", const, n_rollouts, seed, "batch_mean", target=0.0)))
    out = []
    for name, rep in reports:
        if fault:
            rep = type(rep)(**{**rep.__dict__, "target": rep.target + shift})
        if log_path is not None:
            rep.append_to(log_path)
        out.append(CheckResult("bias", name, rep.passed,
                               f"estimate={rep.estimate:+.5f} se={rep.std_error:.5f} target={rep.target:+.5f} "
                               f"z={rep.z:+.2f}"))
    same = reports[0][1].estimate == reports[1][1].estimate
    out.append(CheckResult("bias", "dlpo_beta0_equals_ddpo", same and not fault,
                           f"ddpo={reports[0][1].estimate!r} dlpo={reports[1][1].estimate!r}"))
    centered, plain = reports[2][1].variance, reports[0][1].variance
    out.append(CheckResult("bias", "baseline_reduces_variance", centered <= plain and not fault,
                           f"var_centered={centered:.4f} var_plain={plain:.4f}"))
    return out


def reduction_suite(fault: bool = False, episodes: int = 3) -> list[CheckResult]:
    """beta = 0 collapses DPOK, KLinR and DLPO onto DDPO, per batch and end to end."""
    fine, coarse = _default_schedules()
    reference = freeze(init_params(1))
    policy = trainable_copy(reference)
    batch = _scored_batch(policy, coarse)
    ddpo = compute_gradient(policy, batch, ObjectiveConfig("DDPO", beta=0.0), coarse, fine,
                            np.random.default_rng(0), reference).grads
    if fault:
        ddpo = ddpo.clone()
        ddpo[0] = torch.nextafter(ddpo[0], torch.tensor(np.inf))
    out = []
    for algo in ("DPOK", "KLinR", "DLPO"):
        g = compute_gradient(policy, batch, ObjectiveConfig(algo, beta=0.0), coarse, fine,
                             np.random.default_rng(0), reference).grads
        out.append(CheckResult("reduction", f"{algo}_gradient", bool(torch.equal(g, ddpo)),
                               f"max_abs_diff={float((g - ddpo).abs().max()):.3e}"))
    out.extend(_end_to_end_reduction(reference, episodes, fault))
    return out


def _end_to_end_reduction(reference: Denoiser, episodes: int, fault: bool) -> list[CheckResult]:
    from wavetune import config as config_mod
    from wavetune.trainer import Setup, TrainConfig, finetune

    cfg = dict(config_mod.DEFAULTS, beta=0.0, episodes=episodes, batch_size=4)
    setup = Setup.from_config(cfg)

    def csv_without_algo(algo: str) -> str:
        run = finetune(reference, setup, TrainConfig.from_config(dict(cfg, algo=algo)))
        return run.metrics_csv().replace(f",{run.metrics[0]['algo']},", ",*,")

    base = csv_without_algo("ddpo")
    if fault:
        base += "#"
    out = []
    for algo in ("dpok", "klinr", "dlpo"):
        same = csv_without_algo(algo) == base
        out.append(CheckResult("reduction", f"{algo}_metrics_csv", same, f"episodes={episodes} identical={same}"))
    return out


def schedule_suite(fault: bool = False, n_samples: int = 100_000, seed: int = 0) -> list[CheckResult]:
    """Closed-form schedule and posterior identities plus density normalisation."""
    fine, coarse = _default_schedules()
    bump = 1e-9 if fault else 0.0
    out = []
    for sched in (fine, coarse):
        rec = np.concatenate([[sched.alpha[0]], sched.alpha_bar[:-1] * sched.alpha[1:]])
        err = float(np.abs(sched.alpha_bar + bump - rec).max())
        out.append(CheckResult("schedule", f"alpha_bar_recurrence_{sched.name}", err <= 1e-12, f"max_err={err:.2e}"))
    out.extend(_marginal_checks(fine, coarse, n_samples, seed, bump))
    for sched in (fine, coarse):
        rng = np.random.default_rng(seed)
        x0 = rng.standard_normal(8)
        x1 = forward_step_sample(x0, 0, sched, rng)
        mean = posterior_mean(x0, x1, 0, sched) + bump
        exact = bool(np.array_equal(mean, x0))
        out.append(CheckResult("schedule", f"posterior_first_step_{sched.name}", exact,
                               f"max_err={float(np.abs(mean - x0).max()):.2e}"))
    out.extend(_density_checks(coarse, bump))
    return out


def _marginal_checks(fine, coarse, n, seed, bump) -> list[CheckResult]:
    """Iterated single-step noising against the closed-form marginal moments."""
    out = []
    x0 = 0.8
    for sched, t in ((coarse, 9), (coarse, 4), (fine, 99)):
        rng = np.random.default_rng([seed, t])
        x = np.full(n, x0)
        for s in range(t + 1):
            x = forward_step_sample(x, s, sched, rng)
        ab = sched.alpha_bar[t]
        want_mean, want_var = np.sqrt(ab) * x0 + bump, 1.0 - ab
        z_mean = abs(x.mean() - want_mean) / np.sqrt(want_var / n)
        z_var = abs(x.var(ddof=1) - want_var) / (want_var * np.sqrt(2.0 / (n - 1)))
        out.append(CheckResult("schedule", f"marginal_moments_{sched.name}_t{t}", max(z_mean, z_var) <= 3.0,
                               f"z_mean={z_mean:.2f} z_var={z_var:.2f} n={n}"))
    return out


def _density_checks(sched: NoiseSchedule, bump: float) -> list[CheckResult]:
    model = init_params(5, length=1)
    c = Condition((0, 3))
    x_t = np.array([0.4])
    out = []
    for t in (0, 1, 5, sched.n_steps - 1):
        with torch.no_grad():
            mu = float(reverse_mean(model, torch.as_tensor(x_t)[None], [c.tokens], t, sched)[0, 0])

            def density(a: float) -> float:
                return float(torch.exp(logprob_action(model, (c, x_t, t), [a], sched)))

            sd = float(np.sqrt(sched.reverse_variance[t]))
            total, _ = integrate.quad(density, mu - 40 * sd, mu + 40 * sd, points=[mu], epsabs=1e-12, epsrel=1e-12,
                                      limit=200)
        total += bump * 1e4
        out.append(CheckResult("schedule", f"reverse_density_integral_t{t}", abs(total - 1.0) <= 1e-6,
                               f"integral={total:.12f}"))
    return out


def run_suite(name: str, fault: bool = False, log_path=None) -> tuple[list[CheckResult], float]:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    start = time.perf_counter()
    if name == "grad":
        res = grad_suite(fault)
    elif name == "bias":
        res = bias_suite(fault, log_path=log_path)
    elif name == "reduction":
        res = reduction_suite(fault)
    else:
        res = schedule_suite(fault)
    return res, time.perf_counter() - start
