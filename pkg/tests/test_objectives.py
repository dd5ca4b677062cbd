import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from wavetune.diffusion import Condition, ddpm_loss, gaussian_kl, mean_from_eps
from wavetune.mdp import rollout_batch
from wavetune.model import SGD, Denoiser, analytic_gradient, freeze, init_params, trainable_copy
from wavetune.objectives import (ObjectiveConfig, StaleBatchError, compute_gradient, draw_penalty,
                                 kl_upper_bound, reward_coefficient, surrogate_loss)

from conftest import make_batch


def with_rewards(batch, values):
    return [dataclasses.replace(tr, terminal_reward=float(v)) for tr, v in zip(batch, values)]


def grad(model, batch, coarse, fine, reference=None, seed=7, **kw):
    cfg = ObjectiveConfig(**kw)
    return compute_gradient(model, batch, cfg, coarse, fine, np.random.default_rng(seed), reference)


class TestConfig:
    @pytest.mark.parametrize("bad", [{"alpha": -1.0}, {"beta": float("nan")}, {"loss_guidance_steps": 0},
                                     {"baseline": "ema"}, {"algo": "ppo"}])
    def test_rejected(self, bad):
        with pytest.raises(ValueError):
            ObjectiveConfig(**bad)

    def test_algo_names_case_insensitive(self):
        assert ObjectiveConfig(algo="onlydl").algo == "OnlyDL"


class TestRWR:
    def test_zero_rewards(self, small_model, scored_batch, coarse, fine):
        g = grad(small_model, with_rewards(scored_batch, [0] * 4), coarse, fine, algo="RWR")
        assert torch.count_nonzero(g.grads) == 0

    def test_unit_rewards_give_pretraining_gradient(self, small_model, scored_batch, coarse, fine):
        batch = with_rewards(scored_batch, [1] * 4)
        draws = draw_penalty(batch, 3, fine, np.random.default_rng(1))
        cfg = ObjectiveConfig("RWR", loss_guidance_steps=3)
        g = compute_gradient(small_model, batch, cfg, coarse, fine, draws=draws).grads

        def plain(m):
            terms = [ddpm_loss(m, tr.x0, tr.condition, int(draws.t[b, k]), draws.eps[b, k], fine)
                     for b, tr in enumerate(batch) for k in range(3)]
            return torch.stack(terms).mean()
        torch.testing.assert_close(g, analytic_gradient(small_model, plain), rtol=1e-10, atol=1e-12)

    def test_doubling_rewards_doubles_gradient(self, small_model, scored_batch, coarse, fine):
        g1 = grad(small_model, scored_batch, coarse, fine, algo="RWR").grads
        g2 = grad(small_model, with_rewards(scored_batch, [2 * t.terminal_reward for t in scored_batch]),
                  coarse, fine, algo="RWR").grads
        assert torch.equal(g2, 2 * g1)

    def test_unscored_rejected(self, small_model, small_corpus, coarse, fine):
        batch = rollout_batch(small_model, [small_corpus.conditions[0]], coarse, [0])
        with pytest.raises(ValueError, match="unscored"):
            grad(small_model, batch, coarse, fine, algo="RWR")


class TestDDPO:
    def test_equal_rewards_with_baseline(self, small_model, scored_batch, coarse, fine):
        g = grad(small_model, with_rewards(scored_batch, [3.3] * 4), coarse, fine, algo="DDPO",
                 baseline="batch_mean")
        assert torch.count_nonzero(g.grads) == 0

    @pytest.mark.parametrize("k", [2.0, 0.25])
    def test_homogeneous(self, small_model, scored_batch, coarse, fine, k):
        g1 = grad(small_model, scored_batch, coarse, fine, algo="DDPO").grads
        gk = grad(small_model, with_rewards(scored_batch, [k * t.terminal_reward for t in scored_batch]),
                  coarse, fine, algo="DDPO").grads
        torch.testing.assert_close(gk, k * g1, rtol=1e-13, atol=1e-15)

    def test_alpha_scaling(self, small_model, scored_batch, coarse, fine):
        g1 = grad(small_model, scored_batch, coarse, fine, algo="DDPO").grads
        g3 = grad(small_model, scored_batch, coarse, fine, algo="DDPO", alpha=3.0).grads
        torch.testing.assert_close(g3, 3 * g1, rtol=1e-12, atol=1e-13)

    def test_argmax_invariance(self, small_model, scored_batch, coarse, fine):
        g1 = grad(small_model, scored_batch, coarse, fine, algo="DDPO", baseline="batch_mean").grads
        shifted = with_rewards(scored_batch, [t.terminal_reward + 1.7 for t in scored_batch])
        g2 = grad(small_model, shifted, coarse, fine, algo="DDPO", baseline="batch_mean").grads
        assert float((g1 - g2).abs().max()) <= 1e-12

    def test_stale_batch_rejected(self, small_model, scored_batch, coarse, fine):
        grad(small_model, scored_batch, coarse, fine, algo="DDPO")
        SGD(small_model, 1e-3).step()
        with pytest.raises(StaleBatchError):
            grad(small_model, scored_batch, coarse, fine, algo="DDPO")

    def test_grads_left_for_optimizer(self, small_model, scored_batch, coarse, fine):
        g = grad(small_model, scored_batch, coarse, fine, algo="DDPO")
        left = torch.cat([p.grad.reshape(-1) for p in small_model.parameters()])
        assert torch.equal(left, g.grads) and g.norm == pytest.approx(float(g.grads.norm()))


@pytest.mark.parametrize("algo", ["DPOK", "KLinR", "DLPO"])
def test_zero_beta_reduces_to_ddpo_bitwise(algo, small_model, small_reference, scored_batch, coarse, fine):
    ref = grad(small_model, scored_batch, coarse, fine, algo="DDPO", alpha=1.5).grads
    g = grad(small_model, scored_batch, coarse, fine, small_reference, algo=algo, alpha=1.5, beta=0.0).grads
    assert torch.equal(g, ref)


class TestKL:
    def test_identical_models(self, small_model, small_reference, fine):
        x = torch.as_tensor(np.random.default_rng(0).standard_normal((3, 64)))
        v = kl_upper_bound(small_model, small_reference, x, [(0,), (1, 2), (3,)], np.array([5, 500, 999]), fine)
        assert torch.count_nonzero(v) == 0

    def test_reference_grads_stay_zero(self, small_model, fine):
        ref = freeze(init_params(9, length=64, hidden=(24, 24)))
        x = torch.as_tensor(np.random.default_rng(0).standard_normal((2, 64)))
        kl_upper_bound(small_model, ref, x, [(0,), (1,)], np.array([5, 50]), fine).sum().backward()
        assert all(p.grad is None for p in ref.parameters())
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in small_model.parameters())

    def test_exact_gaussian_kl_is_increasing_in_bound(self, small_model, fine):
        rng = np.random.default_rng(4)
        x = torch.as_tensor(rng.standard_normal((1, 64)))
        t, var = 300, fine.reverse_variance[300]
        pairs = []
        for seed in range(6):
            other = freeze(init_params(seed + 20, length=64, hidden=(24, 24)))
            with torch.no_grad():
                bound = float(kl_upper_bound(small_model, other, x, [(2,)], t, fine))
                mu_p = mean_from_eps(x, small_model.predict(x, [(2,)], t, fine), t, fine)
                mu_q = mean_from_eps(x, other.predict(x, [(2,)], t, fine), t, fine)
                kl = float(gaussian_kl(mu_p, var, mu_q, var))
            c = fine.beta[t] / np.sqrt(1 - fine.alpha_bar[t]) / np.sqrt(fine.alpha[t])
            assert kl == pytest.approx(c ** 2 * bound ** 2 / (2 * var), rel=1e-10)
            pairs.append((bound, kl))
        pairs.sort()
        assert all(b[1] > a[1] for a, b in zip(pairs, pairs[1:]))

    def test_shape_mismatch(self, small_model, fine):
        other = freeze(init_params(1, length=32, hidden=(8,)))
        with pytest.raises(ValueError):
            kl_upper_bound(small_model, other, torch.zeros(1, 64), [(0,)], 3, fine)


class TestDPOK:
    def test_missing_reference(self, small_model, scored_batch, coarse, fine):
        with pytest.raises(ValueError, match="reference"):
            grad(small_model, scored_batch, coarse, fine, algo="DPOK")

    def test_alpha_zero_at_reference(self, small_model, small_reference, scored_batch, coarse, fine):
        g = grad(small_model, scored_batch, coarse, fine, small_reference, algo="DPOK", alpha=0.0, beta=1.0)
        assert torch.count_nonzero(g.grads) == 0

    def test_pure_kl_descent_is_monotone(self, small_reference, scored_batch, coarse, fine):
        policy = trainable_copy(init_params(11, length=64, hidden=(24, 24)))
        opt = SGD(policy, 1e-2, momentum=0.0)
        draws = draw_penalty(scored_batch, 4, fine, np.random.default_rng(3))
        cfg = ObjectiveConfig("DPOK", alpha=0.0, beta=1.0, loss_guidance_steps=4)
        curve = []
        for _ in range(50):
            g = compute_gradient(policy, scored_batch, cfg, coarse, fine, reference=small_reference, draws=draws,
                                 check_version=False)
            curve.append(g.diagnostics["penalty_mean"])
            opt.step()
        assert all(b < a for a, b in zip(curve, curve[1:]))
        assert curve[-1] < 0.8 * curve[0]


class TestKLinR:
    def test_reference_policy_equals_ddpo(self, small_model, small_reference, scored_batch, coarse, fine):
        g = grad(small_model, scored_batch, coarse, fine, small_reference, algo="KLinR", beta=2.0)
        ref = grad(small_model, scored_batch, coarse, fine, algo="DDPO")
        assert g.diagnostics["penalty_mean"] == 0.0 and torch.equal(g.grads, ref.grads)

    def test_shaped_reward_bookkeeping(self, small_model, scored_batch, coarse, fine):
        other = freeze(init_params(5, length=64, hidden=(24, 24)))
        g = grad(small_model, scored_batch, coarse, fine, other, algo="KLinR", alpha=1.3, beta=0.4)
        raw = np.array([t.terminal_reward for t in scored_batch])
        pen = g.diagnostics["penalty_values"].numpy()
        assert pen.min() > 0
        assert g.diagnostics["shaped_mean"] == pytest.approx(float(np.mean(1.3 * raw - 0.4 * pen)), abs=1e-12)
        assert g.diagnostics["reward_mean"] == pytest.approx(raw.mean(), abs=1e-12)


class PerfectDenoiser(Denoiser):
    """Returns the exact re-noising noise on the fine schedule for a registered set of clean waveforms."""

    def __init__(self, base: Denoiser, x0_rows: torch.Tensor):
        super().__init__(base.length, base.vocab_size, base.hidden, base.time_dim, base.cond_dim)
        self.load_state_dict(base.state_dict())
        self.x0_rows, self.exact = x0_rows, False

    def predict(self, x_t, tokens, t, sched):
        out = super().predict(x_t, tokens, t, sched)
        if not self.exact or sched.name != "fine":
            return out
        ab = torch.as_tensor(sched.alpha_bar[np.asarray(t)])[:, None]
        return (x_t - ab.sqrt() * self.x0_rows) / (1 - ab).sqrt() + 0.0 * out


class TestDLPO:
    def _perfect(self, small_model, batch, k):
        rows = torch.as_tensor(np.stack([tr.x0 for tr in batch for _ in range(k)]))
        return PerfectDenoiser(small_model, rows)

    def test_perfect_denoiser_gives_scaled_ddpo(self, small_model, scored_batch, coarse, fine):
        model = self._perfect(small_model, scored_batch, 10)
        ddpo = grad(model, scored_batch, coarse, fine, algo="DDPO").grads
        model.exact = True
        g = grad(model, scored_batch, coarse, fine, algo="DLPO", alpha=2.0, beta=3.0)
        assert g.diagnostics["penalty_mean"] < 1e-12
        torch.testing.assert_close(g.grads, 2.0 * ddpo, rtol=1e-9, atol=1e-12)

    def test_onlydl_with_perfect_denoiser_is_zero(self, small_model, scored_batch, coarse, fine):
        model = self._perfect(small_model, scored_batch, 10)
        model.exact = True
        g = grad(model, scored_batch, coarse, fine, algo="OnlyDL")
        assert abs(g.diagnostics["loss"]) < 1e-10 and float(g.grads.abs().max()) < 1e-10

    @pytest.mark.parametrize("detach", [False, True])
    def test_onlydl_equals_dlpo_alpha_zero(self, small_model, scored_batch, coarse, fine, detach):
        a = grad(small_model, scored_batch, coarse, fine, algo="OnlyDL", detach_penalty=detach).grads
        b = grad(small_model, scored_batch, coarse, fine, algo="DLPO", alpha=0.0, beta=1.0,
                 detach_penalty=detach).grads
        torch.testing.assert_close(a, b, rtol=1e-12, atol=1e-14)

    def test_onlydl_needs_no_reward(self, small_model, small_corpus, coarse, fine):
        batch = rollout_batch(small_model, [small_corpus.conditions[3]] * 2, coarse, [0, 1])
        g = grad(small_model, batch, coarse, fine, algo="OnlyDL")
        assert np.isnan(g.diagnostics["reward_mean"]) and g.norm > 0

    def test_detach_changes_only_the_penalty_channel(self, small_model, scored_batch, coarse, fine):
        live = grad(small_model, scored_batch, coarse, fine, algo="DLPO").grads
        fixed = grad(small_model, scored_batch, coarse, fine, algo="DLPO", detach_penalty=True).grads
        draws = draw_penalty(scored_batch, 10, fine, np.random.default_rng(7))
        from wavetune.objectives import diffusion_penalty
        channel = analytic_gradient(small_model, lambda m: diffusion_penalty(m, scored_batch, draws, fine).mean())
        torch.testing.assert_close(live - fixed, channel, rtol=1e-9, atol=1e-12)

    def test_loss_guidance_steps_average(self, small_model, scored_batch, fine):
        from wavetune.objectives import diffusion_penalty
        draws = draw_penalty(scored_batch, 5, fine, np.random.default_rng(2))
        with torch.no_grad():
            full = diffusion_penalty(small_model, scored_batch, draws, fine)
            parts = [diffusion_penalty(small_model, scored_batch,
                                       type(draws)(draws.t[:, [k]], draws.eps[:, [k]]), fine) for k in range(5)]
        torch.testing.assert_close(full, torch.stack(parts).mean(0), rtol=1e-13, atol=0)


@settings(max_examples=60, deadline=None)
@given(r=st.floats(1, 5), pen=st.floats(0, 50), b1=st.floats(0, 10), b2=st.floats(0, 10),
       algo=st.sampled_from(["KLinR", "DLPO"]))
def test_shaped_coefficient_is_monotone_in_beta(r, pen, b1, b2, algo):
    lo, hi = sorted((b1, b2))
    c = [float(reward_coefficient(ObjectiveConfig(algo, beta=b), torch.tensor([r]), torch.tensor([pen])))
         for b in (lo, hi)]
    assert c[1] <= c[0]
