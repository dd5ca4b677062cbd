import math

import numpy as np
import pytest
import torch

from wavetune.diffusion import Condition, NonFiniteError, ddpm_loss, make_linear_schedule, sample_trajectory
from wavetune.model import (SGD, Denoiser, DivergenceError, GradReport, analytic_gradient, backward,
                            finite_diff_check, flat_grads, flat_params, init_params, predict_eps, pretrain,
                            set_flat_params, zero_grads)
from wavetune.rewards import spectral_distance, template


def test_init_is_deterministic():
    a, b = init_params(11, length=32, hidden=(16,)), init_params(11, length=32, hidden=(16,))
    assert torch.equal(flat_params(a), flat_params(b))
    assert not torch.equal(flat_params(a), flat_params(init_params(12, length=32, hidden=(16,))))


@pytest.mark.parametrize("hidden", [(0,), (16, 0)])
def test_zero_width_rejected(hidden):
    with pytest.raises(ValueError):
        init_params(0, length=32, hidden=hidden)


def test_initial_output_spread_matches_fan_in_formula():
    # a U(-1/sqrt(n), 1/sqrt(n)) layer applied to a vector of ones has variance (n + 1) / (3 n)
    pre = []
    for seed in range(20):
        m = init_params(seed, length=64, hidden=(128,))
        layer = m.layers[0]
        with torch.no_grad():
            pre.append(layer(torch.ones(1, layer.in_features))[0].numpy())
    z = np.concatenate(pre)
    n_in = m.layers[0].in_features
    want = math.sqrt((n_in + 1) / (3 * n_in))
    assert abs(z.std(ddof=1) - want) <= 3 * want / math.sqrt(2 * (z.size - 1))


def test_zero_parameters_output_final_bias(coarse):
    m = Denoiser(length=32, hidden=(8, 8))
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    out = predict_eps(m, np.ones(32), Condition((1,)), 3, coarse)
    assert not out.any()


def test_token_order_irrelevant(coarse, small_model):
    x = np.random.default_rng(0).standard_normal(small_model.length)
    a = predict_eps(small_model, x, Condition((1, 5, 2)), 4, coarse)
    b = predict_eps(small_model, x, Condition((5, 2, 1)), 4, coarse)
    np.testing.assert_array_equal(a, b)


def test_rejects_out_of_range_step_and_token(coarse, small_model):
    with pytest.raises(IndexError):
        predict_eps(small_model, np.zeros(small_model.length), Condition((1,)), 10, coarse)
    with pytest.raises(ValueError):
        predict_eps(small_model, np.zeros(small_model.length), Condition((9,)), 1, coarse)


def test_non_finite_activation_reports_layer(coarse, small_model):
    with torch.no_grad():
        small_model.layers[1].weight[0, 0] = float("nan")
    with pytest.raises(NonFiniteError, match="layer 1"):
        predict_eps(small_model, np.ones(small_model.length), Condition((1,)), 1, coarse)


class TestBackward:
    def test_constant_loss_gives_zero_grads(self, small_model):
        loss = sum(p.sum() for p in small_model.parameters()) * 0.0 + 3.0
        zero_grads(small_model)
        backward(small_model, loss)
        assert not flat_grads(small_model).any()

    def test_sum_of_parameters_gives_ones(self, small_model):
        zero_grads(small_model)
        backward(small_model, sum(p.sum() for p in small_model.parameters()))
        assert torch.equal(flat_grads(small_model), torch.ones_like(flat_params(small_model)))

    def test_accumulates_without_zeroing(self, small_model):
        zero_grads(small_model)
        backward(small_model, sum(p.sum() for p in small_model.parameters()))
        backward(small_model, sum(p.sum() for p in small_model.parameters()))
        assert torch.equal(flat_grads(small_model), torch.full_like(flat_params(small_model), 2.0))

    def test_rejects_loss_without_graph(self, small_model):
        with pytest.raises(RuntimeError, match="recorded graph"):
            backward(small_model, torch.tensor(1.0))


class TestFiniteDifferences:
    def loss_fn(self, fine):
        rng = np.random.default_rng(0)
        x0, eps = rng.standard_normal(64), rng.standard_normal(64)
        return lambda m: ddpm_loss(m, x0, Condition((2, 3)), 300, eps, fine)

    def test_ddpm_loss_gradient(self, fine, small_model):
        rep = finite_diff_check(small_model, self.loss_fn(fine), 1e-4, n_probe=64, h=1e-5)
        assert rep.passed and rep.n_checked == 64 and rep.max_rel_err <= 1e-4

    def test_corrupted_entry_is_found(self, fine, small_model):
        fn = self.loss_fn(fine)
        g = analytic_gradient(small_model, fn)
        probe = np.sort(np.random.default_rng(0).choice(g.numel(), 64, replace=False))
        big = probe[int(np.argmax(np.abs(g.numpy()[probe])))]
        g[big] *= 2.0
        rep = finite_diff_check(small_model, fn, 1e-4, analytic=g, seed=0)
        assert not rep.passed and rep.worst_coordinate == big

    def test_zero_tolerance_rejected(self, fine, small_model):
        with pytest.raises(ValueError):
            finite_diff_check(small_model, self.loss_fn(fine), 0.0)

    def test_report_invariant(self):
        assert GradReport(1e-5, 3, 1e-4, True).line().startswith("PASS")

    def test_parameters_restored(self, fine, small_model):
        before = flat_params(small_model).clone()
        finite_diff_check(small_model, self.loss_fn(fine), 1e-4, n_probe=8)
        assert torch.equal(before, flat_params(small_model))


class TestSGD:
    def test_clips_by_global_norm_and_reports_pre_clip_norm(self, small_model):
        zero_grads(small_model)
        backward(small_model, 10.0 * sum(p.sum() for p in small_model.parameters()))
        before = flat_params(small_model).clone()
        norm = SGD(small_model, lr=0.1, momentum=0.0, clip_norm=1.0).step()
        n = before.numel()
        assert norm == pytest.approx(10.0 * math.sqrt(n))
        step = before - flat_params(small_model)
        assert float(torch.linalg.vector_norm(step)) == pytest.approx(0.1, rel=1e-12)
        assert small_model.version == 1

    def test_momentum(self, small_model):
        opt = SGD(small_model, lr=1.0, momentum=0.5)
        start = flat_params(small_model).clone()
        for _ in range(2):
            zero_grads(small_model)
            backward(small_model, sum(p.sum() for p in small_model.parameters()))
            opt.step()
        assert torch.allclose(start - flat_params(small_model), torch.full_like(start, 2.5))


class TestPretrain:
    def test_zero_steps_is_identity(self, fine, small_model, small_corpus):
        out = pretrain(small_model, small_corpus.items("train"), fine, 0, np.random.default_rng(0))
        assert torch.equal(flat_params(out), flat_params(small_model))

    def test_bit_reproducible(self, fine, small_model, small_corpus):
        runs = [pretrain(small_model, small_corpus.items("train"), fine, 20, np.random.default_rng(4))
                for _ in range(2)]
        assert torch.equal(flat_params(runs[0]), flat_params(runs[1]))
        assert not any(p.requires_grad for p in runs[0].parameters())

    def test_divergence_aborts(self, fine, small_model, small_corpus):
        with pytest.raises(DivergenceError, match="step"):
            pretrain(small_model, small_corpus.items("train"), fine, 50, np.random.default_rng(0), lr=50.0)

    def test_single_condition_loss_halves_at_midpoint(self, fine, small_corpus):
        items = small_corpus.items("train")[:1]
        c, x0 = items[0]
        model = init_params(0, length=64, hidden=(64, 64))
        eps = np.random.default_rng(9).standard_normal((64, 64))

        def mid_loss(m):
            with torch.no_grad():
                return np.mean([ddpm_loss(m, x0, c, 500, e, fine).item() for e in eps])

        trained = pretrain(model, items, fine, 1500, np.random.default_rng(0), lr=3e-3)
        assert mid_loss(trained) <= 0.5 * mid_loss(model)


@pytest.mark.slow
def test_pretrained_reference_is_conditional_and_closer_to_templates(pretrained_setup):
    model, setup = pretrained_setup
    coarse = setup.coarse
    x = np.random.default_rng(0).standard_normal(model.length)
    assert not np.allclose(predict_eps(model, x, Condition((0,)), 5, coarse),
                           predict_eps(model, x, Condition((7,)), 5, coarse))
    random_model = init_params(0)
    c = setup.corpus.conditions[setup.corpus.split("train")[0]]
    ref = template(c, setup.corpus)
    d_pre = np.mean([spectral_distance(sample_trajectory(model, c, coarse, s).x0, ref) for s in range(8)])
    d_rand = np.mean([spectral_distance(sample_trajectory(random_model, c, coarse, s).x0, ref) for s in range(8)])
    assert d_pre < d_rand
