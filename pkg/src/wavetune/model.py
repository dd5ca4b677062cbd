"""The noise-prediction network eps_theta(x_t, c, t) and its training tools."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from wavetune.diffusion import NoiseSchedule, NonFiniteError, noise_distance

log = logging.getLogger(__name__)

torch.set_default_dtype(torch.float64)


def _token_counts(tokens: Sequence[Sequence[int]], vocab_size: int) -> torch.Tensor:
    counts = torch.zeros(len(tokens), vocab_size)
    for row, seq in enumerate(tokens):
        for k in seq:
            if not 0 <= k < vocab_size:
                raise ValueError(f"token {k} outside vocabulary of size {vocab_size}")
            counts[row, k] += 1.0
    return counts


class Denoiser(nn.Module):
    """Feed-forward eps-predictor over [x_t, noise-level features, token embedding].

    The condition embedding is a learned per-token table summed over the
    tokens, so token order never matters.  The step index enters through
    sinusoidal features of the schedule's log signal-to-noise ratio, which
    lets one network serve schedules of different lengths.
    """

    def __init__(self, length: int = 256, vocab_size: int = 8, hidden: Sequence[int] = (128, 128, 128),
                 time_dim: int = 16, cond_dim: int = 16, skip: bool = True):
        super().__init__()
        widths = [length, vocab_size, time_dim, cond_dim, *hidden]
        if any(int(w) < 1 for w in widths) or time_dim % 2:
            raise ValueError(f"widths must be positive (time_dim even), got {widths}")
        self.length, self.vocab_size = int(length), int(vocab_size)
        self.hidden, self.time_dim, self.cond_dim = tuple(int(h) for h in hidden), time_dim, cond_dim
        self.cond_table = nn.Parameter(torch.zeros(vocab_size, cond_dim))
        sizes = [length + time_dim + cond_dim, *self.hidden, length]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:]))
        # scalar, noise-level dependent pass-through of x_t into the output
        self.skip = nn.Linear(time_dim, 1) if skip else None
        # bumped by every optimizer step; rollouts record it to detect stale data
        self.version = 0
        freqs = np.geomspace(0.05, 2.0, time_dim // 2)
        self.register_buffer("freqs", torch.as_tensor(freqs), persistent=False)

    def config(self) -> dict:
        return {"length": self.length, "vocab_size": self.vocab_size, "hidden": list(self.hidden),
                "time_dim": self.time_dim, "cond_dim": self.cond_dim, "skip": self.skip is not None}

    def time_features(self, t, sched: NoiseSchedule) -> torch.Tensor:
        t = np.atleast_1d(np.asarray(t))
        if t.min() < 0 or t.max() >= sched.n_steps:
            raise IndexError(f"step outside [0, {sched.n_steps}) for {sched.name}")
        ab = sched.alpha_bar[t]
        log_snr = torch.as_tensor(0.5 * np.log(ab / (1.0 - ab)))
        phase = log_snr[:, None] * self.freqs[None, :]
        return torch.cat([torch.sin(phase), torch.cos(phase)], dim=1)

    def forward(self, x: torch.Tensor, counts: torch.Tensor, tfeat: torch.Tensor) -> torch.Tensor:
        if tfeat.shape[0] == 1 and x.shape[0] > 1:
            tfeat = tfeat.expand(x.shape[0], -1)
        h = torch.cat([x, tfeat, counts @ self.cond_table], dim=1)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = torch.tanh(h)
            if not torch.isfinite(h).all():
                raise NonFiniteError(f"non-finite activations after layer {i}")
        if self.skip is not None:
            h = h + self.skip(tfeat) * x
        return h

    def predict(self, x_t: torch.Tensor, tokens: Sequence[Sequence[int]], t, sched: NoiseSchedule) -> torch.Tensor:
        """eps_theta for a batch ``x_t`` of shape (B, length)."""
        if x_t.shape[-1] != self.length:
            raise ValueError(f"waveform length {x_t.shape[-1]} != model length {self.length}")
        if not torch.isfinite(x_t).all():
            raise NonFiniteError("non-finite input waveform")
        return self(x_t, _token_counts(tokens, self.vocab_size), self.time_features(t, sched))


def init_params(seed: int, length: int = 256, vocab_size: int = 8, hidden: Sequence[int] = (128, 128, 128),
                time_dim: int = 16, cond_dim: int = 16, skip: bool = True) -> Denoiser:
    """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)), from a numpy seed."""
    model = Denoiser(length, vocab_size, hidden, time_dim, cond_dim, skip)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        model.cond_table.copy_(torch.as_tensor(rng.standard_normal((vocab_size, cond_dim))))
        for layer in model.layers:
            bound = 1.0 / math.sqrt(layer.in_features)
            layer.weight.copy_(torch.as_tensor(rng.uniform(-bound, bound, layer.weight.shape)))
            layer.bias.copy_(torch.as_tensor(rng.uniform(-bound, bound, layer.bias.shape)))
        if model.skip is not None:
            model.skip.weight.zero_()
            model.skip.bias.fill_(1.0)
    return model


def predict_eps(model: Denoiser, x_t, c, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Single-waveform convenience wrapper around :meth:`Denoiser.predict`."""
    x = torch.as_tensor(np.asarray(x_t, dtype=np.float64))
    with torch.no_grad():
        return model.predict(x[None], [c.tokens], sched.check_step(t), sched)[0].numpy()


def flat_params(model: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])


def set_flat_params(model: nn.Module, flat: torch.Tensor) -> None:
    i = 0
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(flat[i:i + p.numel()].view_as(p))
            i += p.numel()


def flat_grads(model: nn.Module) -> torch.Tensor:
    return torch.cat([(p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1)
                      for p in model.parameters()])


def zero_grads(model: nn.Module) -> None:
    for p in model.parameters():
        p.grad = None


def backward(model: nn.Module, loss: torch.Tensor) -> None:
    """Accumulate d(loss)/d(theta) into ``p.grad`` for every parameter.

    Rejects values that were not computed through recorded operations.
    """
    if not torch.is_tensor(loss) or loss.grad_fn is None:
        raise RuntimeError("loss has no recorded graph; compute it from the model's parameters")
    if loss.numel() != 1:
        raise ValueError("backward needs a scalar loss")
    loss.backward()
    for p in model.parameters():
        if p.grad is None:
            p.grad = torch.zeros_like(p)


def analytic_gradient(model: nn.Module, loss_fn: Callable[[nn.Module], torch.Tensor]) -> torch.Tensor:
    zero_grads(model)
    backward(model, loss_fn(model))
    g = flat_grads(model)
    zero_grads(model)
    return g


@dataclass
class GradReport:
    max_rel_err: float
    worst_coordinate: int
    tolerance: float
    passed: bool
    n_checked: int = 0

    def line(self, name: str = "") -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict} {name} max_rel_err={self.max_rel_err:.3e} "
                f"worst={self.worst_coordinate} tol={self.tolerance:g}").replace("  ", " ")


def finite_diff_check(model: nn.Module, loss_fn: Callable[[nn.Module], torch.Tensor],
                      tolerance: float = 1e-4, n_probe: int = 64, h: float = 1e-5, seed: int = 0,
                      analytic: torch.Tensor | None = None) -> GradReport:
    """Compare autograd against central differences on a random parameter subset.

    The per-coordinate error is ``|a - n| / max(|a|, |n|, floor)`` where the
    floor is 1e-3 of the largest numeric derivative in the probe set, so
    coordinates with negligible gradient cannot dominate.  ``analytic`` may be
    passed in to check a gradient obtained elsewhere.
    """
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    if analytic is None:
        analytic = analytic_gradient(model, loss_fn)
    theta = flat_params(model)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(theta.numel(), size=min(n_probe, theta.numel()), replace=False))
    numeric = np.empty(len(idx))
    with torch.no_grad():
        for j, i in enumerate(idx):
            bumped = theta.clone()
            bumped[i] += h
            set_flat_params(model, bumped)
            up = float(loss_fn(model))
            bumped[i] -= 2 * h
            set_flat_params(model, bumped)
            down = float(loss_fn(model))
            numeric[j] = (up - down) / (2 * h)
        set_flat_params(model, theta)
    a = analytic.numpy()[idx]
    floor = max(1e-3 * np.abs(numeric).max(), 1e-12)
    err = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
    worst = int(np.argmax(err))
    return GradReport(float(err[worst]), int(idx[worst]), tolerance, bool(err[worst] <= tolerance), len(idx))


class SGD:
    """Plain SGD with heavy-ball momentum, optionally clipping by global norm."""

    def __init__(self, model: nn.Module, lr: float, momentum: float = 0.9, clip_norm: float | None = None):
        self.model, self.lr, self.momentum, self.clip_norm = model, lr, momentum, clip_norm
        self.velocity = [torch.zeros_like(p) for p in model.parameters()]

    def step(self) -> float:
        """Apply one update from ``p.grad``; returns the pre-clip global norm."""
        params = list(self.model.parameters())
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        if not math.isfinite(norm):
            raise NonFiniteError("non-finite gradient")
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        with torch.no_grad():
            for p, g, v in zip(params, grads, self.velocity):
                v.mul_(self.momentum).add_(g, alpha=scale)
                p.sub_(self.lr * v)
        self.model.version += 1
        return norm


def freeze(model: Denoiser) -> Denoiser:
    ref = copy.deepcopy(model)
    for p in ref.parameters():
        p.requires_grad_(False)
    return ref


def trainable_copy(model: Denoiser) -> Denoiser:
    out = copy.deepcopy(model)
    for p in out.parameters():
        p.requires_grad_(True)
    return out


class DivergenceError(RuntimeError):
    pass


def pretrain(model: Denoiser, corpus: Sequence, sched: NoiseSchedule, steps: int,
             rng: np.random.Generator, lr: float = 1e-3, momentum: float = 0.9,
             batch_size: int = 32, squared: bool = False, gain_range: tuple[float, float] = (1.0, 1.0),
             history: list | None = None) -> Denoiser:
    """Minimise the noise-regression loss on (condition, clean waveform) pairs.

    Returns a frozen copy to be used as the reference model.  ``history``
    collects ``(step, mean loss)`` rows when given.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    model = trainable_copy(model)
    if steps == 0:
        return freeze(model)
    opt = SGD(model, lr, momentum)
    conds = [c for c, _ in corpus]
    x0_all = torch.as_tensor(np.stack([x for _, x in corpus]))
    running = []
    for step in range(steps):
        pick = rng.integers(0, len(corpus), size=batch_size)
        t = rng.integers(0, sched.n_steps, size=batch_size)
        eps = torch.as_tensor(rng.standard_normal((batch_size, model.length)))
        ab = torch.as_tensor(sched.alpha_bar[t])[:, None]
        gain = torch.as_tensor(rng.uniform(*gain_range, size=batch_size))[:, None]
        x_t = ab.sqrt() * gain * x0_all[pick] + (1.0 - ab).sqrt() * eps
        eps_hat = model.predict(x_t, [conds[i].tokens for i in pick], t, sched)
        loss = noise_distance(eps, eps_hat, squared).mean()
        value = float(loss.detach())
        if not value < 1e3:
            raise DivergenceError(f"pretraining diverged at step {step} (loss {value:.3g})")
        zero_grads(model)
        backward(model, loss)
        opt.step()
        running.append(value)
        if history is not None and ((step + 1) % 100 == 0 or step + 1 == steps):
            history.append((step + 1, float(np.mean(running[-100:]))))
    log.info("pretraining finished: mean loss over last 100 steps %.4f", np.mean(running[-100:]))
    return freeze(model)
