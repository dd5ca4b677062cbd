import time

import numpy as np
import pytest

from wavetune import config as config_mod
from wavetune.diffusion import make_linear_schedule
from wavetune.mdp import rollout_batch, score_terminal
from wavetune.model import freeze, init_params
from wavetune.rewards import build_corpus, proxy_mos

SMALL_LENGTH = 64


@pytest.fixture(scope="session")
def fine():
    return make_linear_schedule(1000, 1e-4, 0.02, "fine")


@pytest.fixture(scope="session")
def coarse():
    return make_linear_schedule(10, 1e-4, 0.9, "coarse")


@pytest.fixture(scope="session")
def small_corpus():
    return build_corpus(0, SMALL_LENGTH)


@pytest.fixture
def small_model():
    """A fresh small denoiser; length 64 keeps every token bin below Nyquist."""
    return init_params(3, length=SMALL_LENGTH, hidden=(24, 24))


@pytest.fixture
def small_reference(small_model):
    return freeze(small_model)


def make_batch(model, corpus, sched, n=4, seed=0):
    conds = [corpus.conditions[i] for i in np.random.default_rng(seed).choice(len(corpus.conditions), n)]
    batch = rollout_batch(model, conds, sched, list(range(seed, seed + n)))
    return [score_terminal(tr, lambda x, c: proxy_mos(x, c, corpus)) for tr in batch]


@pytest.fixture
def scored_batch(small_model, small_corpus, coarse):
    return make_batch(small_model, small_corpus, coarse)


def small_run_config(**overrides) -> dict:
    """Defaults shrunk to a few seconds of work."""
    cfg = dict(config_mod.DEFAULTS)
    cfg.update({"corpus.length": SMALL_LENGTH, "model.hidden": (24, 24), "pretrain.steps": 60, "episodes": 4,
                "batch_size": 4, "eval.samples_per_condition": 1})
    cfg.update(overrides)
    return cfg


@pytest.fixture(scope="session")
def pretrained_setup():
    """The reference denoiser pretrained with the default configuration (about a minute and a half)."""
    from wavetune.trainer import Setup, pretrain_from_config

    start = time.perf_counter()
    cfg = dict(config_mod.DEFAULTS)
    setup = Setup.from_config(cfg)
    model = pretrain_from_config(cfg, setup)
    TIMINGS["pretrain_seconds"] = time.perf_counter() - start
    return model, setup


TIMINGS: dict[str, float] = {}


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
