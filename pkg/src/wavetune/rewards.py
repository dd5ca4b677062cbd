"""Toy condition-to-waveform corpus and analytic quality scorers.

Each vocabulary token owns a bin-aligned sinusoid; a condition's clean
waveform is the sum of its tokens' sinusoids scaled to peak 0.8.  Three
scorers stand in for learned evaluators:

* ``proxy_mos``: spectral log-magnitude distance (the training reward),
* ``eval_mos``: time-domain distance plus high-frequency energy (held out),
* ``token_error_rate``: matched-filter token detection plus edit distance.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from wavetune.diffusion import Condition

CORPUS_VERSION = 1

# DFT bins of the token sinusoids for a 256-sample window (31.25 Hz/bin at 8 kHz)
DEFAULT_BINS = (3, 5, 8, 11, 14, 18, 22, 27)
PEAK = 0.8


@dataclass(frozen=True)
class ScorerConfig:
    spectral_weight: float = 4.0
    time_weight: float = 2.0
    hf_weight: float = 2.0
    spectral_floor: float = 1e-3
    hf_cutoff_bin: int = 32
    detect_threshold: float = 0.1


@dataclass
class ConditionCorpus:
    length: int = 256
    sample_rate: int = 8000
    bins: tuple[int, ...] = DEFAULT_BINS
    phases: tuple[float, ...] = ()
    conditions: list[Condition] = field(default_factory=list)
    splits: dict[str, list[int]] = field(default_factory=dict)

    @property
    def vocabulary_size(self) -> int:
        return len(self.bins)

    def template(self, c: Condition) -> np.ndarray:
        return template(c, self)

    def items(self, split: str = "train") -> list[tuple[Condition, np.ndarray]]:
        return [(self.conditions[i], self.template(self.conditions[i])) for i in self.split(split)]

    def split(self, name: str) -> list[int]:
        if name not in self.splits:
            raise KeyError(f"unknown split {name!r}; have {sorted(self.splits)}")
        return self.splits[name]

    def to_dict(self) -> dict:
        return {"version": CORPUS_VERSION, "length": self.length, "sample_rate": self.sample_rate,
                "bins": list(self.bins), "phases": list(self.phases),
                "conditions": [list(c.tokens) for c in self.conditions], "splits": self.splits}

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionCorpus":
        if d.get("version") != CORPUS_VERSION:
            raise ValueError(f"corpus version {d.get('version')!r} != {CORPUS_VERSION}")
        conds = [Condition(tuple(toks), i) for i, toks in enumerate(d["conditions"])]
        return cls(d["length"], d["sample_rate"], tuple(d["bins"]), tuple(d["phases"]), conds,
                   {k: list(v) for k, v in d["splits"].items()})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "ConditionCorpus":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_corpus(seed: int = 0, length: int = 256, bins=DEFAULT_BINS, max_tokens: int = 4,
                 n_val: int = 32, n_test: int = 32, n_train: int | None = None) -> ConditionCorpus:
    """Enumerate every token set of size 1..max_tokens and split it.

    Single-token conditions always land in train so every token is seen
    during pretraining; the remaining sets are shuffled into val/test/train.
    """
    vocab = len(bins)
    if max(bins) >= length // 2:
        raise ValueError("token bins must lie below Nyquist")
    rng = np.random.default_rng(seed)
    phases = tuple(float(p) for p in rng.uniform(0.0, 2.0 * np.pi, vocab))
    sets = [combo for k in range(1, max_tokens + 1) for combo in itertools.combinations(range(vocab), k)]
    conds = [Condition(s, i) for i, s in enumerate(sets)]
    singles = [i for i, s in enumerate(sets) if len(s) == 1]
    rest = [i for i, s in enumerate(sets) if len(s) > 1]
    rest = [rest[j] for j in rng.permutation(len(rest))]
    if n_val + n_test > len(rest):
        raise ValueError("not enough multi-token conditions for the requested splits")
    val, test, train = rest[:n_val], rest[n_val:n_val + n_test], rest[n_val + n_test:]
    train = sorted(singles + train)
    if n_train is not None:
        train = train[:n_train]
    return ConditionCorpus(length, 8000, tuple(bins), phases, conds,
                           {"train": train, "val": sorted(val), "test": sorted(test)})


def template(c: Condition, corpus: ConditionCorpus) -> np.ndarray:
    c.check_vocab(corpus.vocabulary_size)
    n = np.arange(corpus.length)
    x = np.zeros(corpus.length)
    for k in sorted(c.tokens):
        x += np.sin(2.0 * np.pi * corpus.bins[k] * n / corpus.length + corpus.phases[k])
    return PEAK * x / np.abs(x).max()


def magnitude_spectrum(x: np.ndarray) -> np.ndarray:
    """|rfft| scaled so a unit-amplitude bin-aligned sinusoid reads 1."""
    x = np.asarray(x, dtype=np.float64)
    return np.abs(np.fft.rfft(x, axis=-1)) / (x.shape[-1] / 2.0)


def spectral_distance(x, ref, floor: float = 1e-3) -> float:
    """Power-weighted mean absolute log-magnitude difference.

    Bin k is weighted by ``|X_k|^2 + |R_k|^2`` (weights sum to one), so the
    distance is dominated by bins where either signal carries energy.  A
    uniform gain error g on a noiseless signal gives exactly ``|ln g|``.
    """
    sx, sr = magnitude_spectrum(x), magnitude_spectrum(ref)
    w = sx ** 2 + sr ** 2
    diff = np.abs(np.log(sx + floor) - np.log(sr + floor))
    return float((w * diff).sum() / w.sum())


def time_distance(x, ref) -> float:
    return float(np.linalg.norm(np.asarray(x) - ref) / np.linalg.norm(ref))


def hf_noise(x, cutoff_bin: int = 32) -> float:
    """Fraction of spectral energy at or above ``cutoff_bin``."""
    power = magnitude_spectrum(x) ** 2
    total = power.sum()
    return float(power[cutoff_bin:].sum() / total) if total > 0 else 0.0


def _finite(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("scorer input contains non-finite samples")
    return x


def proxy_mos(x0, c: Condition, corpus: ConditionCorpus, cfg: ScorerConfig = ScorerConfig()) -> float:
    """Training reward in [1, 5]: 5 - 4 * spectral distance to the template."""
    d = spectral_distance(_finite(x0), template(c, corpus), cfg.spectral_floor)
    return float(np.clip(5.0 - cfg.spectral_weight * d, 1.0, 5.0))


def eval_mos(x0, c: Condition, corpus: ConditionCorpus, cfg: ScorerConfig = ScorerConfig()) -> float:
    """Held-out score in [1, 5] built from time-domain and high-frequency features."""
    x0 = _finite(x0)
    ref = template(c, corpus)
    value = 5.0 - cfg.time_weight * time_distance(x0, ref) - cfg.hf_weight * hf_noise(x0, cfg.hf_cutoff_bin)
    return float(np.clip(value, 1.0, 5.0))


def detect_tokens(x0, corpus: ConditionCorpus, threshold: float) -> list[int]:
    """Tokens whose matched-filter amplitude reaches ``threshold``.

    For bin-aligned sinusoids of unknown phase the matched filter output is
    the scaled DFT magnitude at the token's bin.
    """
    spec = magnitude_spectrum(_finite(x0))
    return [k for k, b in enumerate(corpus.bins) if spec[b] >= threshold]


def edit_distance(a, b) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def token_error_rate(x0, c: Condition, corpus: ConditionCorpus, cfg: ScorerConfig = ScorerConfig()) -> float:
    """Edit distance between detected and true token sets over |c|, capped at 1."""
    found = detect_tokens(x0, corpus, cfg.detect_threshold)
    truth = sorted(set(c.tokens))
    return min(1.0, edit_distance(found, truth) / len(truth))


def feasible_threshold_range(corpus: ConditionCorpus) -> tuple[float, float]:
    """Open interval of detection thresholds giving zero error on every clean item."""
    lo, hi = 0.0, np.inf
    for cond in corpus.conditions:
        spec = magnitude_spectrum(template(cond, corpus))
        on = [spec[corpus.bins[k]] for k in cond.tokens]
        off = [spec[b] for k, b in enumerate(corpus.bins) if k not in cond.tokens]
        hi = min(hi, min(on))
        lo = max(lo, max(off, default=0.0))
    return float(lo), float(hi)
