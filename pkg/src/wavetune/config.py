"""Flat ``key = value`` run configuration.

Every key has a typed default; files and command-line overrides may only
set known keys.  Serialisation is canonical (default key order, fixed
number formatting), so parse -> serialise -> parse -> serialise is stable.
"""

from __future__ import annotations

from pathlib import Path

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "corpus.seed": 0,
    "corpus.length": 256,
    "corpus.max_tokens": 4,
    "corpus.n_val": 32,
    "corpus.n_test": 32,
    "fine.steps": 1000,
    "fine.beta_start": 1e-4,
    "fine.beta_end": 0.02,
    "coarse.steps": 10,
    "coarse.beta_start": 1e-4,
    "coarse.beta_end": 0.9,
    "model.hidden": (128, 128, 128),
    "model.time_dim": 16,
    "model.cond_dim": 16,
    "pretrain.steps": 20000,
    "pretrain.lr": 1e-3,
    "pretrain.momentum": 0.9,
    "pretrain.batch_size": 32,
    "pretrain.gain_min": 0.4,
    "pretrain.gain_max": 1.0,
    "algo": "dlpo",
    "alpha": 1.0,
    "beta": 1.0,
    "loss_guidance_steps": 10,
    "detach_penalty": False,
    "baseline": "batch_mean",
    "squared_norm": False,
    "batch_size": 16,
    "episodes": 200,
    "learning_rate": 3e-4,
    "momentum": 0.9,
    "clip_norm": 1.0,
    "checkpoint_top_k": 3,
    "eval_every": 0,
    "log_wall_ms": False,
    "eval.samples_per_condition": 4,
    "scorer.spectral_weight": 4.0,
    "scorer.time_weight": 2.0,
    "scorer.hf_weight": 2.0,
    "scorer.spectral_floor": 1e-3,
    "scorer.hf_cutoff_bin": 32,
    "scorer.detect_threshold": 0.1,
}


class ConfigError(ValueError):
    pass


def _parse_value(key: str, text: str):
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError
            return low == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def parse_text(text: str) -> dict:
    """Parse config text into a full config dict (defaults filled in)."""
    cfg = dict(DEFAULTS)
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        cfg[key] = _parse_value(key, value)
    return cfg


def load(path: str | Path | None) -> dict:
    return dict(DEFAULTS) if path is None else parse_text(Path(path).read_text())


def apply_overrides(cfg: dict, pairs, source: str = "command line") -> tuple[dict, list[str]]:
    """Apply ``key=value`` strings; returns the new config and provenance lines."""
    out, log = dict(cfg), []
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, value = (s.strip() for s in pair.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        out[key] = _parse_value(key, value)
        log.append(f"override {key} = {format_value(out[key])} (from {source})")
    return out, log


def dumps(cfg: dict) -> str:
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}")
    return "".join(f"{k} = {format_value(cfg.get(k, DEFAULTS[k]))}\n" for k in DEFAULTS)
