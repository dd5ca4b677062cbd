"""Fine-tuning loop with top-k checkpointing and evaluation."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from wavetune import config as config_mod
from wavetune.checkpoint import save_checkpoint
from wavetune.diffusion import NoiseSchedule, NonFiniteError, make_linear_schedule
from wavetune.mdp import rollout_batch, score_terminal
from wavetune.model import SGD, Denoiser, flat_params, freeze, set_flat_params, trainable_copy
from wavetune.objectives import ObjectiveConfig, canonical_algo, compute_gradient
from wavetune.rewards import (ConditionCorpus, ScorerConfig, build_corpus, eval_mos, proxy_mos,
                              token_error_rate)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("episode", "algo", "mean_reward", "mean_eval", "mean_ter", "shaped_mean",
                  "penalty_mean", "grad_norm", "wall_ms")
RUN_FORMAT_VERSION = 1
COLLAPSE_LEVEL = 1.05
COLLAPSE_PATIENCE = 20


class TrainingAborted(RuntimeError):
    def __init__(self, episode: int, reason: str, diagnostics: dict | None = None):
        super().__init__(f"episode {episode}: {reason}")
        self.episode, self.diagnostics = episode, diagnostics or {}


@dataclass
class Setup:
    """Everything a run needs besides the models: data, schedules, scorers."""

    corpus: ConditionCorpus
    fine: NoiseSchedule
    coarse: NoiseSchedule
    scorer: ScorerConfig

    @classmethod
    def from_config(cls, cfg: dict) -> "Setup":
        corpus = build_corpus(cfg["corpus.seed"], cfg["corpus.length"], max_tokens=cfg["corpus.max_tokens"],
                              n_val=cfg["corpus.n_val"], n_test=cfg["corpus.n_test"])
        fine = make_linear_schedule(cfg["fine.steps"], cfg["fine.beta_start"], cfg["fine.beta_end"], "fine")
        coarse = make_linear_schedule(cfg["coarse.steps"], cfg["coarse.beta_start"], cfg["coarse.beta_end"],
                                      "coarse")
        scorer = ScorerConfig(cfg["scorer.spectral_weight"], cfg["scorer.time_weight"], cfg["scorer.hf_weight"],
                              cfg["scorer.spectral_floor"], cfg["scorer.hf_cutoff_bin"],
                              cfg["scorer.detect_threshold"])
        return cls(corpus, fine, coarse, scorer)

    def reward(self, x0, c) -> float:
        return proxy_mos(x0, c, self.corpus, self.scorer)

    def evaluator(self, x0, c) -> float:
        return eval_mos(x0, c, self.corpus, self.scorer)

    def ter(self, x0, c) -> float:
        return token_error_rate(x0, c, self.corpus, self.scorer)


@dataclass
class TrainConfig:
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    batch_size: int = 16
    episodes: int = 200
    learning_rate: float = 3e-4
    momentum: float = 0.9
    clip_norm: float = 1.0
    checkpoint_top_k: int = 3
    eval_every: int = 0
    eval_samples: int = 4
    seed: int = 0
    log_wall_ms: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.episodes < 0 or self.checkpoint_top_k < 1:
            raise ValueError("batch_size and checkpoint_top_k must be positive, episodes non-negative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    @classmethod
    def from_config(cls, cfg: dict) -> "TrainConfig":
        obj = ObjectiveConfig(canonical_algo(cfg["algo"]), cfg["alpha"], cfg["beta"], cfg["loss_guidance_steps"],
                              cfg["detach_penalty"], cfg["baseline"], cfg["squared_norm"])
        return cls(obj, cfg["batch_size"], cfg["episodes"], cfg["learning_rate"], cfg["momentum"],
                   cfg["clip_norm"], cfg["checkpoint_top_k"], cfg["eval_every"],
                   cfg["eval.samples_per_condition"], cfg["seed"], cfg["log_wall_ms"])


@dataclass
class Checkpoint:
    score: float | None
    episode: int
    params: object  # flat float64 tensor


@dataclass
class RunArtifacts:
    metrics: list[dict]
    checkpoints: list[Checkpoint]
    policy: Denoiser
    config_text: str = ""
    evals: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def metrics_csv(self) -> str:
        return rows_to_csv(self.metrics, METRIC_COLUMNS)

    def best_model(self) -> Denoiser:
        """The highest-ranked checkpoint as a frozen model."""
        return checkpoint_model(self.policy, self.checkpoints[0])

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        (out / "topk").mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(self.metrics_csv())
        if self.config_text:
            (out / "config.txt").write_text(self.config_text)
        if self.evals:
            (out / "evals.csv").write_text(rows_to_csv(self.evals, list(self.evals[0])))
        (out / "warnings.txt").write_text("".join(w + "\n" for w in self.warnings))
        for old in (out / "topk").glob("*.wtck"):
            old.unlink()
        for rank, ck in enumerate(self.checkpoints, 1):
            meta = {**self.meta, "episode": ck.episode, "score": ck.score, "rank": rank}
            save_checkpoint(checkpoint_model(self.policy, ck), out / "topk" / f"rank{rank}_ep{ck.episode:05d}.wtck",
                            meta)
        files = sorted(p.relative_to(out).as_posix() for p in out.rglob("*")
                       if p.is_file() and p.name != "manifest.json")
        (out / "manifest.json").write_text(json.dumps({"format": "wavetune-run", "version": RUN_FORMAT_VERSION,
                                                       "files": files}, indent=1, sort_keys=True) + "\n")
        return out


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def rows_to_csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def checkpoint_model(template: Denoiser, ck: Checkpoint) -> Denoiser:
    m = trainable_copy(template)
    set_flat_params(m, ck.params)
    return freeze(m)


def update_topk(top: list[Checkpoint], cand: Checkpoint, k: int) -> list[Checkpoint]:
    """Keep the k best scored checkpoints, ties going to the earlier episode."""
    scored = [c for c in top if c.score is not None] + [cand]
    scored.sort(key=lambda c: (-c.score, c.episode))
    return scored[:k]


def episode_streams(seed: int, episode: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent generators for condition picks, rollout seeds and penalty draws."""
    children = np.random.SeedSequence([seed, episode]).spawn(3)
    return tuple(np.random.default_rng(s) for s in children)


def finetune(pretrained: Denoiser, setup: Setup, cfg: TrainConfig, config_text: str = "") -> RunArtifacts:
    """Fine-tune a copy of ``pretrained``; the pretrained model stays frozen as reference."""
    reference = freeze(pretrained)
    policy = trainable_copy(pretrained)
    opt = SGD(policy, cfg.learning_rate, cfg.momentum, cfg.clip_norm)
    train = setup.corpus.split("train")
    algo = cfg.objective.algo
    metrics: list[dict] = []
    top = [Checkpoint(None, 0, flat_params(policy).clone())]
    evals, warnings = [], []
    low_streak = 0
    for ep in range(1, cfg.episodes + 1):
        start = time.perf_counter()
        cond_rng, roll_rng, pen_rng = episode_streams(cfg.seed, ep)
        conds = [setup.corpus.conditions[i] for i in cond_rng.choice(train, cfg.batch_size)]
        seeds = roll_rng.integers(0, 2**63 - 1, size=cfg.batch_size)
        snapshot = flat_params(policy).clone()
        try:
            batch = rollout_batch(policy, conds, setup.coarse, seeds)
            batch = [score_terminal(tr, setup.reward, setup.evaluator) for tr in batch]
            grad = compute_gradient(policy, batch, cfg.objective, setup.coarse, setup.fine, pen_rng, reference)
            opt.step()
        except (NonFiniteError, FloatingPointError) as err:
            raise TrainingAborted(ep, str(err), metrics[-1] if metrics else {}) from err
        d = grad.diagnostics
        mean_reward = float(np.mean([tr.terminal_reward for tr in batch]))
        row = {"episode": ep, "algo": algo, "mean_reward": mean_reward,
               "mean_eval": float(np.mean([tr.eval_score for tr in batch])),
               "mean_ter": float(np.mean([setup.ter(tr.x0, tr.condition) for tr in batch])),
               "shaped_mean": d["shaped_mean"], "penalty_mean": d["penalty_mean"], "grad_norm": d["grad_norm"],
               "wall_ms": round((time.perf_counter() - start) * 1e3, 3) if cfg.log_wall_ms else 0}
        metrics.append(row)
        top = update_topk(top, Checkpoint(mean_reward, ep - 1, snapshot), cfg.checkpoint_top_k)
        low_streak = low_streak + 1 if mean_reward < COLLAPSE_LEVEL else 0
        if low_streak == COLLAPSE_PATIENCE:
            msg = (f"episode {ep}: mean proxy_mos below {COLLAPSE_LEVEL} for {COLLAPSE_PATIENCE} "
                   "consecutive episodes (possible collapse)")
            log.warning(msg)
            warnings.append(msg)
        if cfg.eval_every and ep % cfg.eval_every == 0:
            scores = evaluate_model(freeze(policy), setup, "val", cfg.eval_samples, cfg.seed)
            evals.append({"episode": ep, **summarise(scores)})
    return RunArtifacts(metrics, top, freeze(policy), config_text, evals, warnings,
                        {"seed": cfg.seed, **schedule_meta(setup)})


def schedule_meta(setup: Setup) -> dict:
    """Schedule description stored in checkpoint headers."""
    return {"fine_steps": setup.fine.n_steps, "coarse_steps": setup.coarse.n_steps,
            "fine_betas": [float(setup.fine.beta[0]), float(setup.fine.beta[-1])],
            "coarse_betas": [float(setup.coarse.beta[0]), float(setup.coarse.beta[-1])]}


def evaluation_seeds(seed: int, n: int) -> np.ndarray:
    """Sampling seeds shared by every model evaluated under the same seed."""
    return np.random.default_rng([seed, 0xE7A1]).integers(0, 2**63 - 1, size=n)


def evaluate_model(model: Denoiser, setup: Setup, split: str, samples_per_condition: int,
                   seed: int = 0) -> dict[str, np.ndarray]:
    """Per-sample scores on a split; sample j of condition i always uses the same seed."""
    conds = [setup.corpus.conditions[i] for i in setup.corpus.split(split)]
    conds = [c for c in conds for _ in range(samples_per_condition)]
    batch = rollout_batch(model, conds, setup.coarse, evaluation_seeds(seed, len(conds)))
    return {"proxy_mos": np.array([setup.reward(tr.x0, tr.condition) for tr in batch]),
            "eval_mos": np.array([setup.evaluator(tr.x0, tr.condition) for tr in batch]),
            "ter": np.array([setup.ter(tr.x0, tr.condition) for tr in batch])}


def ground_truth_scores(setup: Setup, split: str) -> dict[str, np.ndarray]:
    items = setup.corpus.items(split)
    return {"proxy_mos": np.array([setup.reward(x, c) for c, x in items]),
            "eval_mos": np.array([setup.evaluator(x, c) for c, x in items]),
            "ter": np.array([setup.ter(x, c) for c, x in items])}


def summarise(scores: dict[str, np.ndarray]) -> dict:
    out = {}
    for name, v in scores.items():
        out[f"{name}_mean"] = float(v.mean())
        out[f"{name}_std"] = float(v.std())
    return out


@dataclass
class EvalReport:
    split: str
    rows: list[dict]

    def to_csv(self) -> str:
        cols = ["model", "split", "n", "proxy_mos_mean", "proxy_mos_std", "eval_mos_mean", "eval_mos_std",
                "ter_mean", "ter_std"]
        return rows_to_csv(self.rows, cols)

    def row(self, name: str) -> dict:
        return next(r for r in self.rows if r["model"] == name)


def evaluate_checkpoints(models: dict[str, Denoiser], setup: Setup, split: str = "test",
                         samples_per_condition: int = 4, seed: int = 0) -> EvalReport:
    """Score named models plus a ground-truth row for reference."""
    rows = []
    for name, model in models.items():
        scores = evaluate_model(model, setup, split, samples_per_condition, seed)
        rows.append({"model": name, "split": split, "n": len(scores["ter"]), **summarise(scores)})
    gt = ground_truth_scores(setup, split)
    rows.append({"model": "ground_truth", "split": split, "n": len(gt["ter"]), **summarise(gt)})
    return EvalReport(split, rows)


def pretrain_from_config(cfg: dict, setup: Setup, history: list | None = None) -> Denoiser:
    from wavetune.model import init_params, pretrain

    model = init_params(cfg["seed"], cfg["corpus.length"], len(setup.corpus.bins), cfg["model.hidden"],
                        cfg["model.time_dim"], cfg["model.cond_dim"])
    rng = np.random.default_rng([cfg["seed"], 0x9E7])
    return pretrain(model, setup.corpus.items("train"), setup.fine, cfg["pretrain.steps"], rng,
                    lr=cfg["pretrain.lr"], momentum=cfg["pretrain.momentum"],
                    batch_size=cfg["pretrain.batch_size"], squared=cfg["squared_norm"],
                    gain_range=(cfg["pretrain.gain_min"], cfg["pretrain.gain_max"]), history=history)


def config_echo(cfg: dict) -> str:
    return config_mod.dumps(cfg)
