"""Reinforcement-learning fine-tuning of a small conditional diffusion model on toy waveforms."""

from wavetune.diffusion import Condition, DenoisingTrajectory, NoiseSchedule, make_linear_schedule
from wavetune.model import Denoiser, init_params
from wavetune.objectives import ALGOS, ObjectiveConfig
from wavetune.rewards import ConditionCorpus, ScorerConfig, build_corpus
from wavetune.trainer import Setup, TrainConfig, evaluate_checkpoints, finetune

__version__ = "0.1.0"

__all__ = ["ALGOS", "Condition", "ConditionCorpus", "Denoiser", "DenoisingTrajectory", "NoiseSchedule",
           "ObjectiveConfig", "ScorerConfig", "Setup", "TrainConfig", "build_corpus", "evaluate_checkpoints",
           "finetune", "init_params", "make_linear_schedule"]
