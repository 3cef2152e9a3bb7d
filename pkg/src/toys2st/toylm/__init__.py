"""Small causal transformer, sampler, optimizer and curriculum trainer."""

from .model import ModelConfig, ToyLM, forward_loss, init_model, parameter_count
from .optim import AdamWConfig, AdamWState, opt_step
from .sampling import SamplerConfig, generate
from .train import PhaseConfig, PhaseSchedule, TrainResult, default_schedule, load_checkpoint, train

__all__ = [
    "AdamWConfig",
    "AdamWState",
    "ModelConfig",
    "PhaseConfig",
    "PhaseSchedule",
    "SamplerConfig",
    "ToyLM",
    "TrainResult",
    "default_schedule",
    "forward_loss",
    "generate",
    "init_model",
    "load_checkpoint",
    "opt_step",
    "parameter_count",
    "train",
]
