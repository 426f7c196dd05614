"""Desk-scale autoregressive causal video diffusion.

A causal spatio-temporal diffusion transformer trained with clean prompt
frames, a kv-cached chunked generation engine with an equivalence oracle,
and long-video consistency metrics, all on synthetic shape videos.
"""

from .errors import ConfigurationError, ContractError, NumericsError
from .inference import InferenceConfig, KVCache, bench_cache, generate
from .model import CausalVideoModel, ModelConfig
from .schedule import NoisePrediction, Schedule, make_schedule
from .training import TrainConfig, train

__all__ = [
    "CausalVideoModel",
    "ConfigurationError",
    "ContractError",
    "InferenceConfig",
    "KVCache",
    "ModelConfig",
    "NoisePrediction",
    "NumericsError",
    "Schedule",
    "TrainConfig",
    "bench_cache",
    "generate",
    "make_schedule",
    "train",
]
