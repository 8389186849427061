"""Federated training of a VQ semantic-communication autoencoder with server-side feature reconstruction."""

from .config import ExperimentConfig, parse_config
from .federation import run_experiment, run_round
from .model import ModelConfig, ModelParams, init_model

__all__ = ["ExperimentConfig", "parse_config", "run_experiment", "run_round", "ModelConfig", "ModelParams", "init_model"]
__version__ = "0.1.0"
