"""Federated parameter-efficient fine-tuning simulator with primed LoRA."""

from .config import ExperimentSpec, format_config, load_config, parse_config
from .data import Dataset, Partition, synth_generate
from .errors import FedPeftError
from .fed import ALGORITHMS, FedConfig, run_experiment
from .linalg import svd, truncated_factors
from .model import ModelConfig, ModelParams, init_model, pretrain
from .peft import PeftConfig, TrainState, build_state

__version__ = "0.1.0"
