"""Recurrent network with a non-local neural memory (NRNM) on a numpy reverse-mode engine."""
from .config import ConfigError, DatasetSpec, ModelConfig
from .data import SequenceBatch, generate, load_dataset, save_dataset
from .model import build_params
from .trainer import evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
