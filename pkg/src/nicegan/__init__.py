"""Unpaired image-to-image translation with discriminators reused as encoders."""
from .config import ConfigError, ExperimentConfig, default_paper_config, desk_config, load_config
from .training import ModelState, init_state, load_checkpoint, save_checkpoint, train, train_step

__version__ = "0.1.0"

__all__ = ["ConfigError", "ExperimentConfig", "ModelState", "default_paper_config", "desk_config",
           "init_state", "load_checkpoint", "load_config", "save_checkpoint", "train", "train_step"]
