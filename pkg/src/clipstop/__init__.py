"""Learn which clips of a multi-view study to process, and when to stop."""

from .data import (
    ClipRecord,
    DatasetManifest,
    StudyRecord,
    SynthConfig,
    View,
    generate_synthetic,
    load_dataset,
    shuffle_dataset,
    write_dataset,
)
from .ppo import PPOConfig, TrainedAgent, Trainer, train

__version__ = "0.1.0"
