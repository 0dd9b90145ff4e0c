"""Copy-move forgery detection with continual learning.

A hierarchical transformer encoder feeds a self-correlation decoder that
localizes duplicated regions; pooling-based distillation lets a trained
model adapt to new data without forgetting the old task.
"""

from .config import (DecoderConfig, EncoderConfig, ModelConfig, DistillConfig,
                     TrainConfig, load_model_config, save_model_config)
from .checkpoint import (Checkpoint, checkpoint_from_model, load_checkpoint,
                         model_from_checkpoint, save_checkpoint)
from .errors import (CheckpointError, CheckpointIntegrityError,
                     CheckpointVersionError, ConfigError, DataError,
                     DivergenceError, GenerationError, ShapeError)
from .inference import infer
from .metrics import EvalReport, evaluate, evaluate_manifest, f1_score
from .model import ForgeryDetector, build_model, parameter_count
from .synth import (ForgerySpec, Sample, generate_dataset, generate_sample,
                    load_dataset)
from .training import TrainResult, continual_learn, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "CheckpointError", "CheckpointIntegrityError",
    "CheckpointVersionError", "ConfigError", "DataError", "DecoderConfig",
    "DivergenceError", "EncoderConfig", "EvalReport", "ForgeryDetector",
    "ForgerySpec", "GenerationError", "ModelConfig", "DistillConfig", "Sample",
    "ShapeError", "TrainConfig", "TrainResult", "build_model",
    "checkpoint_from_model", "continual_learn", "evaluate",
    "evaluate_manifest", "f1_score", "generate_dataset", "generate_sample",
    "infer", "load_checkpoint", "load_dataset", "load_model_config",
    "model_from_checkpoint", "parameter_count", "save_checkpoint",
    "save_model_config", "train", "__version__",
]
