"""Attention-augmented neural decoding of multichannel MEG-style recordings.

Pipeline: raw 248-channel recordings -> scalp-mesh or sliding-window
encoding -> one of three attention-augmented classifiers -> cross-subject
training and evaluation. Everything runs on a small numpy-backed autodiff
core with exact parameter accounting.
"""

from .dataio import (CLASS_NAMES, NormStats, Recording, SplitSpec, import_csv,
                     make_split, read_dataset, read_recording, synth_generate,
                     write_dataset, write_recording)
from .errors import (CapabilityError, ConfigError, DataFormatError, DomainError,
                     GradientError, InsufficientDataError, NumericError, ShapeError)
from .meshing import (GRID_COLS, GRID_ROWS, NUM_SENSORS, StreamBatch,
                      assemble_streams, build_mesh, build_mesh_tensor,
                      mesh_to_sample, sensor_position)
from .models import (ARCHITECTURES, ATTENTION_MODES, ModelConfig, build_model,
                     count_params, format_param_table, load_checkpoint,
                     save_checkpoint)
from .tensor import Tape, Tensor, backward, grad_check
from .training import (Metrics, TrainConfig, evaluate_cross_subject,
                       export_attention_weights, export_feature_maps, train)

__version__ = "0.1.0"

__all__ = [
    "ARCHITECTURES", "ATTENTION_MODES", "CLASS_NAMES", "GRID_COLS", "GRID_ROWS",
    "NUM_SENSORS", "CapabilityError", "ConfigError", "DataFormatError",
    "DomainError", "GradientError", "InsufficientDataError", "Metrics",
    "ModelConfig", "NormStats", "NumericError", "Recording", "ShapeError",
    "SplitSpec", "StreamBatch", "Tape", "Tensor", "TrainConfig",
    "assemble_streams", "backward", "build_mesh", "build_mesh_tensor",
    "build_model", "count_params", "evaluate_cross_subject",
    "export_attention_weights", "export_feature_maps", "format_param_table",
    "grad_check", "import_csv", "load_checkpoint", "make_split",
    "mesh_to_sample", "read_dataset", "read_recording", "save_checkpoint",
    "sensor_position", "synth_generate", "train", "write_dataset",
    "write_recording",
]
