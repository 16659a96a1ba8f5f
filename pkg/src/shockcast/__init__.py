"""Traffic shockwave propagation prediction.

A microscopic multi-lane traffic simulator produces vehicle trajectories;
those are discretized into averaged time-space matrices (equivalently,
scaled traffic-density fields) and paired into supervised samples; a
convolutional encoder-decoder with skip connections learns to map the past
20 seconds of a roadway segment to the next 20.
"""

from .microsim import (
    DisturbanceEvent,
    DriverParams,
    SimConfig,
    SimulationCollisionError,
    TrajectoryLog,
    VehicleState,
    run_simulation,
)
from .model import EncoderDecoderModel, build_model, load_checkpoint, save_checkpoint
from .netcore import AdamState, ConvLayerParams, Tape, adam_step
from .trainer import (
    DatasetSplit,
    TrainingReport,
    baseline_persistence,
    evaluate,
    split_dataset,
    train_phase,
    train_two_phase,
)
from .tsgrid import (
    AveragedTimeSpaceMatrix,
    DensityMatrix,
    SamplePair,
    TimeSpaceMatrix,
    TsdsDataset,
    average_matrix,
    build_time_space_matrix,
    edie_density_oracle,
    extract_sample_pairs,
    render_heatmap,
    to_density,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "AveragedTimeSpaceMatrix",
    "ConvLayerParams",
    "DatasetSplit",
    "DensityMatrix",
    "DisturbanceEvent",
    "DriverParams",
    "EncoderDecoderModel",
    "SamplePair",
    "SimConfig",
    "SimulationCollisionError",
    "Tape",
    "TimeSpaceMatrix",
    "TrainingReport",
    "TrajectoryLog",
    "TsdsDataset",
    "VehicleState",
    "adam_step",
    "average_matrix",
    "baseline_persistence",
    "build_model",
    "build_time_space_matrix",
    "edie_density_oracle",
    "evaluate",
    "extract_sample_pairs",
    "load_checkpoint",
    "render_heatmap",
    "run_simulation",
    "save_checkpoint",
    "split_dataset",
    "to_density",
    "train_phase",
    "train_two_phase",
]
