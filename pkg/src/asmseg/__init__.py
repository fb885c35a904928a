"""Tiled ensembles of small 3D segmentation networks."""

from .errors import (
    AsmsegError,
    ConfigurationError,
    CoverageError,
    DegenerateInputError,
    FormatError,
    NumericError,
    ParameterError,
    PipelineError,
    TransferError,
    UnsupportedError,
)
from .metrics import DiceReport, dice_per_label, mean_dice
from .phantom import PhantomSpec, generate_dataset, generate_phantom, load_dataset
from .pipeline import (
    AssemblyConfig,
    AssemblyModel,
    Subject,
    load_assembly,
    run_cascade,
    save_assembly,
    segment_assembly,
    train_assembly,
)
from .volume import LabelMap, ProbVolume, Volume

__version__ = "0.1.0"
