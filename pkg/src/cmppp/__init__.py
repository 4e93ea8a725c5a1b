"""Conditional marked Poisson point process toolkit.

Object detection as a spatial point process: object centers follow a
Poisson process whose intensity is conditioned on the image, and each
center carries a (width, height, class) mark.  Training maximizes the
exact process likelihood; the fitted intensity yields closed-form, testably
calibrated probabilities that arbitrary regions are free of objects.
"""

from .core import (
    FormatError,
    Grid,
    MarkedPoint,
    MarkedPointConfig,
    NumericError,
    RngStream,
    ShapeError,
    TestRegion,
    ValidationError,
    pixel_of,
    read_config,
    read_grid,
    write_config,
    write_grid,
)
from .marked import LossBreakdown, box_void_probability, estimate_sigma, nll, nll_grad, void_probability_general
from .marks import MarkMaps, ResidualModel, class_log_prob, log_density, sample_mark, tail_mass
from .network import Checkpoint, ConvNetArch, ConvNetParams, forward, init, load_checkpoint, save_checkpoint
from .pointprocess import (
    IntensityField,
    center_void_probability,
    count,
    expected_count,
    integrate,
    log_rn_derivative,
    sample,
)
from .infer import Detection, detect, ensemble, extract_peaks
from .synth import SceneSpec, generate_dataset, generate_scene, load_dataset
from .train import TrainConfig, eval_loss, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "ConvNetArch",
    "ConvNetParams",
    "Detection",
    "FormatError",
    "Grid",
    "IntensityField",
    "LossBreakdown",
    "MarkMaps",
    "MarkedPoint",
    "MarkedPointConfig",
    "NumericError",
    "ResidualModel",
    "RngStream",
    "SceneSpec",
    "ShapeError",
    "TestRegion",
    "TrainConfig",
    "ValidationError",
    "box_void_probability",
    "center_void_probability",
    "class_log_prob",
    "count",
    "detect",
    "ensemble",
    "estimate_sigma",
    "eval_loss",
    "expected_count",
    "extract_peaks",
    "forward",
    "generate_dataset",
    "generate_scene",
    "init",
    "integrate",
    "load_checkpoint",
    "load_dataset",
    "log_density",
    "log_rn_derivative",
    "nll",
    "nll_grad",
    "pixel_of",
    "read_config",
    "read_grid",
    "sample",
    "sample_mark",
    "save_checkpoint",
    "tail_mass",
    "train",
    "void_probability_general",
    "write_config",
    "write_grid",
    "__version__",
]
