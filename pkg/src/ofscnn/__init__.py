"""Convolution layers with a learnable continuous filter size, plus a small numpy training stack."""
from .ofs import ContinuousFilterSize, OfsConv2d, bounds_of
from .network import (ConvSpec, Network, NetworkSpec, OptimizerConfig, evaluate, exhaustive_sweep,
                      train)
from .data import Dataset, PlantedConfig, generate_planted

__version__ = "0.1.0"

__all__ = [
    "ContinuousFilterSize", "OfsConv2d", "bounds_of", "ConvSpec", "Network", "NetworkSpec",
    "OptimizerConfig", "evaluate", "exhaustive_sweep", "train", "Dataset", "PlantedConfig",
    "generate_planted", "__version__",
]
