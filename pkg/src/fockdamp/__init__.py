"""Photon-number process tomography of a damped cavity field from QND atom counting."""
from ._core import BACKEND
from .config import PipelineConfig, load_config
from .numkernel import (
    CavityParams,
    GeneratorMatrix,
    PhotonDistribution,
    build_generator,
    mean_photon,
    propagate,
    stationary_distribution,
)
from .pipeline import run_pipeline
from .trajsim import ProbeModel, SequenceRecord, synthesize_run

__all__ = [
    "BACKEND",
    "CavityParams",
    "GeneratorMatrix",
    "PhotonDistribution",
    "PipelineConfig",
    "ProbeModel",
    "SequenceRecord",
    "build_generator",
    "load_config",
    "mean_photon",
    "propagate",
    "run_pipeline",
    "stationary_distribution",
    "synthesize_run",
]

__version__ = "0.1.0"
