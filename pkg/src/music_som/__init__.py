"""Exact inversion of SOM distance activations and MUSIC trajectory control."""

__version__ = "0.1.0"

from .data import PCAWhitener, IsotropicScaler, gmm_sample, triangle_gmm_spec
from .geometry import activation, activation_jacobian, radial_tangential_step
from .inversion import build_anchored_system, invert, solve_inversion
from .metrics import compute_metrics
from .music import MusicConfig, MusicController, run_trajectory
from .som import PrototypeSet, SelfOrganizingMap, bmu, train_som

__all__ = [
    "IsotropicScaler",
    "MusicConfig",
    "MusicController",
    "PCAWhitener",
    "PrototypeSet",
    "SelfOrganizingMap",
    "activation",
    "activation_jacobian",
    "bmu",
    "build_anchored_system",
    "compute_metrics",
    "gmm_sample",
    "invert",
    "radial_tangential_step",
    "run_trajectory",
    "solve_inversion",
    "train_som",
    "triangle_gmm_spec",
]
