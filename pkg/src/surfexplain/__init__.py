"""Explainable spherical CNN for two-hemisphere cortical surface data."""

__version__ = "0.1.0"

from .icomesh import IcoMesh, build_icosphere, hex_region, mesh_pyramid, ring1_indices
from .model import ModelConfig, desk_config, forward, init_state, load_checkpoint, save_checkpoint

__all__ = [
    "IcoMesh",
    "build_icosphere",
    "hex_region",
    "mesh_pyramid",
    "ring1_indices",
    "ModelConfig",
    "desk_config",
    "forward",
    "init_state",
    "load_checkpoint",
    "save_checkpoint",
    "__version__",
]
