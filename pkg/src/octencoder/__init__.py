"""Octree tokenization, windowed-attention encoding and masked-autoencoder
pretraining for triangle and tetrahedral meshes with per-vertex features."""

from .config import RunConfig, load_config
from .errors import ConfigError, DataError, MeshFormatError, NumericError, OctEncoderError
from .mesh_io import Mesh, load_mesh, load_mesh_auto
from .octree import Octree, build_octree
from .simplex import rep_points

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "Mesh", "MeshFormatError", "NumericError", "OctEncoderError",
    "Octree", "RunConfig", "build_octree", "load_config", "load_mesh", "load_mesh_auto",
    "rep_points", "__version__",
]
