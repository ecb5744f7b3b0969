"""Learned garment dynamics: a manifold-aware transformer predicts per-face
deformation gradients, a Poisson solve reconstructs vertices, and a
collision refinement keeps the garment outside the body."""

from .errors import GarmentDynamicsError
from .geometry import TriMesh, build_mesh

__version__ = "0.1.0"

__all__ = ["GarmentDynamicsError", "TriMesh", "build_mesh", "__version__"]
