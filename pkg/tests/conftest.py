"""Pytest configuration and fixtures."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add parent to path
sys.path.insert(0, str(Path(__file__).parent.parent))
from garment_dynamics import shapes
from garment_dynamics.archive import SequenceData
from garment_dynamics.collider import ColliderFrame
from garment_dynamics.geometry import build_mesh
from garment_dynamics.model import ModelConfig


@pytest.fixture
def strip_mesh():
    """Flat 0.3 x 0.2 m sheet with 48 faces."""
    return build_mesh(*shapes.grid_strip(0.3, 0.2, 6, 4))


@pytest.fixture
def skirt_mesh():
    """Open conical tube with 96 faces."""
    return build_mesh(*shapes.skirt(0.2, 0.3, 0.3, 12, 4))


@pytest.fixture
def sphere_mesh():
    return build_mesh(*shapes.icosphere(0.2, 2))


@pytest.fixture
def sphere_collider(sphere_mesh):
    """Sphere of radius 0.2 at the origin (320 faces)."""
    return ColliderFrame(sphere_mesh)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_config():
    """Two-layer network small enough for gradient checks."""
    return ModelConfig(n_layers=2, n_embed=16, n_ff=32, n_heads=4, n_conn=2, dropout=0.0, n_hist=2, p_geo=2.0)


def wavy_frames(rest_vertices: np.ndarray, n_frames: int) -> np.ndarray:
    """Sheet drifting along x with a travelling bend wave."""
    frames = np.empty((n_frames, len(rest_vertices), 3))
    for t in range(n_frames):
        x = rest_vertices.copy()
        x[:, 0] += 0.005 * t
        x[:, 2] += 0.01 * np.sin(12.0 * rest_vertices[:, 0] + 0.4 * t)
        frames[t] = x
    return frames


@pytest.fixture
def tiny_sequence(sphere_mesh):
    """Eight frames of a 48-face sheet above a sphere sliding along x."""
    v, f = shapes.grid_strip(0.3, 0.2, 6, 4)
    garment = build_mesh(v + np.array([-0.15, -0.1, 0.3]), f)
    frames = wavy_frames(garment.vertices, 8)
    body_frames = np.stack([sphere_mesh.vertices + np.array([0.004 * t, 0.0, 0.0]) for t in range(8)])
    return SequenceData(
        name="tiny_sheet",
        garment_rest=garment,
        garment_frames=frames,
        fps=30.0,
        body_rest=sphere_mesh,
        body_frames=body_frames,
        config={"source": "fixture"},
    )
