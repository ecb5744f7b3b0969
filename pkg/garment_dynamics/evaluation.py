"""Rollout accuracy metrics: vertex error, Chamfer distance, geodesic distortion."""

import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from jinja2 import Environment, FileSystemLoader, select_autoescape
from pydantic import BaseModel, Field, model_validator
from scipy.spatial import cKDTree

from .collider import ColliderFrame
from .errors import ConfigError
from .geometry import TriMesh, geodesic_distances

logger = logging.getLogger(__name__)

TEMPLATES_DIR = Path(__file__).parent / "templates"
CM_PER_METER = 100.0


class EvalConfig(BaseModel):
    geodesic_pairs: int = Field(default=4096, ge=1, description="Random face pairs for geodesic distortion")
    chamfer_samples: int = Field(default=10000, ge=1, description="Area-weighted surface samples per mesh")
    seed: int = Field(default=0, description="Seed for pair and surface sampling")


class FrameMetrics(BaseModel):
    frame: int
    mve_cm: float
    chamfer: float
    geodesic_distortion: float
    penetrating_vertices: Optional[int] = None
    max_penetration: Optional[float] = None


class PenetrationStats(BaseModel):
    total_vertices: int = Field(ge=0, description="Penetrating vertices summed over frames")
    max_vertices: int = Field(ge=0, description="Largest per-frame penetrating vertex count")
    max_depth: float = Field(ge=0.0, description="Deepest penetration over all frames (m)")


class EvalReport(BaseModel):
    n_frames: int
    mve_cm: float
    chamfer: float
    geodesic_distortion: float
    frames: List[FrameMetrics] = Field(default_factory=list)
    penetration: Optional[PenetrationStats] = None
    timings: Dict[str, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_metrics(self) -> "EvalReport":
        values = [self.mve_cm, self.chamfer, self.geodesic_distortion, *self.timings.values()]
        for f in self.frames:
            values += [f.mve_cm, f.chamfer, f.geodesic_distortion]
        if not all(math.isfinite(v) and v >= 0 for v in values):
            raise ValueError("metrics must be finite and non-negative")
        return self


def mean_vertex_error(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean Euclidean vertex error in centimeters."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ConfigError(f"Vertex arrays differ in shape: {pred.shape} vs {gt.shape}")
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * CM_PER_METER)


def sample_surface(faces: np.ndarray, positions: np.ndarray, n_samples: int, rng: np.random.Generator):
    """Area-weighted face indices and barycentric coordinates."""
    tri = np.asarray(positions, dtype=np.float64)[faces]
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    face = rng.choice(len(faces), size=n_samples, p=areas / areas.sum())
    r1, r2 = rng.random(n_samples), rng.random(n_samples)
    s = np.sqrt(r1)
    bary = np.stack([1.0 - s, s * (1.0 - r2), s * r2], axis=1)
    return face, bary


def surface_points(faces: np.ndarray, positions: np.ndarray, face: np.ndarray, bary: np.ndarray) -> np.ndarray:
    return np.einsum("nk,nkd->nd", bary, np.asarray(positions, dtype=np.float64)[faces[face]])


def chamfer_from_points(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric squared Chamfer distance: mean of the two directed means."""
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(0.5 * (np.mean(d_ab**2) + np.mean(d_ba**2)))


def chamfer_distance(
    positions_a: np.ndarray,
    faces_a: np.ndarray,
    positions_b: np.ndarray,
    faces_b: np.ndarray,
    n_samples: int = 10000,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Chamfer distance between two surfaces, which may be triangulated differently.

    Identical triangulations share one set of sample locations so equal
    surfaces score exactly zero.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    face, bary = sample_surface(faces_b, positions_b, n_samples, rng)
    b = surface_points(faces_b, positions_b, face, bary)
    if np.array_equal(faces_a, faces_b):
        a = surface_points(faces_a, positions_a, face, bary)
    else:
        face_a, bary_a = sample_surface(faces_a, positions_a, n_samples, rng)
        a = surface_points(faces_a, positions_a, face_a, bary_a)
    return chamfer_from_points(a, b)


def sample_face_pairs(n_faces: int, n_pairs: int, rng: np.random.Generator) -> np.ndarray:
    """(n_pairs, 2) random distinct face pairs."""
    if n_faces < 2:
        raise ConfigError("Geodesic distortion needs at least two faces")
    first = rng.integers(n_faces, size=n_pairs)
    second = (first + rng.integers(1, n_faces, size=n_pairs)) % n_faces
    return np.stack([first, second], axis=1)


def pair_geodesics(mesh: TriMesh, pairs: np.ndarray, positions: np.ndarray) -> np.ndarray:
    sources, inverse = np.unique(pairs[:, 0], return_inverse=True)
    D = geodesic_distances(mesh, sources, positions)
    return D[inverse, pairs[:, 1]]


def geodesic_distortion(mesh: TriMesh, pred: np.ndarray, gt: np.ndarray, pairs: np.ndarray) -> float:
    """Mean |d_pred - d_gt| over the connected pairs."""
    d_pred = pair_geodesics(mesh, pairs, pred)
    d_gt = pair_geodesics(mesh, pairs, gt)
    connected = np.isfinite(d_gt) & np.isfinite(d_pred)
    if not connected.any():
        return 0.0
    return float(np.abs(d_pred[connected] - d_gt[connected]).mean())


def penetration(positions: np.ndarray, collider: ColliderFrame):
    """Count and max depth of vertices inside the body."""
    d = collider.query(np.asarray(positions, dtype=np.float64)).signed_distance
    inside = d < 0
    return int(inside.sum()), float(-d[inside].min()) if inside.any() else 0.0


def evaluate(
    mesh: TriMesh,
    pred_frames: np.ndarray,
    gt_frames: np.ndarray,
    config: Optional[EvalConfig] = None,
    colliders: Optional[Sequence[ColliderFrame]] = None,
    timings: Optional[Dict[str, float]] = None,
    first_frame: int = 0,
) -> EvalReport:
    """Compare a predicted sequence with ground truth frame by frame."""
    config = config or EvalConfig()
    pred_frames = np.asarray(pred_frames, dtype=np.float64)
    gt_frames = np.asarray(gt_frames, dtype=np.float64)
    if len(pred_frames) != len(gt_frames):
        raise ConfigError(f"Predicted sequence has {len(pred_frames)} frames, ground truth has {len(gt_frames)}")
    if len(pred_frames) == 0:
        raise ConfigError("Nothing to evaluate: the sequences are empty")
    if pred_frames.shape[1:] != (mesh.n_vertices, 3) or gt_frames.shape[1:] != (mesh.n_vertices, 3):
        raise ConfigError(f"Frames do not match the garment topology ({mesh.n_vertices} vertices)")
    if colliders is not None and len(colliders) != len(pred_frames):
        raise ConfigError(f"Got {len(colliders)} collider frames for {len(pred_frames)} garment frames")

    rng = np.random.default_rng(config.seed)
    pairs = sample_face_pairs(mesh.n_faces, config.geodesic_pairs, rng)
    frames: List[FrameMetrics] = []
    for k, (pred, gt) in enumerate(zip(pred_frames, gt_frames)):
        metrics = FrameMetrics(
            frame=first_frame + k,
            mve_cm=mean_vertex_error(pred, gt),
            chamfer=chamfer_distance(pred, mesh.faces, gt, mesh.faces, config.chamfer_samples, rng),
            geodesic_distortion=geodesic_distortion(mesh, pred, gt, pairs),
        )
        if colliders is not None:
            metrics.penetrating_vertices, metrics.max_penetration = penetration(pred, colliders[k])
        frames.append(metrics)
        logger.debug(f"frame {metrics.frame}: MVE {metrics.mve_cm:.3f} cm")

    stats = None
    if colliders is not None:
        counts = [f.penetrating_vertices for f in frames]
        stats = PenetrationStats(
            total_vertices=sum(counts),
            max_vertices=max(counts),
            max_depth=max(f.max_penetration for f in frames),
        )
    return EvalReport(
        n_frames=len(frames),
        mve_cm=float(np.mean([f.mve_cm for f in frames])),
        chamfer=float(np.mean([f.chamfer for f in frames])),
        geodesic_distortion=float(np.mean([f.geodesic_distortion for f in frames])),
        frames=frames,
        penetration=stats,
        timings=dict(timings or {}),
    )


def render_report(report: EvalReport, title: str = "Rollout evaluation") -> str:
    env = Environment(
        loader=FileSystemLoader(TEMPLATES_DIR),
        autoescape=select_autoescape(),
        trim_blocks=True,
        lstrip_blocks=True,
    )
    return env.get_template("eval_report.md.j2").render(title=title, report=report)
