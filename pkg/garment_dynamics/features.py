"""Per-face network inputs: frame features, history stacks, normalization and noise."""

import logging
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .collider import ColliderFrame, collider_motion_features
from .errors import FeatureError
from .geometry import DeformationState, TriMesh, deformation_state, local_frames

logger = logging.getLogger(__name__)

FRAME_DIM = 34
STD_FLOOR = 1e-6

# Column ranges of one frame's features.
FRAME_LAYOUT: Dict[str, slice] = {
    "phi": slice(0, 9),
    "normal": slice(9, 12),
    "centroid": slice(12, 15),
    "sdf": slice(15, 19),
    "collider": slice(19, 31),
    "sigma": slice(31, 34),
}


def token_dim(n_hist: int) -> int:
    """34 features per history frame plus n_hist - 1 global velocities."""
    if n_hist < 1:
        raise FeatureError(f"n_hist must be at least 1, got {n_hist}")
    return FRAME_DIM * n_hist + 3 * (n_hist - 1)


def face_centroids(faces: np.ndarray, positions: np.ndarray) -> np.ndarray:
    return np.asarray(positions, dtype=np.float64)[faces].mean(axis=1)


def extract_frame(
    garment_rest: TriMesh,
    positions: np.ndarray,
    collider_t: ColliderFrame,
    collider_t1: ColliderFrame,
    state: Optional[DeformationState] = None,
    timings: Optional[Dict[str, float]] = None,
) -> np.ndarray:
    """Feature matrix (F, 34) for the garment at ``positions``.

    ``state`` carries Φ and Σ from the running rollout; when omitted they are
    recomputed from ``positions``. Time spent in signed-distance queries is
    added to ``timings["sdf"]`` when a dict is given.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if state is None:
        state = deformation_state(garment_rest, positions)
    n_faces = garment_rest.n_faces
    if state.phi.shape != (n_faces, 3, 3) or state.sigma.shape != (n_faces, 3):
        raise FeatureError(f"Deformation state does not match a garment with {n_faces} faces")

    frames = local_frames(garment_rest.faces, positions, garment_rest.degenerate_area)
    normals = frames[:, :, 2]
    centroids = face_centroids(garment_rest.faces, positions)
    centered = centroids - centroids.mean(axis=0)

    start = time.perf_counter()
    sdf = collider_t.query(centroids)
    if timings is not None:
        timings["sdf"] = timings.get("sdf", 0.0) + time.perf_counter() - start

    motion = collider_motion_features(collider_t, collider_t1, sdf.nearest_face)

    features = np.empty((n_faces, FRAME_DIM))
    features[:, FRAME_LAYOUT["phi"]] = state.phi.reshape(n_faces, 9)
    features[:, FRAME_LAYOUT["normal"]] = normals
    features[:, FRAME_LAYOUT["centroid"]] = centered
    features[:, FRAME_LAYOUT["sdf"]] = sdf.sdf_feature
    features[:, FRAME_LAYOUT["collider"]] = motion
    features[:, FRAME_LAYOUT["sigma"]] = state.sigma
    if not np.isfinite(features).all():
        face = int(np.flatnonzero(~np.isfinite(features).all(axis=1))[0])
        raise FeatureError(f"Non-finite feature at face {face}")
    return features


def global_velocity(centroids_t: np.ndarray, centroids_prev: np.ndarray) -> np.ndarray:
    """q = z_t - z_{t-1}, the change of the mean face centroid."""
    centroids_t = np.asarray(centroids_t, dtype=np.float64)
    centroids_prev = np.asarray(centroids_prev, dtype=np.float64)
    if centroids_t.shape != centroids_prev.shape:
        raise FeatureError("Centroid arrays of consecutive frames differ in shape")
    return centroids_t.mean(axis=0) - centroids_prev.mean(axis=0)


def build_stack(frames: Sequence[np.ndarray], velocities: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate ``n_hist`` frame features (oldest first) with the velocity
    history broadcast to every face token."""
    n_hist = len(frames)
    if n_hist == 0:
        raise FeatureError("Feature history is empty")
    if len(velocities) != n_hist - 1:
        raise FeatureError(f"Expected {n_hist - 1} global velocities for {n_hist} frames, got {len(velocities)}")
    n_faces = frames[0].shape[0]
    if any(f.shape != (n_faces, FRAME_DIM) for f in frames):
        raise FeatureError("Frame features in the history differ in shape")
    history = np.concatenate(frames, axis=1)
    if n_hist == 1:
        return history
    q = np.concatenate([np.asarray(v, dtype=np.float64).reshape(3) for v in velocities])
    return np.concatenate((history, np.broadcast_to(q, (n_faces, q.size))), axis=1)


@dataclass(frozen=True)
class NormStats:
    """Per-dimension mean and standard deviation (std floored at 1e-6)."""

    mean: np.ndarray
    std: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.mean)

    @classmethod
    def fit(cls, samples: np.ndarray) -> "NormStats":
        samples = np.asarray(samples, dtype=np.float64)
        samples = samples.reshape(-1, samples.shape[-1])
        if len(samples) == 0:
            raise FeatureError("Cannot fit normalization statistics on an empty corpus")
        return cls(mean=samples.mean(axis=0), std=np.maximum(samples.std(axis=0), STD_FLOOR))

    @classmethod
    def for_tokens(cls, frame_stats: "NormStats", velocity_stats: "NormStats", n_hist: int) -> "NormStats":
        """Tile per-frame and per-velocity statistics into the token layout."""
        if frame_stats.dim != FRAME_DIM or velocity_stats.dim != 3:
            raise FeatureError("Frame statistics must have 34 dims and velocity statistics 3")
        mean = np.concatenate([np.tile(frame_stats.mean, n_hist), np.tile(velocity_stats.mean, n_hist - 1)])
        std = np.concatenate([np.tile(frame_stats.std, n_hist), np.tile(velocity_stats.std, n_hist - 1)])
        return cls(mean=mean, std=std)

    def to_dict(self) -> Dict[str, List[float]]:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, List[float]]) -> "NormStats":
        return cls(mean=np.asarray(data["mean"], dtype=np.float64), std=np.asarray(data["std"], dtype=np.float64))


def normalize(stack: np.ndarray, stats: NormStats) -> np.ndarray:
    stack = np.asarray(stack, dtype=np.float64)
    if stack.shape[-1] != stats.dim:
        raise FeatureError(f"Token dimension {stack.shape[-1]} does not match normalization stats ({stats.dim})")
    return (stack - stats.mean) / stats.std


def add_noise(stack: np.ndarray, sigma_n: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. N(0, sigma_n) noise per face and per dimension."""
    if sigma_n < 0:
        raise FeatureError(f"Noise standard deviation must be non-negative, got {sigma_n}")
    if sigma_n == 0:
        return np.array(stack, dtype=np.float64, copy=True)
    return stack + rng.normal(0.0, sigma_n, size=np.shape(stack))


def transfer_face_field(source_centroids: np.ndarray, field: np.ndarray, target_points: np.ndarray) -> np.ndarray:
    """Sample a per-face field at surface points through the nearest source face centroid.

    Used to compare features across two meshings of the same surface.
    """
    field = np.asarray(field)
    if len(field) != len(source_centroids):
        raise FeatureError("Field length does not match the number of source faces")
    _, nearest = cKDTree(source_centroids).query(np.asarray(target_points, dtype=np.float64), k=1)
    return field[nearest]
