"""Auto-regressive frame prediction.

One step: features of the last ``n_hist`` frames → network → Φ̄ = Ψ Φ_t →
singular-value replacement → Poisson solve anchored at z_t + q → collision
refinement. The refined frame is pushed back into the history buffer.
"""

import logging
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, NamedTuple, Optional, Protocol, Sequence

import numpy as np
import torch
from scipy import sparse

from .archive import SequenceData
from .collider import ColliderFrame
from .errors import ConfigError, GarmentDynamicsError, PipelineError
from .features import NormStats, build_stack, extract_frame, normalize
from .geometry import DeformationState, GeodesicField, TriMesh, deformation_state, uniform_laplacian
from .model import Checkpoint, geodesic_attention
from .poisson import PoissonSystem
from .refine import RefineConfig, RefineReport, refine_iteratively

logger = logging.getLogger(__name__)

STAGES = ("features", "sdf", "network", "poisson", "refine")


class Prediction(NamedTuple):
    psi: np.ndarray  # (F, 3, 3)
    sigma: np.ndarray  # (F, 3)
    q: np.ndarray  # (3,)


class Predictor(Protocol):
    n_hist: int
    norm_stats: Optional[NormStats]
    p_geo: float
    uses_geodesics: bool

    def predict(self, tokens: np.ndarray, bias: Optional[np.ndarray], state: "RolloutState") -> Prediction: ...


class NetworkPredictor:
    """Runs a trained transformer in inference mode."""

    def __init__(self, checkpoint: Checkpoint):
        self.model = checkpoint.model.eval()
        self.norm_stats = checkpoint.norm_stats
        self.n_hist = checkpoint.config.n_hist
        self.p_geo = checkpoint.config.p_geo
        self.uses_geodesics = checkpoint.config.n_conn > 0
        self.dtype = next(self.model.parameters()).dtype

    def predict(self, tokens: np.ndarray, bias: Optional[np.ndarray], state: "RolloutState") -> Prediction:
        with torch.no_grad():
            x = torch.as_tensor(tokens, dtype=self.dtype)
            b = None if bias is None else torch.as_tensor(bias, dtype=self.dtype)
            out = self.model(x, b)
        return Prediction(
            out.psi.double().numpy(), out.sigma.double().numpy(), out.q.double().numpy()
        )


class IdentityPredictor:
    """Predicts Ψ = I, the current Σ and a fixed global velocity."""

    norm_stats = None
    p_geo = 1.0
    uses_geodesics = False

    def __init__(self, n_hist: int, velocity=(0.0, 0.0, 0.0)):
        self.n_hist = n_hist
        self.velocity = np.asarray(velocity, dtype=np.float64)

    def predict(self, tokens: np.ndarray, bias: Optional[np.ndarray], state: "RolloutState") -> Prediction:
        n_faces = tokens.shape[0]
        return Prediction(
            np.broadcast_to(np.eye(3), (n_faces, 3, 3)).copy(),
            state.latest.sigma.copy(),
            self.velocity.copy(),
        )


def svd_replace(phi_bar: np.ndarray, sigma_pred: np.ndarray) -> np.ndarray:
    """U diag(σ) Vᵀ with U sign-corrected so det(U Vᵀ) = +1."""
    phi_bar = np.asarray(phi_bar, dtype=np.float64)
    sigma_pred = np.asarray(sigma_pred, dtype=np.float64)
    if not (np.isfinite(phi_bar).all() and np.isfinite(sigma_pred).all()):
        raise PipelineError("Non-finite gradient or singular values", stage="svd_replace")
    if (sigma_pred <= 0.0).any():
        raise PipelineError("Singular values must be positive", stage="svd_replace")
    if (np.diff(sigma_pred, axis=-1) > 0.0).any():
        raise PipelineError("Singular values must be sorted in descending order", stage="svd_replace")
    U, _, Vt = np.linalg.svd(phi_bar)
    flip = np.linalg.det(U @ Vt) < 0
    U[flip, :, 2] *= -1.0
    return (U * sigma_pred[..., None, :]) @ Vt


@dataclass
class FrameRecord:
    positions: np.ndarray
    phi: np.ndarray
    sigma: np.ndarray
    collider: ColliderFrame
    centroid: np.ndarray
    features: Optional[np.ndarray] = None


@dataclass
class RolloutState:
    """History ring buffer plus per-garment precomputations."""

    garment_rest: TriMesh
    poisson: PoissonSystem
    laplacian: sparse.spmatrix
    n_hist: int
    geodesics: Optional[GeodesicField] = None
    frame: int = 0
    buffer: Deque[FrameRecord] = field(default_factory=deque)
    _bias: Optional[np.ndarray] = None

    @classmethod
    def warm_start(
        cls,
        garment_rest: TriMesh,
        frames: Sequence[np.ndarray],
        colliders: Sequence[ColliderFrame],
        n_hist: int,
        poisson: Optional[PoissonSystem] = None,
        geodesics: Optional[GeodesicField] = None,
        start_frame: int = 0,
    ) -> "RolloutState":
        """State holding ``n_hist`` known frames, the last of which is the current frame."""
        if len(frames) != n_hist or len(colliders) != n_hist:
            raise ConfigError(f"Warm start needs exactly {n_hist} garment frames and colliders")
        state = cls(
            garment_rest=garment_rest,
            poisson=poisson or PoissonSystem(garment_rest),
            laplacian=uniform_laplacian(garment_rest),
            n_hist=n_hist,
            geodesics=geodesics,
            frame=start_frame + n_hist - 1,
            buffer=deque(maxlen=n_hist),
        )
        for positions, collider in zip(frames, colliders):
            state.push(np.asarray(positions, dtype=np.float64), collider)
        return state

    @property
    def latest(self) -> FrameRecord:
        return self.buffer[-1]

    def push(self, positions: np.ndarray, collider: ColliderFrame) -> FrameRecord:
        ds = deformation_state(self.garment_rest, positions)
        record = FrameRecord(
            positions=positions,
            phi=ds.phi,
            sigma=ds.sigma,
            collider=collider,
            centroid=self.garment_rest.mean_centroid(positions),
        )
        self.buffer.append(record)
        return record

    def attention_bias(self, p_geo: float) -> np.ndarray:
        if self.geodesics is None:
            raise ConfigError("The predictor uses geodesic heads but no geodesic field was provided")
        if self._bias is None:
            self._bias = geodesic_attention(self.geodesics, np.arange(self.garment_rest.n_faces), p_geo)
        return self._bias

    def feature_stack(self, collider_t1: ColliderFrame, timings: Optional[Dict[str, float]] = None) -> np.ndarray:
        records = list(self.buffer)
        next_colliders = [r.collider for r in records[1:]] + [collider_t1]
        for record, nxt in zip(records, next_colliders):
            if record.features is None:
                record.features = extract_frame(
                    self.garment_rest,
                    record.positions,
                    record.collider,
                    nxt,
                    DeformationState(record.phi, record.sigma),
                    timings,
                )
        velocities = [cur.centroid - prev.centroid for prev, cur in zip(records, records[1:])]
        return build_stack([r.features for r in records], velocities)


def _timed(stage: str, timings: Dict[str, float], frame: int, fn, *args, **kwargs):
    start = time.perf_counter()
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except (GarmentDynamicsError, np.linalg.LinAlgError) as e:
        raise PipelineError(str(e), stage=stage, frame=frame) from e
    finally:
        timings[stage] = timings.get(stage, 0.0) + time.perf_counter() - start


@dataclass
class FrameResult:
    positions: np.ndarray
    timings: Dict[str, float]
    refine: Optional[RefineReport] = None


def predict_frame(
    state: RolloutState,
    predictor: Predictor,
    collider_t1: ColliderFrame,
    use_svd_replace: bool = True,
    refine_config: Optional[RefineConfig] = None,
) -> FrameResult:
    """Predict frame t+1, refine it against ``collider_t1`` and append it to the buffer."""
    if len(state.buffer) != state.n_hist:
        raise PipelineError(f"History holds {len(state.buffer)} frames, {state.n_hist} needed", stage="features")
    frame = state.frame + 1
    timings: Dict[str, float] = {}

    stack = _timed("features", timings, frame, state.feature_stack, collider_t1, timings)
    timings["features"] -= timings.get("sdf", 0.0)

    def run_network():
        tokens = stack if predictor.norm_stats is None else normalize(stack, predictor.norm_stats)
        bias = state.attention_bias(predictor.p_geo) if predictor.uses_geodesics else None
        out = predictor.predict(tokens, bias, state)
        if not all(np.isfinite(a).all() for a in out):
            raise PipelineError("Network produced non-finite outputs", stage="network", frame=frame)
        return out

    prediction = _timed("network", timings, frame, run_network)

    def reconstruct():
        phi_bar = prediction.psi @ state.latest.phi
        phi = svd_replace(phi_bar, prediction.sigma) if use_svd_replace else phi_bar
        return state.poisson.solve(phi, state.latest.centroid + prediction.q)

    positions = _timed("poisson", timings, frame, reconstruct)

    report = None
    if refine_config is not None:
        report = _timed(
            "refine", timings, frame, refine_iteratively, positions, collider_t1, state.laplacian, refine_config
        )
        positions = report.positions
    else:
        timings["refine"] = 0.0

    _timed("features", timings, frame, state.push, positions, collider_t1)
    state.frame = frame
    return FrameResult(positions=positions, timings=timings, refine=report)


@dataclass
class RolloutResult:
    frames: np.ndarray
    timings: List[Dict[str, float]]
    refine_reports: List[Optional[RefineReport]]

    def mean_timings(self) -> Dict[str, float]:
        if not self.timings:
            return {stage: 0.0 for stage in STAGES}
        return {stage: float(np.mean([t.get(stage, 0.0) for t in self.timings])) for stage in STAGES}


def rollout(
    state: RolloutState,
    predictor: Predictor,
    collider_sequence: Sequence[ColliderFrame],
    n_frames: int,
    use_svd_replace: bool = True,
    refine_config: Optional[RefineConfig] = None,
    on_frame=None,
) -> RolloutResult:
    """Predict ``n_frames`` frames; ``collider_sequence[0]`` is the collider of the current frame."""
    if len(collider_sequence) < n_frames + 1:
        raise ConfigError(
            f"Rollout of {n_frames} frames needs {n_frames + 1} collider frames, got {len(collider_sequence)}"
        )
    frames, timings, reports = [], [], []
    for k in range(1, n_frames + 1):
        result = predict_frame(state, predictor, collider_sequence[k], use_svd_replace, refine_config)
        frames.append(result.positions)
        timings.append(result.timings)
        reports.append(result.refine)
        if on_frame is not None:
            on_frame(k)
    n_vertices = state.garment_rest.n_vertices
    stacked = np.stack(frames) if frames else np.empty((0, n_vertices, 3))
    return RolloutResult(frames=stacked, timings=timings, refine_reports=reports)


def colliders_for(sequence: SequenceData) -> List[ColliderFrame]:
    if sequence.body_rest is None or sequence.body_frames is None:
        raise ConfigError(f"Sequence {sequence.name} has no collider")
    return [ColliderFrame.from_positions(sequence.body_rest, p) for p in sequence.body_frames]


def start_from_sequence(
    sequence: SequenceData,
    n_hist: int,
    start: int = 0,
    colliders: Optional[Sequence[ColliderFrame]] = None,
    geodesics: Optional[GeodesicField] = None,
    poisson: Optional[PoissonSystem] = None,
) -> RolloutState:
    """Warm start from ground-truth frames ``start .. start + n_hist - 1``."""
    if start < 0 or start + n_hist > sequence.n_frames:
        raise ConfigError(
            f"Sequence {sequence.name} has {sequence.n_frames} frames; cannot warm start "
            f"{n_hist} frames at {start}"
        )
    colliders = colliders if colliders is not None else colliders_for(sequence)
    return RolloutState.warm_start(
        sequence.garment_rest,
        sequence.garment_frames[start : start + n_hist],
        colliders[start : start + n_hist],
        n_hist,
        poisson=poisson,
        geodesics=geodesics,
        start_frame=start,
    )
