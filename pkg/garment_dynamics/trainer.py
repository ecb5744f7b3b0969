"""Single-step supervised training from ground-truth history windows."""

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, Field

from .archive import SequenceData, cached_geodesic_field
from .errors import TrainingError
from .features import FRAME_DIM, NormStats, add_noise, build_stack, extract_frame, normalize
from .geometry import (
    DeformationState,
    GeodesicField,
    deformation_gradients,
    relative_gradients,
    singular_values,
)
from .model import (
    ManifoldTransformer,
    ModelConfig,
    geodesic_attention,
    load_checkpoint,
    save_checkpoint,
    split_faces,
)
from .pipeline import colliders_for

logger = logging.getLogger(__name__)

TARGET_TOLERANCE = 1e-8


class TrainConfig(BaseModel):
    """Loss weights, optimizer and schedule."""

    lambda_sv: float = Field(default=1.0, ge=0.0, description="Singular-value loss weight")
    lambda_vel: float = Field(default=3.0, ge=0.0, description="Global-velocity loss weight")
    batch_size: int = Field(default=4, ge=1, description="Windows per optimizer step")
    learning_rate: float = Field(default=1e-4, gt=0.0, description="Adam learning rate")
    betas: Tuple[float, float] = Field(default=(0.9, 0.999), description="Adam moment coefficients")
    noise_std: float = Field(default=0.01, ge=0.0, description="Noise std on normalized features")
    split_count: int = Field(default=4, ge=1, description="Face subsets during the first phase")
    split_phase_steps: int = Field(default=1000, ge=0, description="Steps trained with split_count subsets")
    steps: int = Field(default=2000, ge=1, description="Total optimizer steps")
    checkpoint_every: int = Field(default=500, ge=1, description="Checkpoint cadence (steps)")
    log_every: int = Field(default=10, ge=1, description="Console log cadence (steps)")
    seed: int = Field(default=0, description="Seed for sampling, noise, splitting and dropout")
    deterministic: bool = Field(default=True, description="Single-threaded deterministic kernels")


class LossTerms(NamedTuple):
    total: torch.Tensor
    deformation: torch.Tensor
    singular_values: torch.Tensor
    velocity: torch.Tensor


def loss(
    pred_psi: torch.Tensor,
    pred_sigma: torch.Tensor,
    pred_q: torch.Tensor,
    target_psi: torch.Tensor,
    target_sigma: torch.Tensor,
    target_q: torch.Tensor,
    lambda_sv: float = 1.0,
    lambda_vel: float = 3.0,
) -> LossTerms:
    """Per-face mean L1 on Ψ and Σ, L1 on q, combined with the given weights."""
    if pred_psi.shape != target_psi.shape or pred_sigma.shape != target_sigma.shape or pred_q.shape != target_q.shape:
        raise TrainingError("Prediction and target shapes differ")
    n_faces = pred_psi.shape[-3]
    deformation = (pred_psi - target_psi).abs().sum(dim=(-1, -2)).sum(dim=-1) / n_faces
    sv = (pred_sigma - target_sigma).abs().sum(dim=-1).sum(dim=-1) / n_faces
    velocity = (pred_q - target_q).abs().sum(dim=-1)
    total = deformation + lambda_sv * sv + lambda_vel * velocity
    if not torch.isfinite(total).all():
        raise TrainingError("Loss is not finite")
    return LossTerms(total, deformation, sv, velocity)


@dataclass
class SequenceTargets:
    """Teacher-forcing tensors of one sequence; index k refers to frame k."""

    name: str
    frame_features: np.ndarray  # (T-1, F, 34), uses colliders k and k+1
    velocities: np.ndarray  # (T-1, 3), z_{k+1} - z_k
    psi: np.ndarray  # (T-1, F, 3, 3), frame k to k+1
    sigma: np.ndarray  # (T, F, 3)
    geodesics: Optional[GeodesicField]

    @property
    def n_frames(self) -> int:
        return len(self.sigma)


def prepare_sequence(sequence: SequenceData, geodesics: Optional[GeodesicField] = None) -> SequenceTargets:
    """Ground-truth features and targets, with Ψ Φ_t = Φ_{t+1} verified."""
    rest = sequence.garment_rest
    colliders = colliders_for(sequence)
    phi = np.stack([deformation_gradients(rest, p) for p in sequence.garment_frames])
    sigma = singular_values(phi.reshape(-1, 3, 3)).reshape(len(phi), -1, 3)
    centroids = sequence.garment_frames[:, rest.faces].mean(axis=2).mean(axis=1)
    velocities = np.diff(centroids, axis=0)

    T = sequence.n_frames
    psi = np.empty((T - 1, rest.n_faces, 3, 3))
    features = np.empty((T - 1, rest.n_faces, FRAME_DIM))
    for k in range(T - 1):
        psi[k] = relative_gradients(phi[k + 1], phi[k])
        error = np.abs(psi[k] @ phi[k] - phi[k + 1]).max()
        if error > TARGET_TOLERANCE * max(1.0, np.abs(phi[k + 1]).max()):
            raise TrainingError(f"Sequence {sequence.name}: relative gradient target at frame {k} is inconsistent")
        positions = sequence.garment_frames[k]
        features[k] = extract_frame(rest, positions, colliders[k], colliders[k + 1], DeformationState(phi[k], sigma[k]))
    return SequenceTargets(sequence.name, features, velocities, psi, sigma, geodesics)


class WindowDataset:
    """All (sequence, t) windows with n_hist input frames ending at t and target t+1."""

    def __init__(self, sequences: Sequence[SequenceTargets], n_hist: int):
        self.sequences = list(sequences)
        self.n_hist = n_hist
        self.windows: List[Tuple[int, int]] = []
        for s, seq in enumerate(self.sequences):
            if seq.n_frames < n_hist + 1:
                logger.warning(f"Skipping {seq.name}: {seq.n_frames} frames, {n_hist + 1} needed")
                continue
            self.windows += [(s, t) for t in range(n_hist - 1, seq.n_frames - 1)]
        if not self.windows:
            raise TrainingError(f"Corpus too short: no sequence has the {n_hist + 1} frames a window needs")

    def __len__(self) -> int:
        return len(self.windows)

    def fit_norm_stats(self) -> NormStats:
        used = {s for s, _ in self.windows}
        frames = np.concatenate([self.sequences[s].frame_features.reshape(-1, FRAME_DIM) for s in sorted(used)])
        velocities = np.concatenate([self.sequences[s].velocities for s in sorted(used)])
        return NormStats.for_tokens(NormStats.fit(frames), NormStats.fit(velocities), self.n_hist)

    def sample(self, index: int):
        """Raw token stack and targets (Ψ̃, Σ̃, q̃) of window ``index``."""
        s, t = self.windows[index]
        seq = self.sequences[s]
        first = t - self.n_hist + 1
        frames = [seq.frame_features[k] for k in range(first, t + 1)]
        velocities = [seq.velocities[k - 1] for k in range(first + 1, t + 1)]
        tokens = build_stack(frames, velocities)
        return seq, tokens, seq.psi[t], seq.sigma[t + 1], seq.velocities[t]


def build_dataset(
    sequences: Sequence[SequenceData],
    model_config: ModelConfig,
    geodesic_cache: Optional[Path] = None,
    geodesic_scale: float = 1.0,
    threads: int = 1,
) -> WindowDataset:
    def prepare(sequence: SequenceData) -> SequenceTargets:
        geodesics = None
        if model_config.n_conn > 0:
            geodesics = cached_geodesic_field(sequence.garment_rest, geodesic_cache, geodesic_scale)
        return prepare_sequence(sequence, geodesics)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            prepared = list(executor.map(prepare, sequences))
    else:
        prepared = [prepare(s) for s in sequences]
    return WindowDataset(prepared, model_config.n_hist)


def configure_determinism(config: TrainConfig, threads: int = 1):
    torch.manual_seed(config.seed)
    if config.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.set_num_threads(threads)


def split_schedule(step: int, config: TrainConfig) -> int:
    return config.split_count if step < config.split_phase_steps else 1


def step_loss(
    model: ManifoldTransformer,
    dataset: WindowDataset,
    stats: NormStats,
    indices: Sequence[int],
    n_s: int,
    config: TrainConfig,
    rng: np.random.Generator,
) -> LossTerms:
    """Mean loss over the sampled windows, each split into ``n_s`` face subsets."""
    dtype = next(model.parameters()).dtype
    terms: List[LossTerms] = []
    for index in indices:
        seq, tokens, psi, sigma, q = dataset.sample(int(index))
        tokens = add_noise(normalize(tokens, stats), config.noise_std, rng)
        q_t = torch.as_tensor(q, dtype=dtype)
        for subset in split_faces(len(tokens), n_s, rng):
            bias = None
            if model.config.n_conn > 0:
                bias = torch.as_tensor(geodesic_attention(seq.geodesics, subset, model.config.p_geo), dtype=dtype)
            out = model(torch.as_tensor(tokens[subset], dtype=dtype), bias)
            terms.append(
                loss(
                    out.psi,
                    out.sigma,
                    out.q,
                    torch.as_tensor(psi[subset], dtype=dtype),
                    torch.as_tensor(sigma[subset], dtype=dtype),
                    q_t,
                    config.lambda_sv,
                    config.lambda_vel,
                )
            )
    return LossTerms(*(torch.stack(list(parts)).mean() for parts in zip(*terms)))


@dataclass
class TrainResult:
    checkpoint: Path
    metrics_log: Path
    history: List[Dict[str, float]]


def truncate_metrics(metrics_path: Path, step: int) -> int:
    """Drop records logged after ``step`` (and any torn last line); returns the records kept."""
    if not metrics_path.exists():
        return 0
    kept = []
    for line in metrics_path.read_text(encoding="utf-8").splitlines():
        try:
            record = json.loads(line)
        except json.JSONDecodeError:
            continue
        if record.get("step", 0) <= step:
            kept.append(line)
    metrics_path.write_text("".join(f"{line}\n" for line in kept), encoding="utf-8")
    return len(kept)


def train(
    dataset: WindowDataset,
    model_config: ModelConfig,
    config: TrainConfig,
    output_dir,
    resume: Optional[Path] = None,
    metadata: Optional[Dict] = None,
    dtype: torch.dtype = torch.float32,
    threads: int = 1,
    on_step: Optional[Callable[[int, Dict[str, float]], None]] = None,
) -> TrainResult:
    """Fit normalization, then run Adam for ``config.steps`` steps with periodic checkpoints."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = output_dir / "checkpoint.pt"
    metrics_path = output_dir / "metrics.jsonl"
    configure_determinism(config, threads)

    rng = np.random.default_rng(config.seed)
    stats = dataset.fit_norm_stats()
    model = ManifoldTransformer(model_config).to(dtype)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=config.betas)
    start_step = 0

    if resume is not None:
        checkpoint = load_checkpoint(resume)
        if checkpoint.config != model_config:
            raise TrainingError(f"Checkpoint {resume} was trained with different hyperparameters")
        model.load_state_dict(checkpoint.model.state_dict())
        stats = checkpoint.norm_stats
        extra = checkpoint.extra
        optimizer.load_state_dict(extra["optimizer"])
        rng.bit_generator.state = json.loads(extra["numpy_rng"])
        torch.set_rng_state(extra["torch_rng"])
        start_step = int(extra["step"])
        kept = truncate_metrics(metrics_path, start_step)
        logger.info(f"Resuming from {resume} at step {start_step} ({kept} metrics records kept)")
    elif metrics_path.exists():
        metrics_path.unlink()

    metadata = dict(metadata or {})
    metadata["train"] = config.model_dump()

    def save(step: int):
        save_checkpoint(
            checkpoint_path,
            model,
            stats,
            metadata={**metadata, "step": step},
            extra={
                "step": step,
                "optimizer": optimizer.state_dict(),
                "numpy_rng": json.dumps(rng.bit_generator.state),
                "torch_rng": torch.get_rng_state(),
            },
        )

    history: List[Dict[str, float]] = []
    started = time.perf_counter()
    model.train()
    with metrics_path.open("a", encoding="utf-8") as log:
        for step in range(start_step, config.steps):
            n_s = split_schedule(step, config)
            indices = rng.integers(len(dataset), size=config.batch_size)
            optimizer.zero_grad()
            try:
                terms = step_loss(model, dataset, stats, indices, n_s, config, rng)
            except TrainingError as e:
                raise TrainingError(f"Step {step}: {e}", step=step) from e
            if not torch.isfinite(terms.total):
                raise TrainingError(f"Loss became NaN at step {step}", step=step)
            terms.total.backward()
            optimizer.step()

            record = {
                "step": step + 1,
                "loss": float(terms.total),
                "deformation": float(terms.deformation),
                "singular_values": float(terms.singular_values),
                "velocity": float(terms.velocity),
                "n_s": n_s,
                "wall_time": time.perf_counter() - started,
            }
            history.append(record)
            log.write(json.dumps(record) + "\n")
            if (step + 1) % config.log_every == 0:
                logger.debug(f"step {step + 1}: loss {record['loss']:.5f}")
            if on_step is not None:
                on_step(step + 1, record)
            if (step + 1) % config.checkpoint_every == 0:
                log.flush()
                save(step + 1)
                logger.info(f"Checkpoint at step {step + 1} (loss {record['loss']:.5f})")

    save(config.steps)
    model.eval()
    return TrainResult(checkpoint=checkpoint_path, metrics_log=metrics_path, history=history)
