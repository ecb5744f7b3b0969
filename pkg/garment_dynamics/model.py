"""Manifold-aware transformer encoder over garment face tokens.

Of the ``n_heads`` attention heads in every layer, ``n_conn`` use a fixed
attention matrix derived from rest-mesh geodesic distances instead of
query/key scores; their value and output projections are still learned.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, Field, model_validator

from .errors import ArchiveError, ModelError
from .features import NormStats, token_dim
from .geometry import GeodesicField

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
# softplus(x + SIGMA_OFFSET) == 1 at x == 0
SIGMA_OFFSET = math.log(math.e - 1.0)


class ModelConfig(BaseModel):
    """Network hyperparameters."""

    n_layers: int = Field(default=8, ge=1, description="Encoder layers")
    n_embed: int = Field(default=512, ge=1, description="Token embedding width")
    n_ff: int = Field(default=512, ge=1, description="Feed-forward hidden width")
    n_heads: int = Field(default=8, ge=1, description="Attention heads per layer")
    n_conn: int = Field(default=2, ge=0, description="Geodesic (fixed) heads per layer")
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0, description="Dropout rate")
    n_hist: int = Field(default=10, ge=2, description="History frames per token")
    p_geo: float = Field(default=20.0, gt=0.0, description="Exponent applied to geodesic distances")

    @model_validator(mode="after")
    def _check_heads(self) -> "ModelConfig":
        if self.n_conn > self.n_heads:
            raise ValueError(f"n_conn ({self.n_conn}) cannot exceed n_heads ({self.n_heads})")
        if self.n_embed % self.n_heads:
            raise ValueError(f"n_embed ({self.n_embed}) must be divisible by n_heads ({self.n_heads})")
        return self

    @property
    def token_dim(self) -> int:
        return token_dim(self.n_hist)


class NetworkOutput(NamedTuple):
    psi: torch.Tensor  # (..., F, 3, 3)
    sigma: torch.Tensor  # (..., F, 3), descending
    q: torch.Tensor  # (..., 3)


def geodesic_attention(
    field: GeodesicField, face_subset: Sequence[int], p_geo: float, scale: Optional[float] = None
) -> np.ndarray:
    """Row-stochastic attention A = softmax(-(D / scale)^p_geo) over a face subset.

    Infinite distances get exactly zero weight.
    """
    subset = np.asarray(face_subset, dtype=np.int64)
    if subset.size == 0:
        raise ModelError("Cannot build geodesic attention for an empty face subset")
    if p_geo <= 0:
        raise ModelError(f"p_geo must be positive, got {p_geo}")
    if subset.min() < 0 or subset.max() >= field.n_faces:
        raise ModelError(f"Face subset references faces outside [0, {field.n_faces})")
    scale = field.scale if scale is None else scale
    D = field.D[np.ix_(subset, subset)].astype(np.float64) / scale
    logits = -np.power(D, p_geo)
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    return weights / weights.sum(axis=1, keepdims=True)


def split_faces(face_count: int, n_s: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Random partition of face indices into ``n_s`` subsets whose sizes differ by at most one."""
    if n_s < 1:
        raise ModelError(f"Number of face subsets must be at least 1, got {n_s}")
    if n_s > face_count:
        raise ModelError(f"Cannot split {face_count} faces into {n_s} non-empty subsets")
    if n_s == 1:
        return [np.arange(face_count)]
    return [np.sort(part) for part in np.array_split(rng.permutation(face_count), n_s)]


class ManifoldAttention(nn.Module):
    """Multi-head self-attention where the first ``n_conn`` heads use a fixed bias matrix."""

    def __init__(self, n_embed: int, n_heads: int, n_conn: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.n_conn = n_conn
        self.d_head = n_embed // n_heads
        n_learned = n_heads - n_conn
        if n_learned:
            self.query = nn.Linear(n_embed, n_learned * self.d_head)
            self.key = nn.Linear(n_embed, n_learned * self.d_head)
        self.value = nn.Linear(n_embed, n_embed)
        self.output = nn.Linear(n_embed, n_embed)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, bias: Optional[torch.Tensor]) -> torch.Tensor:
        B, N, _ = x.shape
        v = self.value(x).view(B, N, self.n_heads, self.d_head).transpose(1, 2)

        weights = []
        if self.n_conn:
            if bias is None:
                raise ModelError("Geodesic heads need an attention bias matrix")
            weights.append(bias.expand(B, N, N).unsqueeze(1).expand(B, self.n_conn, N, N))
        if self.n_heads > self.n_conn:
            n_learned = self.n_heads - self.n_conn
            q = self.query(x).view(B, N, n_learned, self.d_head).transpose(1, 2)
            k = self.key(x).view(B, N, n_learned, self.d_head).transpose(1, 2)
            scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.d_head)
            weights.append(F.softmax(scores, dim=-1))
        attention = self.dropout(torch.cat(weights, dim=1))

        out = (attention @ v).transpose(1, 2).reshape(B, N, -1)
        return self.output(out)


class EncoderLayer(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.norm_attention = nn.LayerNorm(config.n_embed)
        self.attention = ManifoldAttention(config.n_embed, config.n_heads, config.n_conn, config.dropout)
        self.norm_ff = nn.LayerNorm(config.n_embed)
        self.ff = nn.Sequential(
            nn.Linear(config.n_embed, config.n_ff),
            nn.GELU(),
            nn.Linear(config.n_ff, config.n_embed),
        )
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x: torch.Tensor, bias: Optional[torch.Tensor]) -> torch.Tensor:
        x = x + self.dropout(self.attention(self.norm_attention(x), bias))
        return x + self.dropout(self.ff(self.norm_ff(x)))


class ManifoldTransformer(nn.Module):
    """Maps face tokens to relative gradients Ψ, singular values Σ and the global velocity q."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.embed = nn.Linear(config.token_dim, config.n_embed)
        self.layers = nn.ModuleList([EncoderLayer(config) for _ in range(config.n_layers)])
        self.norm = nn.LayerNorm(config.n_embed)
        self.face_head = nn.Linear(config.n_embed, 12)
        self.velocity_head = nn.Linear(config.n_embed, 3)

    def forward(self, tokens: torch.Tensor, bias: Optional[torch.Tensor] = None) -> NetworkOutput:
        """``tokens`` is (F, D) or (B, F, D); ``bias`` is (F, F) or (B, F, F)."""
        unbatched = tokens.dim() == 2
        if unbatched:
            tokens = tokens.unsqueeze(0)
        B, N, D = tokens.shape
        if D != self.config.token_dim:
            raise ModelError(f"Token dimension {D} does not match the model ({self.config.token_dim})")
        if bias is not None:
            if bias.dim() == 2:
                bias = bias.unsqueeze(0)
            if bias.shape[-2:] != (N, N):
                raise ModelError(f"Attention bias of shape {tuple(bias.shape)} does not match {N} tokens")
            bias = bias.to(tokens.dtype)

        x = self.embed(tokens)
        for i, layer in enumerate(self.layers):
            x = layer(x, bias)
            if not torch.isfinite(x).all():
                raise ModelError(f"Non-finite activations after encoder layer {i}", layer=f"layers.{i}")
        x = self.norm(x)

        raw = self.face_head(x)
        eye = torch.eye(3, dtype=x.dtype, device=x.device)
        psi = eye + raw[..., :9].reshape(B, N, 3, 3)
        sigma = F.softplus(raw[..., 9:] + SIGMA_OFFSET)
        sigma, _ = torch.sort(sigma, dim=-1, descending=True)
        q = self.velocity_head(x.mean(dim=1))

        if unbatched:
            return NetworkOutput(psi[0], sigma[0], q[0])
        return NetworkOutput(psi, sigma, q)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def parameter_gradients(model: nn.Module, loss: torch.Tensor) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``loss`` for every named parameter (zeros where unused)."""
    if loss.grad_fn is None:
        raise ModelError("Loss has no recorded forward graph; run forward with gradients enabled")
    names, params = zip(*[(n, p) for n, p in model.named_parameters() if p.requires_grad])
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {n: torch.zeros_like(p) if g is None else g for n, p, g in zip(names, params, grads)}


@dataclass
class Checkpoint:
    model: ManifoldTransformer
    config: ModelConfig
    norm_stats: NormStats
    metadata: Dict[str, Any] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)


def save_checkpoint(
    path: Union[str, Path],
    model: ManifoldTransformer,
    norm_stats: NormStats,
    metadata: Optional[Dict[str, Any]] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write weights, hyperparameters, normalization stats and metadata to one file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dtype = next(model.parameters()).dtype
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "dtype": str(dtype).removeprefix("torch."),
        "hyperparameters": model.config.model_dump(),
        "state_dict": model.state_dict(),
        "norm_stats": norm_stats.to_dict(),
        "metadata": metadata or {},
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    logger.debug(f"Checkpoint written to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise ArchiveError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise ArchiveError(f"Checkpoint {path} could not be read: {e}") from e
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ModelError(f"Unsupported checkpoint format version {payload.get('format_version')} in {path}")

    config = ModelConfig(**payload["hyperparameters"])
    model = ManifoldTransformer(config).to(getattr(torch, payload["dtype"]))
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as e:
        raise ModelError(f"Checkpoint weights do not match hyperparameters: {e}") from e
    model.eval()
    return Checkpoint(
        model=model,
        config=config,
        norm_stats=NormStats.from_dict(payload["norm_stats"]),
        metadata=payload.get("metadata", {}),
        extra=payload.get("extra", {}),
    )
