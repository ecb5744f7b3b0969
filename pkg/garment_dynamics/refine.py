"""Collision refinement: push penetrating garment vertices out of the body
while keeping the Laplacian of the predicted shape.

Minimizes

    Σ_(i,j)∈C (n_j·(V_i − U_j) − target)² + λ_lap ‖ΔV − ΔṼ‖² + λ_reg ‖V − Ṽ‖²

with ``target = +ε`` (``outward``) or ``−ε`` (``as_printed``, the sign of the
original energy as written).
"""

import logging
from dataclasses import dataclass, field
from typing import List, Literal

import numpy as np
from pydantic import BaseModel, Field
from scipy import sparse
from scipy.sparse.linalg import splu

from .collider import ColliderFrame
from .errors import SolverError

logger = logging.getLogger(__name__)

CollisionSign = Literal["as_printed", "outward"]


class RefineConfig(BaseModel):
    """Collision refinement weights and iteration limits."""

    lambda_lap: float = Field(default=0.5, gt=0.0, description="Laplacian preservation weight")
    lambda_reg: float = Field(default=1e-3, gt=0.0, description="Position regularization weight")
    epsilon: float = Field(default=0.002, ge=0.0, description="Collision margin (m)")
    max_iterations: int = Field(default=3, ge=1, description="Detect/solve passes per frame")
    collision_sign: CollisionSign = Field(
        default="outward", description="Target offset along the body normal: +ε (outward) or −ε (as_printed)"
    )


@dataclass(frozen=True)
class CollisionSet:
    """Penetrating garment vertices paired with their nearest body vertices."""

    garment_vertices: np.ndarray
    body_vertices: np.ndarray
    body_points: np.ndarray
    normals: np.ndarray
    depths: np.ndarray

    def __len__(self) -> int:
        return len(self.garment_vertices)

    @classmethod
    def empty(cls) -> "CollisionSet":
        return cls(
            np.empty(0, dtype=np.int64),
            np.empty(0, dtype=np.int64),
            np.empty((0, 3)),
            np.empty((0, 3)),
            np.empty(0),
        )

    def merge(self, newer: "CollisionSet") -> "CollisionSet":
        """Union of both sets; a vertex in ``newer`` takes its pairing from ``newer``."""
        garment = np.concatenate((newer.garment_vertices, self.garment_vertices))
        _, pick = np.unique(garment, return_index=True)

        def take(a, b):
            return np.concatenate((a, b))[pick]

        return CollisionSet(
            garment_vertices=garment[pick],
            body_vertices=take(newer.body_vertices, self.body_vertices),
            body_points=take(newer.body_points, self.body_points),
            normals=take(newer.normals, self.normals),
            depths=take(newer.depths, self.depths),
        )


@dataclass
class RefineReport:
    positions: np.ndarray
    iterations: int
    converged: bool
    initial_collisions: int
    residual_collisions: int
    max_residual_depth: float
    energies: List[float] = field(default_factory=list)


def detect_collisions(garment_positions: np.ndarray, collider: ColliderFrame) -> CollisionSet:
    """Vertices with negative signed distance, each paired with its nearest body vertex."""
    positions = np.asarray(garment_positions, dtype=np.float64)
    sdf = collider.query(positions)
    inside = np.flatnonzero(np.asarray(sdf.signed_distance) < 0)
    if len(inside) == 0:
        return CollisionSet.empty()
    body = collider.nearest_vertices(positions[inside])
    return CollisionSet(
        garment_vertices=inside,
        body_vertices=body,
        body_points=collider.vertices[body].copy(),
        normals=collider.vertex_normals[body].copy(),
        depths=np.asarray(sdf.signed_distance)[inside],
    )


def _target(epsilon: float, collision_sign: CollisionSign) -> float:
    return epsilon if collision_sign == "outward" else -epsilon


def refine_energy(
    positions: np.ndarray,
    positions_tilde: np.ndarray,
    collisions: CollisionSet,
    laplacian: sparse.spmatrix,
    lambda_lap: float,
    lambda_reg: float,
    epsilon: float,
    collision_sign: CollisionSign = "outward",
) -> float:
    positions = np.asarray(positions, dtype=np.float64)
    positions_tilde = np.asarray(positions_tilde, dtype=np.float64)
    energy = 0.0
    if len(collisions):
        offset = positions[collisions.garment_vertices] - collisions.body_points
        residual = np.einsum("ij,ij->i", collisions.normals, offset) - _target(epsilon, collision_sign)
        energy += float(np.sum(residual**2))
    energy += lambda_lap * float(np.sum((laplacian @ (positions - positions_tilde)) ** 2))
    energy += lambda_reg * float(np.sum((positions - positions_tilde) ** 2))
    return energy


def refine(
    positions_tilde: np.ndarray,
    collisions: CollisionSet,
    laplacian: sparse.spmatrix,
    lambda_lap: float = 0.5,
    lambda_reg: float = 1e-3,
    epsilon: float = 0.002,
    collision_sign: CollisionSign = "outward",
) -> np.ndarray:
    """One least-squares solve of the refinement energy."""
    positions_tilde = np.asarray(positions_tilde, dtype=np.float64)
    if lambda_lap <= 0 or lambda_reg <= 0 or epsilon < 0:
        raise SolverError("Refinement needs lambda_lap > 0, lambda_reg > 0 and epsilon >= 0")
    if len(collisions) == 0:
        return positions_tilde.copy()

    n = len(positions_tilde)
    x_tilde = positions_tilde.reshape(-1)
    k = len(collisions)
    rows = np.repeat(np.arange(k), 3)
    cols = (3 * collisions.garment_vertices[:, None] + np.arange(3)).reshape(-1)
    C = sparse.csr_matrix((collisions.normals.reshape(-1), (rows, cols)), shape=(k, 3 * n))
    c_rhs = np.einsum("ij,ij->i", collisions.normals, collisions.body_points) + _target(epsilon, collision_sign)

    L3 = sparse.kron(sparse.csr_matrix(laplacian), sparse.identity(3), format="csr")
    lap_rhs = L3 @ x_tilde

    normal_matrix = (C.T @ C + lambda_lap * (L3.T @ L3) + lambda_reg * sparse.identity(3 * n)).tocsc()
    rhs = C.T @ c_rhs + lambda_lap * (L3.T @ lap_rhs) + lambda_reg * x_tilde
    try:
        x = splu(normal_matrix).solve(rhs)
    except RuntimeError as e:
        raise SolverError(f"Collision refinement solve failed: {e}") from e
    if not np.isfinite(x).all():
        raise SolverError("Collision refinement produced non-finite positions")
    return x.reshape(n, 3)


def refine_iteratively(
    positions_tilde: np.ndarray,
    collider: ColliderFrame,
    laplacian: sparse.spmatrix,
    config: RefineConfig,
) -> RefineReport:
    """Alternate detection and solves until no vertex penetrates or the pass budget runs out.

    Every pass solves from the same prediction ``positions_tilde`` with the
    collisions found so far, detected on the latest refined positions.
    """
    positions_tilde = np.asarray(positions_tilde, dtype=np.float64)
    positions = positions_tilde.copy()
    collisions = detect_collisions(positions, collider)
    initial = len(collisions)
    constraints = CollisionSet.empty()
    energies: List[float] = []
    iterations = 0
    while len(collisions) and iterations < config.max_iterations:
        constraints = constraints.merge(collisions)
        positions = refine(
            positions_tilde,
            constraints,
            laplacian,
            config.lambda_lap,
            config.lambda_reg,
            config.epsilon,
            config.collision_sign,
        )
        energies.append(
            refine_energy(
                positions,
                positions_tilde,
                constraints,
                laplacian,
                config.lambda_lap,
                config.lambda_reg,
                config.epsilon,
                config.collision_sign,
            )
        )
        iterations += 1
        collisions = detect_collisions(positions, collider)

    converged = len(collisions) == 0
    max_depth = float(-collisions.depths.min()) if len(collisions) else 0.0
    if not converged:
        logger.warning(
            f"Collision refinement left {len(collisions)} penetrating vertices after "
            f"{iterations} passes (max depth {max_depth * 1000:.2f} mm)"
        )
    return RefineReport(
        positions=positions,
        iterations=iterations,
        converged=converged,
        initial_collisions=initial,
        residual_collisions=len(collisions),
        max_residual_depth=max_depth,
        energies=energies,
    )
