"""Reconstruct vertex positions from a target deformation-gradient field.

Each face gains an auxiliary point ``v4 = v_j + n`` so the local frame, and
therefore the deformation gradient, is linear in the unknowns. The
area-weighted least-squares normal equations are factorized once per rest
mesh; translation is pinned by constraining the mean face centroid.
"""

import logging
import time

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .errors import SolverError
from .geometry import TriMesh

logger = logging.getLogger(__name__)

# Rows give [v_k - v_j, v_l - v_j, v4 - v_j] from [v_j, v_k, v_l, v4].
_EDGE_OPERATOR = np.array(
    [[-1.0, 1.0, 0.0, 0.0], [-1.0, 0.0, 1.0, 0.0], [-1.0, 0.0, 0.0, 1.0]]
)


class PoissonSystem:
    """Prefactorized reconstruction system for one rest mesh.

    Unknowns are the mesh vertices followed by one auxiliary point per face.
    Immutable after construction; :meth:`solve` may be called concurrently.
    """

    def __init__(self, mesh_rest: TriMesh):
        start = time.perf_counter()
        self.mesh = mesh_rest
        n, m = mesh_rest.n_vertices, mesh_rest.n_faces
        self.n_unknowns = n + m

        labels = mesh_rest.vertex_components()
        if labels.max() > 0:
            component = int(labels.max())
            vertex = int(np.flatnonzero(labels == component)[0])
            raise SolverError(
                f"Poisson system is rank deficient: mesh has {component + 1} disconnected components "
                f"(component {component} starts at vertex {vertex}); translation can only be pinned once",
                component=component,
            )

        # G_i = Q_rest^-T E maps the 4 local points to Φ_i^T.
        G = np.einsum("fji,jk->fik", mesh_rest.frames_inv, _EDGE_OPERATOR)
        columns = np.column_stack((mesh_rest.faces, n + np.arange(m)))
        rows = np.repeat(np.arange(3 * m).reshape(m, 3), 4, axis=1).reshape(m, 3, 4)
        weights = np.sqrt(np.repeat(mesh_rest.areas, 3))
        data = G * weights.reshape(m, 3, 1)
        self._A = sparse.csr_matrix(
            (data.ravel(), (rows.ravel(), np.broadcast_to(columns[:, None, :], (m, 3, 4)).ravel())),
            shape=(3 * m, self.n_unknowns),
        )
        self._row_weights = weights

        centroid_weights = np.zeros(self.n_unknowns)
        centroid_weights[:n] = mesh_rest.vertex_face_counts / (3.0 * m)
        self._centroid_weights = centroid_weights

        # Bordered system [[AᵀA, w], [wᵀ, 0]]: the multiplier vanishes because
        # constant offsets lie in the nullspace of A.
        border = sparse.csc_matrix(centroid_weights.reshape(-1, 1))
        K = sparse.bmat([[self._A.T @ self._A, border], [border.T, None]], format="csc")
        try:
            self._factor = splu(K, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as e:
            raise SolverError(f"Factorization of the Poisson system failed: {e}", component=0) from e

        logger.debug(
            f"Poisson system built: {self.n_unknowns} unknowns, {m} faces "
            f"in {(time.perf_counter() - start) * 1000:.1f} ms"
        )

    def _rhs_rows(self, target_phi: np.ndarray) -> np.ndarray:
        target_phi = np.asarray(target_phi, dtype=np.float64)
        if target_phi.shape != (self.mesh.n_faces, 3, 3):
            raise SolverError(
                f"Target field has shape {target_phi.shape}, expected ({self.mesh.n_faces}, 3, 3)"
            )
        if not np.isfinite(target_phi).all():
            face = int(np.flatnonzero(~np.isfinite(target_phi).all(axis=(1, 2)))[0])
            raise SolverError(f"Target deformation gradient of face {face} is not finite")
        # Row 3i+r, coordinate c holds Φ_i[c, r].
        return np.swapaxes(target_phi, 1, 2).reshape(-1, 3) * self._row_weights[:, None]

    def solve(self, target_phi: np.ndarray, anchor, return_auxiliary: bool = False) -> np.ndarray:
        """Positions whose gradients best match ``target_phi`` with mean centroid ``anchor``."""
        anchor = np.asarray(anchor, dtype=np.float64).reshape(3)
        if not np.isfinite(anchor).all():
            raise SolverError("Anchor translation is not finite")
        rhs = np.vstack((self._A.T @ self._rhs_rows(target_phi), anchor[None, :]))
        unknowns = self._factor.solve(np.ascontiguousarray(rhs))[: self.n_unknowns]
        if not np.isfinite(unknowns).all():
            raise SolverError("Poisson solve produced non-finite positions")
        if return_auxiliary:
            return unknowns
        return unknowns[: self.mesh.n_vertices]

    def objective(self, target_phi: np.ndarray, unknowns: np.ndarray) -> float:
        """Σ s_i ‖Φ_i(X) − Φ_i‖²_F over vertices plus auxiliary points ``unknowns``."""
        unknowns = np.asarray(unknowns, dtype=np.float64)
        if unknowns.shape != (self.n_unknowns, 3):
            raise SolverError(f"Unknowns have shape {unknowns.shape}, expected ({self.n_unknowns}, 3)")
        residual = self._A @ unknowns - self._rhs_rows(target_phi)
        return float(np.sum(residual**2))

    def mean_centroid(self, positions: np.ndarray) -> np.ndarray:
        """Mean face centroid of vertex positions (auxiliary rows, if present, are ignored)."""
        n = self.mesh.n_vertices
        return self._centroid_weights[:n] @ np.asarray(positions)[:n]


def build_system(mesh_rest: TriMesh) -> PoissonSystem:
    return PoissonSystem(mesh_rest)
