"""Triangle-mesh core: connectivity, local frames, deformation gradients,
dual-graph geodesics and the uniform Laplacian.

All arrays held by :class:`TriMesh` are made read-only after construction so a
mesh can be shared freely between threads.
"""

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components, dijkstra

from .errors import MeshError

logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12
SINGULAR_DET = 1e-10


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


class TriMesh:
    """Rest or deformed triangle mesh with cached connectivity.

    Faces are vertex-index triples wound counter-clockwise; winding must be
    consistent within each connected component.
    """

    def __init__(self, vertices, faces, degenerate_area: float = DEGENERATE_AREA):
        vertices = np.array(vertices, dtype=np.float64)
        faces = np.array(faces, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MeshError(f"Vertices must have shape (n, 3), got {vertices.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3 or len(faces) == 0:
            raise MeshError(f"Faces must have shape (m, 3) with m > 0, got {faces.shape}")
        bad = np.flatnonzero((faces < 0).any(axis=1) | (faces >= len(vertices)).any(axis=1))
        if len(bad):
            raise MeshError(f"Face {bad[0]} references a vertex outside [0, {len(vertices)})", face=int(bad[0]))
        if not np.isfinite(vertices).all():
            raise MeshError("Vertex positions contain non-finite values")

        self.vertices = _frozen(vertices)
        self.faces = _frozen(faces)
        self.degenerate_area = degenerate_area

        cross = self._face_cross(vertices)
        double_area = np.linalg.norm(cross, axis=1)
        degenerate = np.flatnonzero(double_area * 0.5 <= degenerate_area)
        if len(degenerate):
            f = int(degenerate[0])
            raise MeshError(f"Face {f} is degenerate (area {double_area[f] * 0.5:.3e} m²)", face=f)
        self.areas = _frozen(double_area * 0.5)
        self.normals = _frozen(cross / double_area[:, None])

        self._check_edges()

    def _face_cross(self, positions: np.ndarray) -> np.ndarray:
        p = positions[self.faces]
        return np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])

    def _check_edges(self):
        # Directed half-edges must be unique, otherwise two faces traverse a
        # shared edge in the same direction.
        f = self.faces
        heads = f.reshape(-1)
        tails = np.roll(f, -1, axis=1).reshape(-1)
        keys = heads * self.n_vertices + tails
        unique, counts = np.unique(keys, return_counts=True)
        if (counts > 1).any():
            key = unique[np.argmax(counts > 1)]
            face = int(np.flatnonzero(keys == key)[1] // 3)
            raise MeshError(f"Inconsistent winding at face {face}", face=face)

        undirected = np.minimum(heads, tails) * self.n_vertices + np.maximum(heads, tails)
        _, edge_counts = np.unique(undirected, return_counts=True)
        if (edge_counts > 2).any():
            raise MeshError("Mesh has a non-manifold edge shared by more than two faces")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def centroids(self) -> np.ndarray:
        return _frozen(self.vertices[self.faces].mean(axis=1))

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted vertex pairs."""
        f = self.faces
        pairs = np.concatenate((f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]))
        pairs.sort(axis=1)
        return _frozen(np.unique(pairs, axis=0))

    @cached_property
    def dual_edges(self) -> np.ndarray:
        """Pairs of faces sharing a mesh edge (i < j)."""
        f = self.faces
        pairs = np.concatenate((f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]))
        pairs.sort(axis=1)
        face_ids = np.tile(np.arange(self.n_faces), 3)
        keys = pairs[:, 0] * self.n_vertices + pairs[:, 1]
        order = np.argsort(keys, kind="stable")
        keys, face_ids = keys[order], face_ids[order]
        shared = np.flatnonzero(keys[1:] == keys[:-1])
        dual = np.column_stack((face_ids[shared], face_ids[shared + 1]))
        dual.sort(axis=1)
        return _frozen(dual[np.lexsort((dual[:, 1], dual[:, 0]))])

    @cached_property
    def dual_adjacency(self) -> sparse.csr_matrix:
        """Symmetric binary face adjacency (faces sharing an edge)."""
        d = self.dual_edges
        data = np.ones(2 * len(d))
        rows = np.concatenate((d[:, 0], d[:, 1]))
        cols = np.concatenate((d[:, 1], d[:, 0]))
        return sparse.csr_matrix((data, (rows, cols)), shape=(self.n_faces, self.n_faces))

    @cached_property
    def vertex_adjacency(self) -> sparse.csr_matrix:
        e = self.edges
        data = np.ones(2 * len(e))
        rows = np.concatenate((e[:, 0], e[:, 1]))
        cols = np.concatenate((e[:, 1], e[:, 0]))
        return sparse.csr_matrix((data, (rows, cols)), shape=(self.n_vertices, self.n_vertices))

    @cached_property
    def vertex_face_counts(self) -> np.ndarray:
        return _frozen(np.bincount(self.faces.reshape(-1), minlength=self.n_vertices))

    @cached_property
    def vertex_normals(self) -> np.ndarray:
        """Area-weighted outward vertex normals."""
        weighted = self.normals * self.areas[:, None]
        acc = np.zeros((self.n_vertices, 3))
        for k in range(3):
            np.add.at(acc, self.faces[:, k], weighted)
        norm = np.linalg.norm(acc, axis=1, keepdims=True)
        norm[norm == 0.0] = 1.0
        return _frozen(acc / norm)

    @cached_property
    def frames(self) -> np.ndarray:
        """Rest local frames Q_i, shape (F, 3, 3)."""
        return _frozen(local_frames(self.faces, self.vertices, self.degenerate_area))

    @cached_property
    def frames_inv(self) -> np.ndarray:
        return _frozen(np.linalg.inv(self.frames))

    @cached_property
    def euler_characteristic(self) -> int:
        referenced = len(np.unique(self.faces))
        return int(referenced - len(self.edges) + self.n_faces)

    @cached_property
    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    @cached_property
    def mean_edge_length(self) -> float:
        e = self.edges
        return float(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1).mean())

    def vertex_components(self) -> np.ndarray:
        """Connected-component label per vertex (shared-vertex connectivity)."""
        _, labels = connected_components(self.vertex_adjacency, directed=False)
        return labels

    def mean_centroid(self, positions: Optional[np.ndarray] = None) -> np.ndarray:
        """Mean face centroid z of the given positions (rest positions by default)."""
        p = self.vertices if positions is None else positions
        return p[self.faces].mean(axis=1).mean(axis=0)

    def with_positions(self, positions) -> "TriMesh":
        """Same triangulation at new vertex positions (validated)."""
        return TriMesh(positions, self.faces, self.degenerate_area)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.faces, dtype="<i8").tobytes())
        return h.hexdigest()

    def __repr__(self):
        return f"TriMesh(vertices={self.n_vertices}, faces={self.n_faces})"


def build_mesh(vertices, faces, degenerate_area: float = DEGENERATE_AREA) -> TriMesh:
    """Validate a triangle soup and return a mesh with all caches populated."""
    mesh = TriMesh(vertices, faces, degenerate_area)
    # Touch the lazily computed caches so the returned mesh is fully built.
    _ = mesh.dual_adjacency, mesh.vertex_adjacency, mesh.frames_inv, mesh.centroids
    return mesh


@dataclass(frozen=True)
class DeformationState:
    """Per-face absolute deformation gradients and their singular values."""

    phi: np.ndarray
    sigma: np.ndarray


@dataclass(frozen=True)
class GeodesicField:
    """All-pairs dual-graph geodesic distances between face centroids.

    ``D`` is float32 with +inf between disconnected components.
    """

    D: np.ndarray
    scale: float = 1.0

    @property
    def n_faces(self) -> int:
        return self.D.shape[0]


def local_frames(faces: np.ndarray, positions: np.ndarray, degenerate_area: float = DEGENERATE_AREA) -> np.ndarray:
    """Stack of Q_i = [v_k - v_j, v_l - v_j, n_i] for every face."""
    p = np.asarray(positions, dtype=np.float64)[faces]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    cross = np.cross(e1, e2)
    double_area = np.linalg.norm(cross, axis=1)
    degenerate = np.flatnonzero(~(double_area * 0.5 > degenerate_area))
    if len(degenerate):
        f = int(degenerate[0])
        raise MeshError(f"Face {f} is degenerate at the given positions", face=f)
    normal = cross / double_area[:, None]
    return np.stack((e1, e2, normal), axis=2)


def local_frame(mesh: TriMesh, face_index: int, vertex_positions) -> np.ndarray:
    """Local frame of one face at the given vertex positions."""
    if not 0 <= face_index < mesh.n_faces:
        raise MeshError(f"Face index {face_index} out of range", face=face_index)
    face = mesh.faces[face_index : face_index + 1]
    try:
        return local_frames(face, vertex_positions, mesh.degenerate_area)[0]
    except MeshError as e:
        raise MeshError(f"Face {face_index} is degenerate at the given positions", face=face_index) from e


def deformation_gradients(mesh_rest: TriMesh, vertex_positions) -> np.ndarray:
    """Φ_i = Q_i(V) Q_i(rest)^-1 for every face, shape (F, 3, 3)."""
    positions = np.asarray(vertex_positions, dtype=np.float64)
    if positions.shape != mesh_rest.vertices.shape:
        raise MeshError(
            f"Positions shape {positions.shape} does not match rest mesh {mesh_rest.vertices.shape}"
        )
    return local_frames(mesh_rest.faces, positions, mesh_rest.degenerate_area) @ mesh_rest.frames_inv


def relative_gradients(phi_t: np.ndarray, phi_prev: np.ndarray) -> np.ndarray:
    """Ψ = Φ_t Φ_prev^-1 per face."""
    det = np.linalg.det(phi_prev)
    singular = np.flatnonzero(~(np.abs(det) >= SINGULAR_DET))
    if len(singular):
        f = int(singular[0])
        raise MeshError(f"Previous deformation gradient of face {f} is singular (det {det[f]:.3e})", face=f)
    # Ψ Φ_prev = Φ_t  <=>  Φ_prev^T Ψ^T = Φ_t^T
    return np.swapaxes(np.linalg.solve(np.swapaxes(phi_prev, 1, 2), np.swapaxes(phi_t, 1, 2)), 1, 2)


def singular_values(phi: np.ndarray) -> np.ndarray:
    """Descending singular values per face, shape (F, 3)."""
    return np.linalg.svd(phi, compute_uv=False)


def deformation_state(mesh_rest: TriMesh, vertex_positions) -> DeformationState:
    phi = deformation_gradients(mesh_rest, vertex_positions)
    return DeformationState(phi=phi, sigma=singular_values(phi))


def dual_graph(faces: np.ndarray, dual_edges: np.ndarray, positions: np.ndarray) -> sparse.csr_matrix:
    """Dual graph weighted by centroid-to-centroid distance across shared edges."""
    n_faces = len(faces)
    centroids = np.asarray(positions, dtype=np.float64)[faces].mean(axis=1)
    a, b = dual_edges[:, 0], dual_edges[:, 1]
    # csgraph treats explicit zeros as missing edges
    w = np.maximum(np.linalg.norm(centroids[a] - centroids[b], axis=1), 1e-15)
    return sparse.csr_matrix((w, (a, b)), shape=(n_faces, n_faces))


def geodesic_distances(
    mesh: TriMesh, sources: Optional[Sequence[int]] = None, positions: Optional[np.ndarray] = None
) -> np.ndarray:
    """Dual-graph Dijkstra distances from ``sources`` (all faces when None).

    ``positions`` evaluates the metric on a deformed configuration of the
    same triangulation.
    """
    p = mesh.vertices if positions is None else positions
    graph = dual_graph(mesh.faces, mesh.dual_edges, p)
    indices = np.arange(mesh.n_faces) if sources is None else np.asarray(sources, dtype=np.int64)
    return dijkstra(graph, directed=False, indices=indices)


def geodesic_field(mesh_rest: TriMesh, scale: float = 1.0, workers: int = 1) -> GeodesicField:
    """All-pairs dual-graph geodesics; rows are split across ``workers`` threads."""
    if scale <= 0:
        raise MeshError(f"Geodesic scale must be positive, got {scale}")
    graph = dual_graph(mesh_rest.faces, mesh_rest.dual_edges, mesh_rest.vertices)
    chunks = np.array_split(np.arange(mesh_rest.n_faces), max(1, min(workers, mesh_rest.n_faces)))

    def run(rows):
        return dijkstra(graph, directed=False, indices=rows)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            blocks = list(executor.map(run, chunks))
    else:
        blocks = [run(rows) for rows in chunks]

    D = np.vstack(blocks)
    D = np.minimum(D, D.T)
    np.fill_diagonal(D, 0.0)
    logger.debug(f"Geodesic field computed for {mesh_rest.n_faces} faces")
    return GeodesicField(D=_frozen(D.astype(np.float32)), scale=float(scale))


def uniform_laplacian(mesh: TriMesh) -> sparse.csr_matrix:
    """Graph Laplacian with rows V_i - mean(1-ring of V_i)."""
    adjacency = mesh.vertex_adjacency
    degree = np.asarray(adjacency.sum(axis=1)).ravel()
    isolated = np.flatnonzero(degree == 0)
    if len(isolated):
        raise MeshError(f"Vertex {isolated[0]} is isolated; Laplacian undefined")
    inv_degree = sparse.diags(1.0 / degree)
    return (sparse.identity(mesh.n_vertices, format="csr") - inv_degree @ adjacency).tocsr()
