"""Collider queries against a watertight body mesh at one time step.

Distances are exact point-triangle distances; candidate faces are pruned with
a KD-tree over face centroids. The sign of the distance comes from the
generalized winding number, so any closed triangle mesh works as a body.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Tuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import ColliderError
from .geometry import TriMesh, local_frames

logger = logging.getLogger(__name__)

TIE_TOLERANCE = 1e-12
_WINDING_CHUNK = 256


@dataclass(frozen=True)
class SdfQuery:
    """Signed-distance result. Fields are arrays over query points, or
    scalars when a single point was queried."""

    signed_distance: np.ndarray
    direction: np.ndarray
    nearest_face: np.ndarray
    nearest_point: np.ndarray
    winding: np.ndarray

    @property
    def sdf_feature(self) -> np.ndarray:
        """[d, v] per point, shape (..., 4)."""
        return np.concatenate((np.asarray(self.signed_distance)[..., None], self.direction), axis=-1)


def closest_points_on_triangles(points: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Barycentric coordinates (k, 3) of the closest point on triangle (a, b, c) to each point.

    Voronoi-region classification, applied row-wise.
    """
    ab, ac = b - a, c - a
    ap, bp, cp = points - a, points - b, points - c
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    def safe(num, den):
        return np.divide(num, den, out=np.zeros_like(num), where=den != 0)

    bary = np.empty((len(points), 3))
    denom = va + vb + vc
    v = safe(vb, denom)
    w = safe(vc, denom)
    bary[:] = np.column_stack((1.0 - v - w, v, w))

    # Later assignments take precedence.
    t = safe(d4 - d3, (d4 - d3) + (d5 - d6))
    m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    bary[m] = np.column_stack((np.zeros(m.sum()), 1.0 - t[m], t[m]))

    t = safe(d2, d2 - d6)
    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    bary[m] = np.column_stack((1.0 - t[m], np.zeros(m.sum()), t[m]))

    m = (d6 >= 0) & (d5 <= d6)
    bary[m] = (0.0, 0.0, 1.0)

    t = safe(d1, d1 - d3)
    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    bary[m] = np.column_stack((1.0 - t[m], t[m], np.zeros(m.sum())))

    m = (d3 >= 0) & (d4 <= d3)
    bary[m] = (0.0, 1.0, 0.0)

    m = (d1 <= 0) & (d2 <= 0)
    bary[m] = (1.0, 0.0, 0.0)
    return bary


class ColliderFrame:
    """Body mesh at one time step with acceleration structures for queries."""

    def __init__(self, mesh: TriMesh):
        _, counts = np.unique(
            np.sort(np.concatenate((mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]])), axis=1),
            axis=0,
            return_counts=True,
        )
        if (counts != 2).any():
            raise ColliderError(f"Collider mesh is not watertight ({int((counts != 2).sum())} open edges)")
        self.mesh = mesh
        self.vertex_normals = mesh.vertex_normals
        centroids = mesh.centroids
        self.face_radius = np.linalg.norm(mesh.vertices[mesh.faces] - centroids[:, None, :], axis=2).max(axis=1)
        self.max_radius = float(self.face_radius.max())
        self.face_tree = cKDTree(centroids)

    @classmethod
    def from_positions(cls, body_rest: TriMesh, positions: np.ndarray) -> "ColliderFrame":
        return cls(body_rest.with_positions(positions))

    @cached_property
    def vertex_tree(self) -> cKDTree:
        return cKDTree(self.mesh.vertices)

    @property
    def vertices(self) -> np.ndarray:
        return self.mesh.vertices

    def nearest_faces(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Globally nearest face per point with ties to the lowest face index.

        Returns ``(face_index, barycentric, distance)``.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        centroids = self.mesh.centroids
        # Any point of a face is within its centroid distance, so the nearest
        # centroid bounds the answer from above.
        upper, _ = self.face_tree.query(points, k=1)
        candidates = self.face_tree.query_ball_point(points, upper + self.max_radius + TIE_TOLERANCE)
        lengths = np.fromiter((len(c) for c in candidates), dtype=np.int64, count=len(points))
        point_ids = np.repeat(np.arange(len(points)), lengths)
        face_ids = np.concatenate([np.asarray(c, dtype=np.int64) for c in candidates])

        lower = np.linalg.norm(points[point_ids] - centroids[face_ids], axis=1) - self.face_radius[face_ids]
        keep = lower <= upper[point_ids] + TIE_TOLERANCE
        point_ids, face_ids = point_ids[keep], face_ids[keep]

        tri = self.mesh.vertices[self.mesh.faces[face_ids]]
        bary = closest_points_on_triangles(points[point_ids], tri[:, 0], tri[:, 1], tri[:, 2])
        nearest = np.einsum("ij,ijk->ik", bary, tri)
        dist = np.linalg.norm(nearest - points[point_ids], axis=1)

        best = np.full(len(points), np.inf)
        np.minimum.at(best, point_ids, dist)
        tied = dist <= best[point_ids] + TIE_TOLERANCE
        chosen_face = np.full(len(points), np.iinfo(np.int64).max)
        np.minimum.at(chosen_face, point_ids[tied], face_ids[tied])

        # Recover the row of each chosen (point, face) pair.
        order = np.lexsort((face_ids, point_ids))
        rows = order[np.searchsorted(
            point_ids[order] * self.mesh.n_faces + face_ids[order],
            np.arange(len(points)) * self.mesh.n_faces + chosen_face,
        )]  # fmt: skip
        return chosen_face, bary[rows], dist[rows]

    def winding_numbers(self, points: np.ndarray) -> np.ndarray:
        """Generalized winding number per point (≈1 inside, ≈0 outside)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        tri = self.mesh.vertices[self.mesh.faces]
        result = np.empty(len(points))
        for start in range(0, len(points), _WINDING_CHUNK):
            p = points[start : start + _WINDING_CHUNK]
            a = tri[None, :, 0] - p[:, None]
            b = tri[None, :, 1] - p[:, None]
            c = tri[None, :, 2] - p[:, None]
            la, lb, lc = (np.linalg.norm(x, axis=2) for x in (a, b, c))
            numerator = np.einsum("pfi,pfi->pf", a, np.cross(b, c))
            denominator = (
                la * lb * lc
                + np.einsum("pfi,pfi->pf", a, b) * lc
                + np.einsum("pfi,pfi->pf", a, c) * lb
                + np.einsum("pfi,pfi->pf", b, c) * la
            )
            result[start : start + len(p)] = (2.0 * np.arctan2(numerator, denominator)).sum(axis=1) / (4.0 * np.pi)
        return result

    def query(self, points: np.ndarray) -> SdfQuery:
        single = np.asarray(points).ndim == 1
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        face, bary, dist = self.nearest_faces(points)
        tri = self.mesh.vertices[self.mesh.faces[face]]
        nearest = np.einsum("ij,ijk->ik", bary, tri)
        winding = self.winding_numbers(points)
        sign = np.where(winding >= 0.5, -1.0, 1.0)
        signed = np.where(dist > 0, sign * dist, 0.0)
        offset = nearest - points
        direction = np.divide(offset, dist[:, None], out=np.zeros_like(offset), where=dist[:, None] > 0)
        if single:
            return SdfQuery(float(signed[0]), direction[0], int(face[0]), nearest[0], float(winding[0]))
        return SdfQuery(signed, direction, face, nearest, winding)

    def nearest_vertices(self, points: np.ndarray) -> np.ndarray:
        """Nearest body vertex per point by Euclidean distance, ties to the lowest index."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        nn_dist, _ = self.vertex_tree.query(points, k=1)
        candidates = self.vertex_tree.query_ball_point(points, nn_dist * (1.0 + 1e-9) + TIE_TOLERANCE)
        result = np.empty(len(points), dtype=np.int64)
        for i, cand in enumerate(candidates):
            cand = np.sort(np.asarray(cand, dtype=np.int64))
            d = np.linalg.norm(self.mesh.vertices[cand] - points[i], axis=1)
            result[i] = cand[np.flatnonzero(d <= d.min() + TIE_TOLERANCE)[0]]
        return result


def signed_distance(collider: ColliderFrame, point) -> SdfQuery:
    return collider.query(point)


def nearest_body_face(collider: ColliderFrame, point) -> Tuple[int, np.ndarray]:
    """Nearest face index and the barycentric coordinates of the nearest point."""
    face, bary, _ = collider.nearest_faces(np.asarray(point, dtype=np.float64).reshape(1, 3))
    return int(face[0]), bary[0]


def collider_motion_features(collider_t: ColliderFrame, collider_t1: ColliderFrame, face_indices) -> np.ndarray:
    """Relative body-face gradient (9) and centroid velocity (3) per face, shape (k, 12)."""
    if collider_t.mesh.faces.shape != collider_t1.mesh.faces.shape or not np.array_equal(
        collider_t.mesh.faces, collider_t1.mesh.faces
    ):
        raise ColliderError("Collider frames do not share a triangulation")
    face_indices = np.atleast_1d(np.asarray(face_indices, dtype=np.int64))
    faces = collider_t.mesh.faces[face_indices]
    q_t = local_frames(faces, collider_t.vertices, collider_t.mesh.degenerate_area)
    q_t1 = local_frames(faces, collider_t1.vertices, collider_t1.mesh.degenerate_area)
    gradient = q_t1 @ np.linalg.inv(q_t)
    velocity = collider_t1.mesh.centroids[face_indices] - collider_t.mesh.centroids[face_indices]
    return np.concatenate((gradient.reshape(-1, 9), velocity), axis=1)


def collider_motion_feature(collider_t: ColliderFrame, collider_t1: ColliderFrame, face_index: int) -> np.ndarray:
    return collider_motion_features(collider_t, collider_t1, [face_index])[0]
