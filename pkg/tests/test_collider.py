"""Tests for signed-distance queries against a body mesh."""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from garment_dynamics import shapes
from garment_dynamics.collider import (
    ColliderFrame,
    closest_points_on_triangles,
    collider_motion_feature,
    collider_motion_features,
    nearest_body_face,
    signed_distance,
)
from garment_dynamics.errors import ColliderError, MeshError
from garment_dynamics.geometry import TriMesh, build_mesh


def brute_force_point_triangle(p, a, b, c):
    """Closest point as the best of the in-triangle plane projection and the three edge projections."""
    best, best_d = None, np.inf
    # Interior candidate: projection onto the plane when it lies inside.
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n)
    proj = p - np.dot(p - a, n) * n
    M = np.column_stack((b - a, c - a))
    uv, *_ = np.linalg.lstsq(M, proj - a, rcond=None)
    candidates = []
    if uv[0] >= 0 and uv[1] >= 0 and uv.sum() <= 1:
        candidates.append(proj)
    for s, e in ((a, b), (b, c), (c, a)):
        t = np.clip(np.dot(p - s, e - s) / np.dot(e - s, e - s), 0.0, 1.0)
        candidates.append(s + t * (e - s))
    for q in candidates:
        d = np.linalg.norm(p - q)
        if d < best_d:
            best, best_d = q, d
    return best, best_d


class TestClosestPoint:
    """Test the vectorized point-triangle query."""

    def test_against_exhaustive_loop(self, rng):
        """Test distances against an independent per-triangle oracle."""
        tri = rng.normal(size=(200, 3, 3))
        points = rng.normal(scale=2.0, size=(200, 3))
        bary = closest_points_on_triangles(points, tri[:, 0], tri[:, 1], tri[:, 2])
        nearest = np.einsum("ij,ijk->ik", bary, tri)
        for i in range(200):
            _, d = brute_force_point_triangle(points[i], *tri[i])
            assert np.linalg.norm(nearest[i] - points[i]) == pytest.approx(d, abs=1e-10)
        np.testing.assert_allclose(bary.sum(axis=1), 1.0)
        assert (bary >= -1e-12).all()


class TestColliderFrame:
    """Test nearest-face and signed-distance queries."""

    def test_requires_watertight_mesh(self, strip_mesh):
        """Test an open mesh is rejected."""
        with pytest.raises(ColliderError, match="watertight"):
            ColliderFrame(strip_mesh)

    def test_nearest_face_matches_loop(self, sphere_collider, rng):
        """Test pruned queries against an exhaustive loop over every face."""
        mesh = sphere_collider.mesh
        points = rng.normal(scale=0.25, size=(60, 3))
        face, _, dist = sphere_collider.nearest_faces(points)
        tri = mesh.vertices[mesh.faces]
        for i, p in enumerate(points):
            d = np.array([brute_force_point_triangle(p, *t)[1] for t in tri])
            assert dist[i] == pytest.approx(d.min(), abs=1e-10)
            assert face[i] == np.flatnonzero(d <= d.min() + 1e-12)[0]

    def test_tie_goes_to_lowest_face(self, sphere_collider):
        """Test a point far along a vertex direction picks the lowest adjacent face."""
        mesh = sphere_collider.mesh
        vertex = 0
        point = mesh.vertices[vertex] * 3.0
        face, bary, dist = sphere_collider.nearest_faces(point[None])
        touching = np.flatnonzero((mesh.faces == vertex).any(axis=1))
        assert face[0] == touching.min()
        assert dist[0] == pytest.approx(0.4)
        assert bary[0].max() == pytest.approx(1.0)

    def test_sign_inside_and_outside(self, sphere_collider):
        """Test negative distance inside and positive outside the sphere."""
        inside = sphere_collider.query(np.array([0.0, 0.0, 0.05]))
        outside = sphere_collider.query(np.array([0.0, 0.0, 0.5]))
        assert inside.signed_distance < 0
        assert outside.signed_distance == pytest.approx(0.3, abs=5e-3)
        assert inside.winding == pytest.approx(1.0, abs=1e-9)
        assert outside.winding == pytest.approx(0.0, abs=1e-9)

    def test_direction_points_to_surface(self, sphere_collider):
        """Test v is the unit vector from the query point to its nearest surface point."""
        point = np.array([0.3, 0.1, -0.2])
        q = signed_distance(sphere_collider, point)
        assert np.linalg.norm(q.direction) == pytest.approx(1.0)
        np.testing.assert_allclose(point + abs(q.signed_distance) * q.direction, q.nearest_point, atol=1e-12)
        assert q.sdf_feature.shape == (4,)

    def test_surface_point_has_zero_direction(self, sphere_collider):
        """Test d = 0 and v = 0 for a point on the surface."""
        q = sphere_collider.query(sphere_collider.vertices[5])
        assert q.signed_distance == 0.0
        np.testing.assert_array_equal(q.direction, 0.0)

    def test_sign_matches_ray_parity(self, sphere_collider, rng):
        """Test the winding sign agrees with ray-crossing parity on 1,000 random points."""
        points = rng.uniform(-0.3, 0.3, (1000, 3))
        q = sphere_collider.query(points)
        tri = sphere_collider.vertices[sphere_collider.mesh.faces]
        direction = np.array([0.5377, 1.8339, -2.2588])
        direction /= np.linalg.norm(direction)
        # Moller-Trumbore against every triangle.
        e1, e2 = tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
        h = np.cross(direction, e2)
        det = np.einsum("fk,fk->f", e1, h)
        s = points[:, None] - tri[None, :, 0]
        u = np.einsum("pfk,fk->pf", s, h) / det
        qv = np.cross(s, e1[None])
        v = qv @ direction / det
        t = np.einsum("fk,pfk->pf", e2, qv) / det
        hits = (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
        inside = hits.sum(axis=1) % 2 == 1
        far = np.abs(q.signed_distance) > 1e-6
        assert inside.any() and (~inside).any()
        np.testing.assert_array_equal((q.signed_distance < 0)[far], inside[far])

    def test_batched_shapes(self, sphere_collider, rng):
        """Test array queries return per-point arrays."""
        q = sphere_collider.query(rng.normal(size=(10, 3)))
        assert q.signed_distance.shape == (10,)
        assert q.direction.shape == (10, 3)
        assert q.sdf_feature.shape == (10, 4)

    def test_winding_for_two_bodies(self):
        """Test the sign is correct inside either of two disjoint primitives."""
        a = shapes.icosphere(0.1, 2, center=(-0.3, 0.0, 0.0))
        b = shapes.icosphere(0.1, 2, center=(0.3, 0.0, 0.0))
        mesh = build_mesh(np.vstack((a[0], b[0])), np.vstack((a[1], b[1] + len(a[0]))))
        collider = ColliderFrame(mesh)
        d = collider.query(np.array([[-0.3, 0.0, 0.0], [0.3, 0.0, 0.0], [0.0, 0.0, 0.0]])).signed_distance
        assert d[0] < 0 and d[1] < 0 and d[2] > 0

    def test_nearest_body_face(self, sphere_collider):
        """Test the single-point helper agrees with the batched query."""
        point = np.array([0.1, 0.2, 0.3])
        face, bary = nearest_body_face(sphere_collider, point)
        batch_face, batch_bary, _ = sphere_collider.nearest_faces(point[None])
        assert face == batch_face[0]
        np.testing.assert_allclose(bary, batch_bary[0])

    def test_nearest_vertices(self, sphere_collider, rng):
        """Test nearest body vertices against a dense search."""
        points = rng.normal(size=(20, 3))
        got = sphere_collider.nearest_vertices(points)
        d = np.linalg.norm(sphere_collider.vertices[None] - points[:, None], axis=2)
        np.testing.assert_array_equal(got, d.argmin(axis=1))


class TestColliderMotion:
    """Test per-face collider motion features."""

    def test_translation(self, sphere_mesh):
        """Test a translated body gives identity gradients and the offset as velocity."""
        c0 = ColliderFrame(sphere_mesh)
        c1 = ColliderFrame.from_positions(sphere_mesh, sphere_mesh.vertices + [0.01, 0.0, -0.02])
        features = collider_motion_features(c0, c1, [0, 7, 19])
        assert features.shape == (3, 12)
        np.testing.assert_allclose(features[:, :9], np.tile(np.eye(3).reshape(-1), (3, 1)), atol=1e-12)
        np.testing.assert_allclose(features[:, 9:], np.tile([0.01, 0.0, -0.02], (3, 1)), atol=1e-12)
        np.testing.assert_allclose(collider_motion_feature(c0, c1, 7), features[1])

    def test_rotation(self, sphere_mesh):
        """Test a rotated body gives R as gradient and R c - c as centroid velocity."""
        R = Rotation.from_rotvec([0.2, -0.5, 0.9]).as_matrix()
        c0 = ColliderFrame(sphere_mesh)
        c1 = ColliderFrame.from_positions(sphere_mesh, sphere_mesh.vertices @ R.T)
        faces = [0, 11, 250]
        features = collider_motion_features(c0, c1, faces)
        c = sphere_mesh.centroids[faces]
        for k in range(len(faces)):
            np.testing.assert_allclose(features[k, :9].reshape(3, 3), R, atol=1e-10)
        np.testing.assert_allclose(features[:, 9:], c @ R.T - c, atol=1e-12)

    def test_triangulation_mismatch(self, sphere_mesh):
        """Test frames with different triangulations are rejected."""
        other = ColliderFrame(build_mesh(*shapes.icosphere(0.2, 1)))
        with pytest.raises(ColliderError, match="triangulation"):
            collider_motion_features(ColliderFrame(sphere_mesh), other, [0])

    def test_degenerate_face_is_rejected(self):
        """Test a collapsed triangle cannot form a collider mesh."""
        with pytest.raises(MeshError):
            ColliderFrame(TriMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]]))
