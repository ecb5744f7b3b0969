"""Parametric garment and body generators.

Every generator returns ``(vertices, faces)`` arrays in meters with z up and
counter-clockwise outward winding, ready for :func:`geometry.build_mesh`.
Resolutions are explicit so the same surface can be meshed at several
densities.
"""

from typing import Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import MeshError

MeshArrays = Tuple[np.ndarray, np.ndarray]

_T = (1.0 + 5.0**0.5) / 2.0
_ICOSAHEDRON_VERTICES = np.array(
    [
        [-1, _T, 0], [1, _T, 0], [-1, -_T, 0], [1, -_T, 0],
        [0, -1, _T], [0, 1, _T], [0, -1, -_T], [0, 1, -_T],
        [_T, 0, -1], [_T, 0, 1], [-_T, 0, -1], [-_T, 0, 1],
    ],
    dtype=np.float64,
)  # fmt: skip
_ICOSAHEDRON_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int64,
)  # fmt: skip


def _signed_volume(vertices: np.ndarray, faces: np.ndarray) -> float:
    p = vertices[faces]
    return float(np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2])).sum() / 6.0)


def _orient_outward(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    if _signed_volume(vertices, faces) < 0:
        return faces[:, ::-1].copy()
    return faces


def _subdivide(vertices: np.ndarray, faces: np.ndarray) -> MeshArrays:
    """One step of 1-to-4 midpoint subdivision, preserving winding."""
    n = len(vertices)
    edges = np.concatenate((faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]))
    keys = np.sort(edges, axis=1)
    unique, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    mid = vertices[unique].mean(axis=1)
    m = len(faces)
    ab, bc, ca = n + inverse[:m], n + inverse[m : 2 * m], n + inverse[2 * m :]
    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    new_faces = np.concatenate(
        (
            np.column_stack((a, ab, ca)),
            np.column_stack((b, bc, ab)),
            np.column_stack((c, ca, bc)),
            np.column_stack((ab, bc, ca)),
        )
    )
    return np.vstack((vertices, mid)), new_faces


def icosphere(radius: float = 1.0, subdivisions: int = 2, center: Sequence[float] = (0.0, 0.0, 0.0)) -> MeshArrays:
    """Subdivided icosahedron projected onto a sphere."""
    if radius <= 0 or subdivisions < 0:
        raise MeshError(f"Invalid icosphere parameters radius={radius}, subdivisions={subdivisions}")
    vertices, faces = _ICOSAHEDRON_VERTICES.copy(), _ICOSAHEDRON_FACES.copy()
    for _ in range(subdivisions):
        vertices, faces = _subdivide(vertices, faces)
    vertices = vertices / np.linalg.norm(vertices, axis=1, keepdims=True) * radius
    vertices += np.asarray(center, dtype=np.float64)
    return vertices, _orient_outward(vertices, faces)


def _band_faces(index: np.ndarray, wrap: bool) -> np.ndarray:
    """Faces for a (rows, cols) vertex-index grid whose columns run
    counter-clockwise seen from above and whose rows run downward."""
    rows, cols = index.shape
    n_quads = cols if wrap else cols - 1
    c = np.arange(n_quads)
    c1 = (c + 1) % cols
    faces = []
    for r in range(rows - 1):
        a, b = index[r, c], index[r, c1]
        d, e = index[r + 1, c1], index[r + 1, c]
        faces.append(np.column_stack((a, d, b)))
        faces.append(np.column_stack((a, e, d)))
    return np.concatenate(faces)


def _lathe(radii: np.ndarray, heights: np.ndarray, segments: int, top: float, bottom: float) -> MeshArrays:
    """Closed surface of revolution around z with poles at ``top`` and ``bottom``."""
    theta = np.linspace(0.0, 2.0 * np.pi, segments, endpoint=False)
    rings = len(radii)
    ring_vertices = np.stack(
        (
            radii[:, None] * np.cos(theta)[None, :],
            radii[:, None] * np.sin(theta)[None, :],
            np.repeat(heights[:, None], segments, axis=1),
        ),
        axis=-1,
    ).reshape(-1, 3)
    vertices = np.vstack(([0.0, 0.0, top], ring_vertices, [0.0, 0.0, bottom]))
    index = 1 + np.arange(rings * segments).reshape(rings, segments)
    c = np.arange(segments)
    c1 = (c + 1) % segments
    top_cap = np.column_stack((np.zeros(segments, dtype=np.int64), index[0, c], index[0, c1]))
    bottom_pole = len(vertices) - 1
    bottom_cap = np.column_stack((np.full(segments, bottom_pole), index[-1, c1], index[-1, c]))
    faces = np.concatenate((top_cap, _band_faces(index, wrap=True), bottom_cap)).astype(np.int64)
    return vertices, _orient_outward(vertices, faces)


def capsule(
    a: Sequence[float], b: Sequence[float], radius: float, segments: int = 16, rings: int = 4
) -> MeshArrays:
    """Watertight capsule around the segment a-b; ``rings`` per hemispherical cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    axis = b - a
    length = float(np.linalg.norm(axis))
    if radius <= 0 or segments < 3 or rings < 1:
        raise MeshError(f"Invalid capsule parameters radius={radius}, segments={segments}, rings={rings}")

    # Profile from the top pole downward: upper cap, lower cap.
    phi = np.linspace(0.0, np.pi / 2, rings + 1)[1:]
    upper_r, upper_z = radius * np.sin(phi), length / 2 + radius * np.cos(phi)
    lower_r, lower_z = upper_r[::-1], -upper_z[::-1]
    if length == 0.0:
        lower_r, lower_z = lower_r[1:], lower_z[1:]
    radii = np.concatenate((upper_r, lower_r))
    heights = np.concatenate((upper_z, lower_z))
    vertices, faces = _lathe(radii, heights, segments, length / 2 + radius, -length / 2 - radius)

    if length > 0:
        rotation, _ = Rotation.align_vectors([axis / length], [[0.0, 0.0, 1.0]])
        vertices = rotation.apply(vertices)
    vertices += (a + b) / 2
    return vertices, faces


def grid_strip(width: float, height: float, nx: int, ny: int) -> MeshArrays:
    """Flat rectangular sheet in the z = 0 plane, normal +z, corner at the origin."""
    if nx < 1 or ny < 1 or width <= 0 or height <= 0:
        raise MeshError(f"Invalid grid parameters {width}x{height} with {nx}x{ny} cells")
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.column_stack((gx.ravel(), gy.ravel(), np.zeros(gx.size)))
    index = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    a, b = index[:-1, :-1].ravel(), index[:-1, 1:].ravel()
    d, e = index[1:, 1:].ravel(), index[1:, :-1].ravel()
    faces = np.concatenate((np.column_stack((a, b, d)), np.column_stack((a, d, e))))
    return vertices, faces


def cape(width: float, length: float, nx: int, ny: int, top: Sequence[float] = (0.0, 0.0, 0.0)) -> MeshArrays:
    """Vertical sheet in the xz plane hanging from its top edge, normal +y."""
    vertices, faces = grid_strip(width, length, nx, ny)
    # Sheet in the xz plane: x across, z downward from the top edge.
    hanging = np.column_stack((vertices[:, 0] - width / 2, np.zeros(len(vertices)), -vertices[:, 1]))
    return hanging + np.asarray(top, dtype=np.float64), faces


def skirt(
    top_radius: float,
    bottom_radius: float,
    length: float,
    segments: int,
    rings: int,
    waist: Sequence[float] = (0.0, 0.0, 0.0),
) -> MeshArrays:
    """Open conical tube hanging from a waist ring centered at ``waist``."""
    if segments < 3 or rings < 1 or length <= 0 or min(top_radius, bottom_radius) <= 0:
        raise MeshError("Invalid skirt parameters")
    theta = np.linspace(0.0, 2.0 * np.pi, segments, endpoint=False)
    t = np.linspace(0.0, 1.0, rings + 1)
    radius = top_radius + (bottom_radius - top_radius) * t
    z = -length * t
    vertices = np.stack(
        (
            radius[:, None] * np.cos(theta)[None, :],
            radius[:, None] * np.sin(theta)[None, :],
            np.repeat(z[:, None], segments, axis=1),
        ),
        axis=-1,
    ).reshape(-1, 3)
    index = np.arange((rings + 1) * segments).reshape(rings + 1, segments)
    faces = _band_faces(index, wrap=True)
    return vertices + np.asarray(waist, dtype=np.float64), faces


def two_panel(
    half_width: float,
    half_depth: float,
    length: float,
    columns_per_panel: int,
    rows: int,
    seam_cut: float = 0.0,
    left_seam_cut: float = 0.0,
    waist: Sequence[float] = (0.0, 0.0, 0.0),
) -> MeshArrays:
    """Front and back panel sewn along two side seams into an elliptic tube.

    ``seam_cut`` leaves the lower fraction of the +x seam unsewn and
    ``left_seam_cut`` does the same for the -x seam; cutting both fully
    separates the panels.
    """
    if columns_per_panel < 1 or rows < 1:
        raise MeshError("Two-panel garment needs at least one column and one row per panel")
    if not (0.0 <= seam_cut <= 1.0 and 0.0 <= left_seam_cut <= 1.0):
        raise MeshError("Seam cut fractions must lie in [0, 1]")

    n_cols = 2 * columns_per_panel
    theta = np.linspace(0.0, 2.0 * np.pi, n_cols, endpoint=False)
    z = -np.linspace(0.0, length, rows + 1)
    ring = np.column_stack((half_width * np.cos(theta), half_depth * np.sin(theta)))
    vertices = np.stack(
        (
            np.repeat(ring[None, :, 0], rows + 1, axis=0),
            np.repeat(ring[None, :, 1], rows + 1, axis=0),
            np.repeat(z[:, None], n_cols, axis=1),
        ),
        axis=-1,
    ).reshape(-1, 3)
    index = np.arange((rows + 1) * n_cols).reshape(rows + 1, n_cols)

    # Back panel gets its own copy of the seam column wherever the seam is cut.
    back = index.copy()
    back = np.column_stack((back, back[:, 0]))
    extra = []
    for seam_col, fraction in ((0, seam_cut), (columns_per_panel, left_seam_cut)):
        cut_edges = int(round(fraction * rows))
        if cut_edges == 0:
            continue
        first_split = 0 if cut_edges == rows else rows - cut_edges + 1
        split_rows = np.arange(first_split, rows + 1)
        new_ids = len(vertices) + sum(len(e) for e in extra) + np.arange(len(split_rows))
        extra.append(vertices[index[split_rows, seam_col]])
        back_col = n_cols if seam_col == 0 else seam_col
        back[split_rows, back_col] = new_ids

    front_faces = _band_faces(index[:, : columns_per_panel + 1], wrap=False)
    back_faces = _band_faces(back[:, columns_per_panel:], wrap=False)
    if extra:
        vertices = np.vstack([vertices] + extra)
    return vertices + np.asarray(waist, dtype=np.float64), np.concatenate((front_faces, back_faces))
