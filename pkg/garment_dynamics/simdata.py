"""Mass-spring cloth simulator producing ground-truth garment sequences.

Edge springs resist stretching, springs between the opposite vertices of
adjacent faces resist bending. Integration is symplectic Euler with
per-substep damping ``v *= exp(-c·h)``, kinematic pins that follow the body,
and position projection against analytic sphere/capsule colliders or a
watertight body mesh sequence.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.spatial.transform import Rotation

from . import shapes
from .archive import (
    CorpusEntry,
    CorpusManifest,
    SequenceData,
    load_mesh,
    read_sequence,
    sha256_file,
    write_corpus_manifest,
    write_sequence,
)
from .collider import ColliderFrame, closest_points_on_triangles
from .errors import SimulationError
from .geometry import TriMesh, build_mesh

logger = logging.getLogger(__name__)

Vector3 = Tuple[float, float, float]


class SimConfig(BaseModel):
    """Integrator, material and contact parameters (SI units)."""

    dt: float = Field(default=1.0 / 30.0, gt=0.0, description="Frame interval (s)")
    substeps: int = Field(default=100, ge=1, description="Integration substeps per frame")
    mass_density: float = Field(default=0.25, gt=0.0, description="Cloth areal density (kg/m²)")
    stretch_stiffness: float = Field(default=60.0, gt=0.0, description="Edge spring stiffness (N/m)")
    bend_stiffness: float = Field(default=2.0, gt=0.0, description="Bending spring stiffness (N/m)")
    damping: float = Field(default=2.0, ge=0.0, description="Velocity damping rate (1/s)")
    gravity: Vector3 = Field(default=(0.0, 0.0, -9.81), description="Gravity (m/s²)")
    friction: float = Field(default=0.3, ge=0.0, le=1.0, description="Coulomb friction coefficient")
    contact_offset: float = Field(default=0.003, ge=0.0, description="Projection distance outside colliders (m)")
    max_velocity: float = Field(default=50.0, gt=0.0, description="Speed treated as a blow-up (m/s)")
    velocity_noise: float = Field(default=0.0, ge=0.0, description="Std of random initial velocities (m/s)")
    audit_tolerance: float = Field(default=0.002, ge=0.0, description="Allowed penetration in corpus audits (m)")
    seed: int = Field(default=0, description="Seed for the corpus seed stream")

    @property
    def substep_dt(self) -> float:
        return self.dt / self.substeps


class Primitive(BaseModel):
    """Analytic collider piece; a sphere ignores ``b``."""

    kind: Literal["sphere", "capsule"]
    a: Vector3 = (0.0, 0.0, 0.0)
    b: Vector3 = (0.0, 0.0, 0.0)
    radius: float = Field(gt=0.0)


class MotionSpec(BaseModel):
    """Rigid keyframed body motion as a function of time."""

    kind: Literal["static", "translate", "oscillate", "orbit", "pendulum"] = "static"
    velocity: Vector3 = (0.0, 0.0, 0.0)
    direction: Vector3 = (1.0, 0.0, 0.0)
    amplitude: float = 0.0
    frequency: float = Field(default=0.5, ge=0.0)
    radius: float = Field(default=0.0, ge=0.0)
    pivot: Vector3 = (0.0, 0.0, 0.0)
    axis: Vector3 = (1.0, 0.0, 0.0)

    def transform(self, t: float) -> Tuple[np.ndarray, np.ndarray]:
        """Rotation R and translation d with x(t) = R (x - pivot) + pivot + d."""
        R = np.eye(3)
        d = np.zeros(3)
        omega = 2.0 * math.pi * self.frequency
        if self.kind == "translate":
            d = np.asarray(self.velocity) * t
        elif self.kind == "oscillate":
            direction = np.asarray(self.direction, dtype=np.float64)
            d = self.amplitude * math.sin(omega * t) * direction / np.linalg.norm(direction)
        elif self.kind == "orbit":
            d = self.radius * np.array([math.cos(omega * t) - 1.0, math.sin(omega * t), 0.0])
        elif self.kind == "pendulum":
            axis = np.asarray(self.axis, dtype=np.float64)
            angle = self.amplitude * math.sin(omega * t)
            R = Rotation.from_rotvec(axis / np.linalg.norm(axis) * angle).as_matrix()
        return R, d

    def apply(self, points: np.ndarray, t: float) -> np.ndarray:
        R, d = self.transform(t)
        pivot = np.asarray(self.pivot)
        return (np.asarray(points) - pivot) @ R.T + pivot + d


class BodySpec(BaseModel):
    """Analytic primitives under a rigid motion, or a body mesh sequence.

    ``mesh_archive`` names a sequence archive whose body track is the
    collider; ``mesh_frames`` lists one OBJ per frame with a shared
    triangulation (a single file is a static body).
    """

    primitives: List[Primitive] = Field(default_factory=list)
    motion: MotionSpec = Field(default_factory=MotionSpec)
    sphere_subdivisions: int = Field(default=3, ge=0)
    capsule_segments: int = Field(default=24, ge=3)
    mesh_archive: Optional[str] = None
    mesh_frames: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _one_source(self) -> "BodySpec":
        sources = [bool(self.primitives), self.mesh_archive is not None, bool(self.mesh_frames)]
        if sum(sources) > 1:
            raise ValueError("A body is built from primitives, a mesh archive or OBJ frames, not several")
        return self


@dataclass
class MeshBody:
    """Body mesh sampled once per frame; positions in between are linear."""

    rest: TriMesh
    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[1:] != (self.rest.n_vertices, 3):
            raise SimulationError(
                f"Body frames must have shape (k, {self.rest.n_vertices}, 3), got {self.frames.shape}"
            )
        if len(self.frames) == 0:
            raise SimulationError("A body mesh sequence needs at least one frame")

    @classmethod
    def from_sequence(cls, sequence: SequenceData) -> "MeshBody":
        if sequence.body_rest is None or sequence.body_frames is None:
            raise SimulationError(f"Sequence {sequence.name} has no body track")
        return cls(sequence.body_rest, sequence.body_frames)

    @classmethod
    def from_obj_files(cls, paths: Sequence[Path]) -> "MeshBody":
        meshes = [load_mesh(p) for p in paths]
        rest = meshes[0]
        for path, mesh in zip(paths[1:], meshes[1:]):
            if not np.array_equal(mesh.faces, rest.faces):
                raise SimulationError(f"{path} does not share the triangulation of {paths[0]}")
        return cls(rest, np.stack([m.vertices for m in meshes]))

    @classmethod
    def from_spec(cls, body: BodySpec) -> Optional["MeshBody"]:
        if body.mesh_archive is not None:
            return cls.from_sequence(read_sequence(body.mesh_archive))
        if body.mesh_frames:
            return cls.from_obj_files([Path(p) for p in body.mesh_frames])
        return None

    @property
    def is_static(self) -> bool:
        return len(self.frames) == 1

    def positions(self, frame_time: float) -> np.ndarray:
        """Vertex positions at a fractional frame index; the last frame holds."""
        last = len(self.frames) - 1
        if frame_time >= last:
            return self.frames[last]
        k = int(math.floor(frame_time))
        alpha = frame_time - k
        if alpha == 0.0:
            return self.frames[k]
        return (1.0 - alpha) * self.frames[k] + alpha * self.frames[k + 1]


class GarmentSpec(BaseModel):
    """Parametric garment; resolution fields control the meshing density."""

    kind: Literal["skirt", "cape", "two_panel", "sheet"]
    width: float = Field(default=0.3, gt=0.0)
    length: float = Field(default=0.4, gt=0.0)
    top_radius: float = Field(default=0.2, gt=0.0)
    bottom_radius: float = Field(default=0.3, gt=0.0)
    depth: float = Field(default=0.12, gt=0.0)
    segments: int = Field(default=32, ge=1)
    rings: int = Field(default=12, ge=1)
    seam_cut: float = Field(default=0.0, ge=0.0, le=1.0)
    left_seam_cut: float = Field(default=0.0, ge=0.0, le=1.0)
    offset: Vector3 = (0.0, 0.0, 0.0)
    pin_top: bool = True

    def build(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vertices, faces and pinned vertex indices."""
        if self.kind == "skirt":
            v, f = shapes.skirt(self.top_radius, self.bottom_radius, self.length, self.segments, self.rings)
        elif self.kind == "cape":
            v, f = shapes.cape(self.width, self.length, self.segments, self.rings)
        elif self.kind == "two_panel":
            v, f = shapes.two_panel(
                self.top_radius,
                self.depth,
                self.length,
                max(1, self.segments // 2),
                self.rings,
                seam_cut=self.seam_cut,
                left_seam_cut=self.left_seam_cut,
            )
        else:
            v, f = shapes.grid_strip(self.width, self.length, self.segments, self.rings)
        v = v + np.asarray(self.offset)
        if not self.pin_top:
            return v, f, np.empty(0, dtype=np.int64)
        # Flat sheets lie in z = 0 and hang from their far y edge.
        axis = 1 if self.kind == "sheet" else 2
        top = v[:, axis].max()
        return v, f, np.flatnonzero(v[:, axis] >= top - 1e-9)


class SequenceSpec(BaseModel):
    name: str
    garment: GarmentSpec
    body: BodySpec = Field(default_factory=BodySpec)
    n_frames: int = Field(default=100, ge=1)


def build_body_mesh(body: BodySpec) -> Optional[TriMesh]:
    """Union of the primitive meshes in rest pose, or None without primitives."""
    parts_v, parts_f, offset = [], [], 0
    for p in body.primitives:
        if p.kind == "sphere":
            v, f = shapes.icosphere(p.radius, body.sphere_subdivisions, p.a)
        else:
            v, f = shapes.capsule(p.a, p.b, p.radius, body.capsule_segments, rings=max(2, body.capsule_segments // 4))
        parts_v.append(v)
        parts_f.append(f + offset)
        offset += len(v)
    if not parts_v:
        return None
    return build_mesh(np.vstack(parts_v), np.vstack(parts_f))


def bending_pairs(mesh: TriMesh) -> np.ndarray:
    """Vertex pairs opposite each interior edge (one pair per adjacent face pair)."""
    dual = mesh.dual_edges
    if len(dual) == 0:
        return np.empty((0, 2), dtype=np.int64)
    fa, fb = mesh.faces[dual[:, 0]], mesh.faces[dual[:, 1]]
    # The opposite vertex of a face is the one not shared with its neighbor.
    in_b = (fa[:, :, None] == fb[:, None, :]).any(axis=2)
    in_a = (fb[:, :, None] == fa[:, None, :]).any(axis=2)
    va = fa[np.arange(len(fa)), np.argmin(in_b, axis=1)]
    vb = fb[np.arange(len(fb)), np.argmin(in_a, axis=1)]
    return np.column_stack((va, vb))


@dataclass
class SpringSystem:
    pairs: np.ndarray
    rest_length: np.ndarray
    stiffness: np.ndarray

    def forces(self, x: np.ndarray) -> np.ndarray:
        i, j = self.pairs[:, 0], self.pairs[:, 1]
        d = x[j] - x[i]
        length = np.linalg.norm(d, axis=1)
        scale = self.stiffness * (length - self.rest_length) / np.where(length > 0, length, 1.0)
        f = d * scale[:, None]
        n = len(x)
        out = np.empty_like(x)
        for k in range(3):
            out[:, k] = np.bincount(i, weights=f[:, k], minlength=n) - np.bincount(j, weights=f[:, k], minlength=n)
        return out


def build_springs(mesh: TriMesh, config: SimConfig) -> SpringSystem:
    edges = mesh.edges
    bends = bending_pairs(mesh)
    pairs = np.vstack((edges, bends))
    rest = np.linalg.norm(mesh.vertices[pairs[:, 1]] - mesh.vertices[pairs[:, 0]], axis=1)
    stiffness = np.concatenate(
        (np.full(len(edges), config.stretch_stiffness), np.full(len(bends), config.bend_stiffness))
    )
    return SpringSystem(pairs=pairs, rest_length=rest, stiffness=stiffness)


def vertex_masses(mesh: TriMesh, density: float) -> np.ndarray:
    masses = np.zeros(mesh.n_vertices)
    np.add.at(masses, mesh.faces.reshape(-1), np.repeat(mesh.areas * density / 3.0, 3))
    return masses


def required_substeps(mesh: TriMesh, config: SimConfig) -> int:
    """Smallest substep count satisfying h·sqrt(2·max(Σk/m)) < 2."""
    springs = build_springs(mesh, config)
    masses = vertex_masses(mesh, config.mass_density)
    k_sum = np.bincount(springs.pairs.reshape(-1), weights=np.repeat(springs.stiffness, 2), minlength=len(masses))
    omega = math.sqrt(2.0 * float(np.max(k_sum / masses)))
    return int(math.floor(config.dt * omega / 2.0)) + 1


def _project_primitives(
    x: np.ndarray,
    v: np.ndarray,
    primitives: Sequence[Primitive],
    motion: MotionSpec,
    t_prev: float,
    t: float,
    free: np.ndarray,
    config: SimConfig,
):
    """Push free vertices out of the posed primitives and apply contact friction in place."""
    h = t - t_prev
    for p in primitives:
        a = motion.apply(np.asarray(p.a)[None], t)[0]
        if p.kind == "sphere":
            closest = np.broadcast_to(a, x.shape)
        else:
            b = motion.apply(np.asarray(p.b)[None], t)[0]
            ab = b - a
            s = np.clip(((x - a) @ ab) / max(float(ab @ ab), 1e-30), 0.0, 1.0)
            closest = a + s[:, None] * ab
        offset = x - closest
        dist = np.linalg.norm(offset, axis=1)
        limit = p.radius + config.contact_offset
        hit = free & (dist < limit)
        if not hit.any():
            continue
        normal = offset[hit] / np.where(dist[hit] > 0, dist[hit], 1.0)[:, None]
        normal[dist[hit] == 0] = (0.0, 0.0, 1.0)
        x[hit] = closest[hit] + normal * limit

        # Body velocity at the contact point from the rigid motion.
        R_prev, d_prev = motion.transform(t_prev)
        R_now, d_now = motion.transform(t)
        pivot = np.asarray(motion.pivot)
        local = (x[hit] - pivot - d_now) @ R_now
        body_v = (x[hit] - (local @ R_prev.T + pivot + d_prev)) / h
        v[hit] = _contact_velocity(v[hit], body_v, normal, config.friction)


def _contact_velocity(v: np.ndarray, body_v: np.ndarray, normal: np.ndarray, friction: float) -> np.ndarray:
    """Drop the approaching normal velocity relative to the body, then apply Coulomb friction."""
    rel = v - body_v
    vn = np.einsum("ij,ij->i", rel, normal)
    rel -= np.minimum(vn, 0.0)[:, None] * normal
    tangential = rel - np.einsum("ij,ij->i", rel, normal)[:, None] * normal
    t_norm = np.linalg.norm(tangential, axis=1)
    normal_speed = np.abs(np.minimum(vn, 0.0))
    shrink = np.where(
        t_norm > 0,
        np.maximum(0.0, 1.0 - friction * normal_speed / np.maximum(t_norm, 1e-30)),
        1.0,
    )
    rel -= (1.0 - shrink)[:, None] * tangential
    return body_v + rel


def _project_mesh(
    x: np.ndarray,
    v: np.ndarray,
    collider: ColliderFrame,
    body_prev: np.ndarray,
    h: float,
    free: np.ndarray,
    config: SimConfig,
):
    """Push free vertices within the contact offset of a body mesh out along the surface normal."""
    lo = collider.vertices.min(axis=0) - config.contact_offset
    hi = collider.vertices.max(axis=0) + config.contact_offset
    candidates = np.flatnonzero(free & ((x >= lo) & (x <= hi)).all(axis=1))
    if len(candidates) == 0:
        return
    sdf = collider.query(x[candidates])
    hit = sdf.signed_distance < config.contact_offset
    if not hit.any():
        return
    idx = candidates[hit]
    signed = sdf.signed_distance[hit]
    face = sdf.nearest_face[hit]
    nearest = sdf.nearest_point[hit]
    # direction points from the vertex to the surface
    normal = np.where((signed < 0)[:, None], sdf.direction[hit], -sdf.direction[hit])
    on_surface = signed == 0
    normal[on_surface] = collider.mesh.normals[face[on_surface]]
    x[idx] = nearest + normal * config.contact_offset

    # Body velocity of the contact point through its barycentric coordinates.
    corners = collider.mesh.faces[face]
    tri = collider.vertices[corners]
    bary = closest_points_on_triangles(nearest, tri[:, 0], tri[:, 1], tri[:, 2])
    body_v = np.einsum("ij,ijk->ik", bary, tri - body_prev[corners]) / h
    v[idx] = _contact_velocity(v[idx], body_v, normal, config.friction)


@dataclass
class SimulationResult:
    garment_rest: TriMesh
    garment_frames: np.ndarray
    body_rest: Optional[TriMesh]
    body_frames: Optional[np.ndarray]
    pinned: np.ndarray
    fps: float

    def to_sequence(self, name: str, config: dict, metadata: Optional[dict] = None) -> SequenceData:
        return SequenceData(
            name=name,
            garment_rest=self.garment_rest,
            garment_frames=self.garment_frames,
            fps=self.fps,
            body_rest=self.body_rest,
            body_frames=self.body_frames,
            pinned=self.pinned,
            config=config,
            metadata=metadata or {},
        )


def simulate(
    rest_garment: TriMesh,
    sim_config: SimConfig,
    n_frames: int,
    body: Optional[Union[BodySpec, MeshBody]] = None,
    pinned: Optional[Sequence[int]] = None,
    initial_velocity: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
    on_frame: Optional[Callable[[int], None]] = None,
) -> SimulationResult:
    """Integrate ``n_frames`` frames (frame 0 is the rest state).

    ``body`` is a primitive body spec, a mesh-sourced spec or a loaded
    :class:`MeshBody`. Pins follow the primitive motion and stay put for
    mesh bodies.
    """
    if n_frames < 1:
        raise SimulationError("A simulation needs at least one frame")
    if isinstance(body, MeshBody):
        mesh_body, body = body, BodySpec()
    else:
        body = body or BodySpec()
        mesh_body = MeshBody.from_spec(body)
    if mesh_body is not None and not mesh_body.is_static and len(mesh_body.frames) < n_frames:
        raise SimulationError(f"Body mesh sequence has {len(mesh_body.frames)} frames, {n_frames} requested")
    config = sim_config
    needed = required_substeps(rest_garment, config)
    if config.substeps < needed:
        raise SimulationError(
            f"Unstable configuration: {config.substeps} substeps per frame, at least {needed} needed "
            f"for the stiffest spring"
        )

    springs = build_springs(rest_garment, config)
    masses = vertex_masses(rest_garment, config.mass_density)
    inv_mass = 1.0 / masses
    gravity = np.asarray(config.gravity, dtype=np.float64)
    pins = np.asarray(pinned if pinned is not None else [], dtype=np.int64)
    free = np.ones(rest_garment.n_vertices, dtype=bool)
    free[pins] = False
    rest_pins = rest_garment.vertices[pins]

    x = rest_garment.vertices.copy()
    v = np.zeros_like(x) if initial_velocity is None else np.array(initial_velocity, dtype=np.float64)
    if rng is not None and config.velocity_noise > 0:
        v[free] += rng.normal(0.0, config.velocity_noise, size=v[free].shape)
    v[pins] = 0.0

    body_rest = mesh_body.rest if mesh_body is not None else build_body_mesh(body)
    frames = np.empty((n_frames, rest_garment.n_vertices, 3))
    body_frames = None if body_rest is None else np.empty((n_frames, body_rest.n_vertices, 3))
    frames[0] = x
    if mesh_body is not None:
        body_frames[0] = mesh_body.positions(0.0)
        body_prev = body_frames[0]
        collider = ColliderFrame.from_positions(mesh_body.rest, body_prev)
    elif body_frames is not None:
        body_frames[0] = body.motion.apply(body_rest.vertices, 0.0)

    h = config.substep_dt
    decay = math.exp(-config.damping * h)
    for frame in range(1, n_frames):
        for sub in range(config.substeps):
            t_prev = ((frame - 1) * config.substeps + sub) * h
            t = t_prev + h
            v *= decay
            v += h * (springs.forces(x) * inv_mass[:, None] + gravity)
            if len(pins):
                target = body.motion.apply(rest_pins, t)
                v[pins] = (target - x[pins]) / h
            x += h * v
            if body.primitives:
                _project_primitives(x, v, body.primitives, body.motion, t_prev, t, free, config)
            elif mesh_body is not None:
                body_now = mesh_body.positions(frame - 1 + (sub + 1) / config.substeps)
                if not mesh_body.is_static:
                    collider = ColliderFrame.from_positions(mesh_body.rest, body_now)
                _project_mesh(x, v, collider, body_prev, h, free, config)
                body_prev = body_now

        speed = np.linalg.norm(v, axis=1)
        if not np.isfinite(x).all() or speed.max() > config.max_velocity:
            raise SimulationError(
                f"Simulation blew up at frame {frame} (max speed {speed.max():.3g} m/s)", frame=frame
            )
        frames[frame] = x
        if mesh_body is not None:
            body_frames[frame] = mesh_body.positions(frame)
        elif body_frames is not None:
            body_frames[frame] = body.motion.apply(body_rest.vertices, frame * config.dt)
        if on_frame is not None:
            on_frame(frame)

    return SimulationResult(
        garment_rest=rest_garment,
        garment_frames=frames,
        body_rest=body_rest,
        body_frames=body_frames,
        pinned=pins,
        fps=1.0 / config.dt,
    )


def penetration_audit(result: SimulationResult) -> float:
    """Most negative signed distance of any garment vertex to the body mesh over all frames."""
    if result.body_rest is None:
        return 0.0
    worst = math.inf
    for positions, body_positions in zip(result.garment_frames, result.body_frames):
        collider = ColliderFrame.from_positions(result.body_rest, body_positions)
        worst = min(worst, float(np.min(collider.query(positions).signed_distance)))
    return worst


def simulate_spec(
    spec: SequenceSpec, config: SimConfig, seed: Optional[np.random.SeedSequence] = None
) -> SimulationResult:
    vertices, faces, pinned = spec.garment.build()
    mesh = build_mesh(vertices, faces)
    rng = np.random.default_rng(seed) if seed is not None else None
    logger.info(f"Simulating {spec.name}: {mesh.n_faces} faces, {spec.n_frames} frames")
    return simulate(mesh, config, spec.n_frames, body=spec.body, pinned=pinned, rng=rng)


def default_corpus_specs(n_frames: int = 100, resolution: int = 1) -> List[SequenceSpec]:
    """Skirt on an orbiting sphere, cape on a capsule pendulum, a cut two-panel
    garment, and the skirt again at twice the resolution."""
    sphere = Primitive(kind="sphere", a=(0.0, 0.0, -0.1), radius=0.21)
    skirt = GarmentSpec(
        kind="skirt", top_radius=0.2, bottom_radius=0.35, length=0.45, segments=32 * resolution, rings=10 * resolution
    )
    orbit = MotionSpec(kind="orbit", radius=0.1, frequency=0.5)
    capsule = Primitive(kind="capsule", a=(0.0, 0.0, 0.0), b=(0.0, 0.0, -0.4), radius=0.08)
    cape = GarmentSpec(
        kind="cape", width=0.3, length=0.45, segments=12 * resolution, rings=16 * resolution, offset=(0.0, -0.1, 0.02)
    )
    pendulum = MotionSpec(kind="pendulum", amplitude=0.4, frequency=0.5, pivot=(0.0, 0.0, 0.3), axis=(1.0, 0.0, 0.0))
    panels = GarmentSpec(
        kind="two_panel",
        top_radius=0.24,
        depth=0.24,
        length=0.4,
        segments=32 * resolution,
        rings=10 * resolution,
        seam_cut=0.5,
    )
    sway = MotionSpec(kind="oscillate", amplitude=0.08, frequency=0.5, direction=(1.0, 0.0, 0.0))
    return [
        SequenceSpec(
            name="skirt_orbit",
            garment=skirt,
            body=BodySpec(primitives=[sphere], motion=orbit),
            n_frames=n_frames,
        ),
        SequenceSpec(
            name="cape_pendulum",
            garment=cape,
            body=BodySpec(primitives=[capsule], motion=pendulum),
            n_frames=n_frames,
        ),
        SequenceSpec(
            name="panels_cut",
            garment=panels,
            body=BodySpec(primitives=[sphere], motion=sway),
            n_frames=n_frames,
        ),
        SequenceSpec(
            name="skirt_orbit_remeshed",
            garment=skirt.model_copy(update={"segments": 2 * skirt.segments, "rings": 2 * skirt.rings}),
            body=BodySpec(primitives=[sphere], motion=orbit),
            n_frames=n_frames,
        ),
    ]


def make_corpus(
    specs: Sequence[SequenceSpec],
    sim_config: SimConfig,
    output_dir,
    threads: int = 1,
    on_sequence: Optional[Callable[[str], None]] = None,
) -> CorpusManifest:
    """Simulate every spec into ``output_dir/<name>`` and write the corpus manifest.

    Each sequence draws from its own child of the configured seed, so results
    do not depend on the thread count.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(sim_config.seed).spawn(len(specs))

    def run(index: int) -> CorpusEntry:
        spec = specs[index]
        result = simulate_spec(spec, sim_config, seeds[index])
        worst = penetration_audit(result)
        if worst < -sim_config.audit_tolerance:
            raise SimulationError(
                f"Sequence {spec.name} penetrates the body by {-worst * 1000:.2f} mm "
                f"(tolerance {sim_config.audit_tolerance * 1000:.2f} mm)"
            )
        config = {"sim": sim_config.model_dump(), "spec": spec.model_dump()}
        sequence = result.to_sequence(spec.name, config, metadata={"min_signed_distance": worst})
        target = output_dir / spec.name
        write_sequence(target, sequence)
        if on_sequence is not None:
            on_sequence(spec.name)
        return CorpusEntry(
            name=spec.name,
            path=spec.name,
            manifest_sha256=sha256_file(target / "manifest.json"),
            n_frames=spec.n_frames,
            n_faces=result.garment_rest.n_faces,
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            entries = list(executor.map(run, range(len(specs))))
    else:
        entries = [run(i) for i in range(len(specs))]

    manifest = CorpusManifest(sequences=entries, config={"sim": sim_config.model_dump()})
    write_corpus_manifest(output_dir, manifest)
    logger.info(f"Corpus written to {output_dir}: {len(entries)} sequences")
    return manifest
