"""On-disk formats: OBJ meshes, packed frame files, sequence archives and the
geodesic cache.

A sequence archive is a directory::

    manifest.json          SequenceManifest (pydantic), with sha256 checksums
    garment_rest.obj       rest garment
    garment_frames.bin     packed positions, one block per frame
    body_rest.obj          optional collider rest mesh
    body_frames.bin        optional collider positions

Archives are written into a temporary sibling directory and renamed into
place once complete.
"""

import hashlib
import logging
import os
import shutil
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from .errors import ArchiveError, MeshError
from .geometry import DEGENERATE_AREA, GeodesicField, TriMesh, build_mesh, geodesic_field

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

FRAMES_MAGIC = b"GDFRAMES"
FRAMES_VERSION = 1
_FRAMES_HEADER = struct.Struct("<8sIII32s")
MANIFEST_NAME = "manifest.json"
CORPUS_MANIFEST_NAME = "corpus.json"
ARCHIVE_FORMAT_VERSION = 1


# -------------------------------------------------------------------------
# OBJ
# -------------------------------------------------------------------------


def read_obj(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    """Positions and triangle faces from an OBJ file (UVs and normals ignored)."""
    path = Path(path)
    if not path.is_file():
        raise ArchiveError(f"OBJ file not found: {path}")
    vertices: List[List[float]] = []
    faces: List[List[int]] = []
    with path.open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] not in ("v", "f"):
                continue
            try:
                values = [float(x) if parts[0] == "v" else int(x.split("/")[0]) for x in parts[1:]]
            except ValueError as e:
                raise ArchiveError(f"{path}:{line_no}: malformed OBJ line: {e}") from e
            if parts[0] == "v":
                if len(values) < 3:
                    raise ArchiveError(f"{path}:{line_no}: vertex needs three coordinates")
                vertices.append(values[:3])
            elif len(values) != 3:
                raise ArchiveError(f"{path}:{line_no}: only triangle faces are supported")
            else:
                faces.append([c - 1 if c > 0 else len(vertices) + c for c in values])
    if not faces:
        raise ArchiveError(f"OBJ file has no faces: {path}")
    return np.asarray(vertices, dtype=np.float64), np.asarray(faces, dtype=np.int64)


def write_obj(path: PathLike, vertices: np.ndarray, faces: np.ndarray, normals: Optional[np.ndarray] = None) -> Path:
    """Write positions (9 significant digits), optional per-vertex normals, and faces."""
    path = Path(path)
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in np.asarray(vertices, dtype=np.float64)]
    if normals is not None:
        lines += [f"vn {x:.9g} {y:.9g} {z:.9g}" for x, y, z in np.asarray(normals, dtype=np.float64)]
        lines += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in np.asarray(faces) + 1]
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in np.asarray(faces) + 1]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_mesh(path: PathLike, degenerate_area: float = DEGENERATE_AREA) -> TriMesh:
    vertices, faces = read_obj(path)
    try:
        return build_mesh(vertices, faces, degenerate_area)
    except MeshError as e:
        raise MeshError(f"{path}: {e}", face=e.face) from e


# -------------------------------------------------------------------------
# Packed frames
# -------------------------------------------------------------------------


def topology_hash(faces: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(faces, dtype="<i8").tobytes()).hexdigest()


def write_frames(path: PathLike, frames: np.ndarray, faces: np.ndarray) -> Path:
    """Little-endian float32 positions behind a header with counts and topology hash."""
    frames = np.asarray(frames)
    if frames.ndim != 3 or frames.shape[2] != 3:
        raise ArchiveError(f"Frames must have shape (T, n, 3), got {frames.shape}")
    header = _FRAMES_HEADER.pack(
        FRAMES_MAGIC, FRAMES_VERSION, frames.shape[0], frames.shape[1], bytes.fromhex(topology_hash(faces))
    )
    path = Path(path)
    with path.open("wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())
    return path


def read_frames(path: PathLike, faces: Optional[np.ndarray] = None) -> np.ndarray:
    """Frames as float64 (T, n, 3); checks the topology hash when ``faces`` is given."""
    path = Path(path)
    if not path.is_file():
        raise ArchiveError(f"Frame file not found: {path}")
    data = path.read_bytes()
    if len(data) < _FRAMES_HEADER.size:
        raise ArchiveError(f"Frame file {path} is truncated")
    magic, version, n_frames, n_vertices, topo = _FRAMES_HEADER.unpack_from(data)
    if magic != FRAMES_MAGIC or version != FRAMES_VERSION:
        raise ArchiveError(f"{path} is not a version {FRAMES_VERSION} frame file")
    expected = _FRAMES_HEADER.size + n_frames * n_vertices * 3 * 4
    if len(data) != expected:
        raise ArchiveError(f"Frame file {path} has {len(data)} bytes, header declares {expected}")
    if faces is not None and topo.hex() != topology_hash(faces):
        raise ArchiveError(f"Frame file {path} was written for a different triangulation")
    frames = np.frombuffer(data, dtype="<f4", offset=_FRAMES_HEADER.size)
    return frames.reshape(n_frames, n_vertices, 3).astype(np.float64)


# -------------------------------------------------------------------------
# Sequence archives
# -------------------------------------------------------------------------


class MeshEntry(BaseModel):
    rest: str
    frames: str
    n_vertices: int = Field(ge=1)
    n_faces: int = Field(ge=1)
    topology_hash: str


class SequenceManifest(BaseModel):
    format_version: int = ARCHIVE_FORMAT_VERSION
    name: str
    fps: float = Field(gt=0.0)
    n_frames: int = Field(ge=0)
    garment: MeshEntry
    body: Optional[MeshEntry] = None
    pinned: List[int] = Field(default_factory=list)
    config: Dict[str, Any] = Field(default_factory=dict)
    metadata: Dict[str, Any] = Field(default_factory=dict)
    checksums: Dict[str, str] = Field(default_factory=dict)


class CorpusEntry(BaseModel):
    name: str
    path: str
    manifest_sha256: str
    n_frames: int
    n_faces: int


class CorpusManifest(BaseModel):
    format_version: int = ARCHIVE_FORMAT_VERSION
    sequences: List[CorpusEntry] = Field(default_factory=list)
    config: Dict[str, Any] = Field(default_factory=dict)


@dataclass
class SequenceData:
    """Garment (and optional collider) trajectory with fixed topology."""

    name: str
    garment_rest: TriMesh
    garment_frames: np.ndarray
    fps: float
    body_rest: Optional[TriMesh] = None
    body_frames: Optional[np.ndarray] = None
    pinned: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    config: Dict[str, Any] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.garment_frames)


def sha256_file(path: PathLike) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _replace_directory(tmp: Path, target: Path):
    if target.exists():
        backup = target.with_name(f".{target.name}.old-{os.getpid()}")
        target.rename(backup)
        tmp.rename(target)
        shutil.rmtree(backup)
    else:
        tmp.rename(target)


def write_sequence(directory: PathLike, sequence: SequenceData) -> SequenceManifest:
    """Write a sequence archive atomically (temporary directory + rename)."""
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    if sequence.body_rest is not None and sequence.body_frames is not None:
        if len(sequence.body_frames) != sequence.n_frames:
            raise ArchiveError(
                f"Sequence {sequence.name}: {len(sequence.body_frames)} body frames for "
                f"{sequence.n_frames} garment frames"
            )

    tmp = Path(tempfile.mkdtemp(prefix=f".{directory.name}.", dir=directory.parent))
    try:
        garment = sequence.garment_rest
        write_obj(tmp / "garment_rest.obj", garment.vertices, garment.faces)
        write_frames(tmp / "garment_frames.bin", sequence.garment_frames, garment.faces)
        garment_entry = MeshEntry(
            rest="garment_rest.obj",
            frames="garment_frames.bin",
            n_vertices=garment.n_vertices,
            n_faces=garment.n_faces,
            topology_hash=topology_hash(garment.faces),
        )
        body_entry = None
        if sequence.body_rest is not None and sequence.body_frames is not None:
            body = sequence.body_rest
            write_obj(tmp / "body_rest.obj", body.vertices, body.faces)
            write_frames(tmp / "body_frames.bin", sequence.body_frames, body.faces)
            body_entry = MeshEntry(
                rest="body_rest.obj",
                frames="body_frames.bin",
                n_vertices=body.n_vertices,
                n_faces=body.n_faces,
                topology_hash=topology_hash(body.faces),
            )

        files = [garment_entry.rest, garment_entry.frames]
        if body_entry is not None:
            files += [body_entry.rest, body_entry.frames]
        manifest = SequenceManifest(
            name=sequence.name,
            fps=sequence.fps,
            n_frames=sequence.n_frames,
            garment=garment_entry,
            body=body_entry,
            pinned=[int(i) for i in sequence.pinned],
            config=sequence.config,
            metadata=sequence.metadata,
            checksums={name: sha256_file(tmp / name) for name in files},
        )
        (tmp / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
        _replace_directory(tmp, directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    logger.debug(f"Wrote sequence archive {directory} ({sequence.n_frames} frames)")
    return manifest


def read_manifest(directory: PathLike) -> SequenceManifest:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise ArchiveError(f"Sequence manifest not found: {path}")
    try:
        return SequenceManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ArchiveError(f"Malformed sequence manifest {path}: {e}") from e


def verify_sequence(directory: PathLike, manifest: Optional[SequenceManifest] = None) -> SequenceManifest:
    """Check every listed file against its manifest checksum."""
    directory = Path(directory)
    manifest = manifest or read_manifest(directory)
    for name, expected in manifest.checksums.items():
        path = directory / name
        if not path.is_file():
            raise ArchiveError(f"Archive {directory} is missing {name}")
        if sha256_file(path) != expected:
            raise ArchiveError(f"Checksum mismatch for {path}")
    return manifest


def read_sequence(
    directory: PathLike, verify: bool = True, degenerate_area: float = DEGENERATE_AREA
) -> SequenceData:
    directory = Path(directory)
    manifest = verify_sequence(directory) if verify else read_manifest(directory)

    garment = load_mesh(directory / manifest.garment.rest, degenerate_area)
    if garment.n_faces != manifest.garment.n_faces or garment.n_vertices != manifest.garment.n_vertices:
        raise ArchiveError(f"Garment mesh in {directory} does not match its manifest topology")
    frames = read_frames(directory / manifest.garment.frames, garment.faces)
    if len(frames) != manifest.n_frames or frames.shape[1] != garment.n_vertices:
        raise ArchiveError(
            f"Archive {directory}: manifest declares {manifest.n_frames} frames, found {len(frames)}"
        )

    body_rest = body_frames = None
    if manifest.body is not None:
        body_rest = load_mesh(directory / manifest.body.rest, degenerate_area)
        body_frames = read_frames(directory / manifest.body.frames, body_rest.faces)
        if len(body_frames) != manifest.n_frames:
            raise ArchiveError(f"Archive {directory}: body frame count does not match the manifest")

    return SequenceData(
        name=manifest.name,
        garment_rest=garment,
        garment_frames=frames,
        fps=manifest.fps,
        body_rest=body_rest,
        body_frames=body_frames,
        pinned=np.asarray(manifest.pinned, dtype=np.int64),
        config=manifest.config,
        metadata=manifest.metadata,
    )


def write_corpus_manifest(directory: PathLike, manifest: CorpusManifest) -> Path:
    path = Path(directory) / CORPUS_MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    tmp.replace(path)
    return path


def read_corpus(
    directory: PathLike, verify: bool = True, degenerate_area: float = DEGENERATE_AREA
) -> List[SequenceData]:
    """All sequences of a corpus directory, or a single archive if ``directory`` is one."""
    directory = Path(directory)
    if (directory / MANIFEST_NAME).is_file():
        return [read_sequence(directory, verify=verify, degenerate_area=degenerate_area)]
    path = directory / CORPUS_MANIFEST_NAME
    if not path.is_file():
        raise ArchiveError(f"{directory} is neither a sequence archive nor a corpus")
    try:
        corpus = CorpusManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ArchiveError(f"Malformed corpus manifest {path}: {e}") from e
    sequences = []
    for entry in corpus.sequences:
        seq_dir = directory / entry.path
        if verify and sha256_file(seq_dir / MANIFEST_NAME) != entry.manifest_sha256:
            raise ArchiveError(f"Corpus checksum mismatch for {seq_dir / MANIFEST_NAME}")
        sequences.append(read_sequence(seq_dir, verify=verify, degenerate_area=degenerate_area))
    return sequences


# -------------------------------------------------------------------------
# Geodesic cache
# -------------------------------------------------------------------------


def geodesic_cache_path(cache_dir: PathLike, mesh: TriMesh) -> Path:
    return Path(cache_dir) / f"{mesh.content_hash()}.npy"


def cached_geodesic_field(
    mesh: TriMesh, cache_dir: Optional[PathLike] = None, scale: float = 1.0, workers: int = 1
) -> GeodesicField:
    """Load the rest-mesh geodesic field from ``cache_dir``, computing and storing it if absent."""
    if cache_dir is None:
        return geodesic_field(mesh, scale=scale, workers=workers)
    path = geodesic_cache_path(cache_dir, mesh)
    if path.is_file():
        try:
            D = np.load(path, allow_pickle=False)
        except (OSError, ValueError) as e:
            raise ArchiveError(f"Geodesic cache file {path} is unreadable: {e}") from e
        if D.shape == (mesh.n_faces, mesh.n_faces) and D.dtype == np.float32:
            logger.debug(f"Geodesic field loaded from {path}")
            D.setflags(write=False)
            return GeodesicField(D=D, scale=scale)
        logger.warning(f"Ignoring geodesic cache file {path} with unexpected shape {D.shape}")

    result = geodesic_field(mesh, scale=scale, workers=workers)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.npy")
    np.save(tmp, result.D, allow_pickle=False)
    tmp.replace(path)
    logger.info(f"Geodesic field for {mesh.n_faces} faces cached at {path}")
    return result
