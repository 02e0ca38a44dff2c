"""Triangle meshes, barycentric surface points, rigid transforms, pinhole cameras."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MIN_FACE_AREA = 1e-12
MIN_DEPTH = 1e-6


class GeometryError(ValueError):
    pass


class SamplingError(GeometryError):
    pass


class ProjectionError(GeometryError):
    def __init__(self, depth: float):
        super().__init__(f"point is behind the camera (depth {depth:.6g} m)")
        self.depth = depth


class Label(enum.IntEnum):
    ROBOT = 0
    SCENE = 1


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), np.asarray(t, dtype=np.float64))

    @classmethod
    def from_axis_angle(cls, axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(axis_angle_matrix(axis, angle), np.asarray(translation, dtype=np.float64))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform ``[..., 3]`` points."""
        return points @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def is_valid(self, tol: float = 1e-10) -> bool:
        r = self.rotation
        return bool(np.abs(r.T @ r - np.eye(3)).max() <= tol and abs(np.linalg.det(r) - 1.0) <= tol)

    def to_vector(self) -> np.ndarray:
        """Row-major rotation followed by translation (12 values)."""
        return np.concatenate([self.rotation.reshape(-1), self.translation])

    @classmethod
    def from_vector(cls, vec) -> "RigidTransform":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[:9].reshape(3, 3), vec[9:12])


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a (normalised) axis."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    x, y, z = a
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    body_id: int = 0
    label: Label = Label.SCENE

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise GeometryError(f"face index out of range for {len(self.vertices)} vertices")
        bad = np.flatnonzero(self.face_areas() <= MIN_FACE_AREA)
        if bad.size:
            raise GeometryError(f"degenerate faces (area <= {MIN_FACE_AREA} m^2): {bad[:10].tolist()}")

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_vertices(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def face_centroids(self) -> np.ndarray:
        return self.vertices[self.faces].mean(axis=1)

    @staticmethod
    def merge(meshes: Sequence["TriangleMesh"], body_id: int, label: Label) -> "TriangleMesh":
        verts, faces, off = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            faces.append(m.faces + off)
            off += len(m.vertices)
        return TriangleMesh(np.concatenate(verts), np.concatenate(faces), body_id, label)


def parse_obj(text: str, body_id: int = 0, label: Label = Label.SCENE) -> TriangleMesh:
    """Read the ``v``/``f`` subset of Wavefront OBJ. Faces must be triangles."""
    verts, faces = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise GeometryError(f"line {lineno}: vertex needs 3 coordinates")
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            if len(idx) != 3:
                raise GeometryError(f"line {lineno}: only triangular faces are supported, got {len(idx)} vertices")
            faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3), body_id, label)


def load_obj(path, body_id: int = 0, label: Label = Label.SCENE) -> TriangleMesh:
    return parse_obj(Path(path).read_text(), body_id, label)


def to_obj(mesh: TriangleMesh) -> str:
    lines = [f"v {float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    return "\n".join(lines) + "\n"


def box_mesh(size, center=(0.0, 0.0, 0.0), body_id: int = 0, label: Label = Label.SCENE) -> TriangleMesh:
    """Axis-aligned box with 12 outward-wound triangles."""
    sx, sy, sz = np.asarray(size, dtype=np.float64) / 2.0
    c = np.asarray(center, dtype=np.float64)
    v = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)]) + c
    f = [
        [0, 1, 3], [0, 3, 2],  # -x
        [4, 6, 7], [4, 7, 5],  # +x
        [0, 4, 5], [0, 5, 1],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [0, 2, 6], [0, 6, 4],  # -z
        [1, 5, 7], [1, 7, 3],  # +z
    ]
    return TriangleMesh(v, np.array(f), body_id, label)


def grid_mesh(x_range, y_range, n: int, z: float = 0.0, body_id: int = 0,
              label: Label = Label.SCENE) -> TriangleMesh:
    """Flat ``n x n`` grid of quads (2 triangles each) at height ``z``."""
    xs = np.linspace(x_range[0], x_range[1], n + 1)
    ys = np.linspace(y_range[0], y_range[1], n + 1)
    verts = np.array([[x, y, z] for y in ys for x in xs])
    faces = []
    for j in range(n):
        for i in range(n):
            a = j * (n + 1) + i
            b, c, d = a + 1, a + n + 1, a + n + 2
            faces += [[a, b, d], [a, d, c]]
    return TriangleMesh(verts, np.array(faces), body_id, label)


@dataclass(frozen=True)
class SurfacePoint:
    """A point pinned to a mesh surface by face index and barycentric weights."""

    face_index: int
    barycentric: tuple[float, float, float]
    label: Label = Label.SCENE
    body_id: int = 0

    def __post_init__(self):
        b = np.asarray(self.barycentric, dtype=np.float64)
        if b.shape != (3,) or abs(b.sum() - 1.0) > 1e-12 or b.min() < 0.0 or b.max() > 1.0:
            raise GeometryError(f"invalid barycentric coordinates {tuple(b)}")


def uniform_barycentric(r1: np.ndarray, r2: np.ndarray) -> np.ndarray:
    """Map two U[0,1) draws to barycentric weights uniform over a triangle."""
    s = np.sqrt(r1)
    return np.stack([1.0 - s, s * (1.0 - r2), s * r2], axis=-1)


def sample_surface_points(meshes: Sequence[TriangleMesh], n: int, crop_center, crop_half_extent: float,
                          robot_fraction: float, rng: np.random.Generator,
                          poses: dict[int, RigidTransform] | None = None) -> list[SurfacePoint]:
    """Sample ``n`` identity-carrying points over faces inside a crop cube.

    A face is eligible when its centroid (under ``poses``, identity if
    absent) lies inside the axis-aligned cube around ``crop_center``. Faces
    are drawn proportionally to area; ``floor(n * robot_fraction)`` points
    come from robot meshes and the remainder from scene meshes.
    """
    if n < 1:
        raise SamplingError("need at least one point")
    if not 0.0 <= robot_fraction <= 1.0:
        raise SamplingError(f"robot_fraction must be in [0, 1], got {robot_fraction}")
    poses = poses or {}
    center = np.asarray(crop_center, dtype=np.float64)
    n_robot = int(np.floor(n * robot_fraction))
    counts = {Label.ROBOT: n_robot, Label.SCENE: n - n_robot}

    points: list[SurfacePoint] = []
    for label in (Label.ROBOT, Label.SCENE):
        k = counts[label]
        if k == 0:
            continue
        owners, faces, areas = [], [], []
        for mesh in meshes:
            if mesh.label != label:
                continue
            pose = poses.get(mesh.body_id, RigidTransform())
            cents = pose.apply(mesh.face_centroids())
            inside = np.flatnonzero(np.all(np.abs(cents - center) <= crop_half_extent, axis=1))
            owners.append(np.full(len(inside), mesh.body_id))
            faces.append(inside)
            areas.append(mesh.face_areas()[inside])
        owners_a = np.concatenate(owners) if owners else np.zeros(0, dtype=np.int64)
        faces_a = np.concatenate(faces) if faces else np.zeros(0, dtype=np.int64)
        areas_a = np.concatenate(areas) if areas else np.zeros(0)
        if faces_a.size == 0:
            raise SamplingError(f"no {label.name.lower()} faces inside the crop cube")
        cdf = np.cumsum(areas_a)
        cdf /= cdf[-1]
        pick = np.searchsorted(cdf, rng.random(k), side="right")
        pick = np.minimum(pick, len(cdf) - 1)
        bary = uniform_barycentric(rng.random(k), rng.random(k))
        for idx, b in zip(pick, bary):
            points.append(SurfacePoint(int(faces_a[idx]), (float(b[0]), float(b[1]), float(b[2])),
                                       label, int(owners_a[idx])))
    return points


def blend(mesh: TriangleMesh, face_index, barycentric) -> np.ndarray:
    """Barycentric blend in the mesh's local frame; vectorised over points."""
    face_index = np.asarray(face_index)
    if face_index.size and (face_index.min() < 0 or face_index.max() >= mesh.n_faces):
        raise GeometryError(f"face index out of range (mesh has {mesh.n_faces} faces)")
    tri = mesh.vertices[mesh.faces[face_index]]
    b = np.asarray(barycentric, dtype=np.float64)
    return (b[..., :, None] * tri).sum(axis=-2)


def locate(sp: SurfacePoint, mesh: TriangleMesh, pose: RigidTransform) -> np.ndarray:
    """World position of a surface point given its mesh and the body pose."""
    return pose.apply(blend(mesh, sp.face_index, sp.barycentric))


@dataclass
class CameraModel:
    pose: RigidTransform  # world -> camera
    fx: float = 128.0
    fy: float = 128.0
    cx: float = 64.0
    cy: float = 64.0

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), **intrinsics) -> "CameraModel":
        """Camera at ``eye`` looking at ``target``; +z forward, +y down in the image."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        r = np.stack([right, down, fwd])  # rows: camera axes in world coords
        return cls(RigidTransform(r, -r @ eye), **intrinsics)


def default_camera() -> CameraModel:
    """Virtual 128x128 view of the workspace used by the 2-D track variant."""
    return CameraModel.look_at(eye=(0.0, -0.9, 0.9), target=(0.0, 0.35, 0.05))


def project(p, cam: CameraModel) -> np.ndarray:
    """Pinhole projection of world points ``[..., 3]`` to pixels ``[..., 2]``."""
    pc = cam.pose.apply(np.asarray(p, dtype=np.float64))
    z = pc[..., 2]
    if np.any(z <= MIN_DEPTH):
        raise ProjectionError(float(np.min(z)))
    return np.stack([cam.fx * pc[..., 0] / z + cam.cx, cam.fy * pc[..., 1] / z + cam.cy], axis=-1)
