"""Turn episodes and point tracks into chunk-aligned training targets."""

from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraModel, Label, default_camera, project
from .world import Episode, Observation

TRACKS_MAGIC = b"P4RT"
TRACKS_VERSION = 1
ACTION_SCALE = np.array([0.05, 0.05, 0.05, 1.0])  # env units -> policy units


class WindowError(ValueError):
    pass


class TrackFileError(ValueError):
    pass


class VariantKind(str, enum.Enum):
    FULL3D = "full3d"
    GOAL_ONLY = "goal_only"
    TRACK2D = "track2d"
    ROBOT_ONLY = "robot_only"
    SCENE_ONLY = "scene_only"


@dataclass
class SupervisionVariant:
    kind: VariantKind = VariantKind.FULL3D
    camera: CameraModel | None = None

    def __post_init__(self):
        self.kind = VariantKind(self.kind)
        if self.kind is VariantKind.TRACK2D and self.camera is None:
            self.camera = default_camera()

    @property
    def target_dim(self) -> int:
        return 2 if self.kind is VariantKind.TRACK2D else 3

    def point_subset(self, labels: np.ndarray) -> np.ndarray:
        """Indices of the points this variant supervises, in original order."""
        labels = np.asarray(labels)
        if self.kind is VariantKind.ROBOT_ONLY:
            idx = np.flatnonzero(labels == Label.ROBOT)
        elif self.kind is VariantKind.SCENE_ONLY:
            idx = np.flatnonzero(labels == Label.SCENE)
        else:
            return np.arange(len(labels))
        if idx.size == 0:
            raise WindowError(f"{self.kind.value}: no points carry the required label")
        return idx


@dataclass
class TrackWindow:
    t: int
    points: np.ndarray  # P_t [Np, 3]
    delta: np.ndarray  # [H, Np, 3]
    labels: np.ndarray  # [Np]
    actions: np.ndarray  # [H, action_dim]
    observation: Observation
    frames: np.ndarray = field(repr=False, default=None)  # P_t .. P_{t+H}: [H+1, Np, 3]


def displacements(tracks: np.ndarray, t: int, H: int) -> np.ndarray:
    """``delta[h] = P[t+h+1] - P[t+h]`` for ``h < H``."""
    tracks = np.asarray(tracks)
    if t < 0 or t + H + 1 > len(tracks):
        raise WindowError(f"window t={t}, H={H} exceeds episode length {len(tracks)}")
    seg = tracks[t:t + H + 1]
    return seg[1:] - seg[:-1]


def window_starts(T: int, H: int, stride: int = 1) -> np.ndarray:
    """Valid starts: the window spans P_t .. P_{t+H+1}, so t + H + 2 <= T."""
    if T < H + 2:
        raise WindowError(f"episode of length {T} is too short for horizon {H} (needs {H + 2})")
    return np.arange(0, T - H - 1, stride)


def build_windows(episode: Episode, H: int, stride: int = 1) -> list[TrackWindow]:
    if episode.tracks is None:
        raise WindowError("episode has no point tracks")
    out = []
    for t in window_starts(episode.length, H, stride):
        t = int(t)
        frames = episode.tracks[t:t + H + 1]
        out.append(TrackWindow(t, frames[0], displacements(episode.tracks, t, H), episode.labels,
                               episode.actions[t:t + H], episode.observation(t), frames))
    return out


def make_variant(window: TrackWindow, variant: SupervisionVariant) -> tuple[np.ndarray, dict]:
    """Target array for one window plus metadata (kind, point count, indices)."""
    kind = variant.kind
    idx = variant.point_subset(window.labels)
    if kind is VariantKind.FULL3D:
        target = window.delta
    elif kind is VariantKind.GOAL_ONLY:
        target = window.frames[-1]
    elif kind is VariantKind.TRACK2D:
        if variant.camera is None:
            raise WindowError("track2d needs a camera")
        px = project(window.frames, variant.camera)
        target = px[1:] - px[:-1]
    else:
        target = window.delta[:, idx]
    return target, {"kind": kind.value, "n_points": int(len(idx)), "indices": idx}


def normalize_points(points: np.ndarray, gripper: np.ndarray) -> np.ndarray:
    """Head input: points relative to the gripper, in metres."""
    return points - np.asarray(gripper)[..., None, :]


@dataclass
class WindowBatch:
    """Stacked training records; every array has the window count as axis 0."""

    scene: np.ndarray
    proprio: np.ndarray
    task_id: np.ndarray
    actions: np.ndarray  # policy units [N, H, A]
    head_points: np.ndarray  # normalised P_t restricted to the supervised subset
    points: np.ndarray  # normalised full P_t (backbone-token input)
    target: np.ndarray
    episode_index: np.ndarray
    t: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    def take(self, idx) -> "WindowBatch":
        return WindowBatch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


def stack_windows(episodes: list[Episode], H: int, variant: SupervisionVariant, stride: int = 1) -> WindowBatch:
    """Vectorised ``build_windows`` + ``make_variant`` over many episodes."""
    cols = {k: [] for k in WindowBatch.__dataclass_fields__}
    for ei, ep in enumerate(episodes):
        if ep.tracks is None:
            raise WindowError(f"episode {ei} has no point tracks")
        ts = window_starts(ep.length, H, stride)
        frames = ep.tracks[ts[:, None] + np.arange(H + 1)]  # [n, H+1, Np, 3]
        idx = variant.point_subset(ep.labels)
        if variant.kind is VariantKind.GOAL_ONLY:
            target = frames[:, -1]
        elif variant.kind is VariantKind.TRACK2D:
            px = project(frames, variant.camera)
            target = px[:, 1:] - px[:, :-1]
        else:
            target = (frames[:, 1:] - frames[:, :-1])[:, :, idx]
        grip = ep.proprio[ts, :3]
        pts = normalize_points(frames[:, 0], grip)
        cols["scene"].append(ep.scene_features[ts])
        cols["proprio"].append(ep.proprio[ts])
        cols["task_id"].append(np.full(len(ts), int(ep.task)))
        cols["actions"].append(ep.actions[ts[:, None] + np.arange(H)] / ACTION_SCALE)
        cols["head_points"].append(pts[:, idx])
        cols["points"].append(pts)
        cols["target"].append(target)
        cols["episode_index"].append(np.full(len(ts), ei))
        cols["t"].append(ts)
    return WindowBatch(**{k: np.concatenate(v) for k, v in cols.items()})


# P4RT external track files ----------------------------------------------------

def encode_tracks(tracks: np.ndarray, labels: np.ndarray) -> bytes:
    tracks = np.asarray(tracks, dtype="<f8")
    labels = np.asarray(labels, dtype=np.uint8)
    T, Np, _ = tracks.shape
    buf = io.BytesIO()
    buf.write(TRACKS_MAGIC)
    buf.write(struct.pack("<III", TRACKS_VERSION, Np, T))
    buf.write(labels.tobytes())
    buf.write(np.ascontiguousarray(tracks).tobytes())
    return buf.getvalue()


def decode_tracks(blob: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(blob) < 16 or blob[:4] != TRACKS_MAGIC:
        raise TrackFileError("not a P4RT file (bad magic or short header)")
    version, Np, T = struct.unpack_from("<III", blob, 4)
    if version != TRACKS_VERSION:
        raise TrackFileError(f"unsupported P4RT version {version}")
    expected = 16 + Np + T * Np * 3 * 8
    if len(blob) != expected:
        raise TrackFileError(f"length mismatch: header promises {expected} bytes "
                             f"(Np={Np}, T={T}), file has {len(blob)}")
    labels = np.frombuffer(blob, dtype=np.uint8, count=Np, offset=16).copy()
    if labels.size and labels.max() > max(Label):
        raise TrackFileError(f"unknown point label {int(labels.max())}")
    tracks = np.frombuffer(blob, dtype="<f8", offset=16 + Np).astype(np.float64).reshape(T, Np, 3)
    bad = np.argwhere(~np.isfinite(tracks))
    if bad.size:
        frame, point, _ = bad[0]
        raise TrackFileError(f"non-finite coordinate at frame {frame}, point {point}")
    return tracks, labels


def export_tracks(path, tracks: np.ndarray, labels: np.ndarray) -> None:
    Path(path).write_bytes(encode_tracks(tracks, labels))


def import_external_tracks(path) -> tuple[np.ndarray, np.ndarray]:
    """Load and validate a P4RT file; the result plugs in wherever simulator tracks do."""
    return decode_tracks(Path(path).read_bytes())


def attach_external_tracks(episode: Episode, tracks: np.ndarray, labels: np.ndarray) -> Episode:
    if len(tracks) != episode.length:
        raise TrackFileError(f"track length {len(tracks)} != episode length {episode.length}")
    episode.tracks = np.asarray(tracks, dtype=np.float64)
    episode.labels = np.asarray(labels, dtype=np.uint8)
    return episode

