"""Demonstration datasets and the P4RD episode container."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .params import make_rng
from .world import (
    ACTION_DIM,
    PROPRIO_DIM,
    SCENE_DIM,
    Episode,
    Task,
    attach_tracks,
    sample_episode_points,
    script_demonstration,
)

DATASET_MAGIC = b"P4RD"
DATASET_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    episodes: list[Episode]
    meta: dict = field(default_factory=dict)

    @property
    def n_points(self) -> int:
        return int(self.meta.get("n_points", self.episodes[0].n_points if self.episodes else 0))

    @property
    def tasks(self) -> list[Task]:
        return sorted({ep.task for ep in self.episodes})

    def split(self, val_fraction: float = 0.1) -> tuple[list[Episode], list[Episode]]:
        """Episodes are stored in seed order; the last ``val_fraction`` validate."""
        n_val = max(1, int(round(len(self.episodes) * val_fraction))) if len(self.episodes) > 1 else 0
        return self.episodes[:len(self.episodes) - n_val], self.episodes[len(self.episodes) - n_val:]


def generate(tasks, n_episodes: int, n_points: int, seed: int, crop_half_extent: float = 0.6,
             robot_fraction: float = 0.5, hold_steps: int = 10) -> Dataset:
    """Scripted demonstrations with ground-truth surface-point tracks.

    Episode ``i`` uses task ``tasks[i % len(tasks)]`` and its own PCG stream
    ``(seed, "episode", i)``, so any prefix of a dataset is reproducible.
    """
    tasks = [Task.parse(t) for t in (tasks if isinstance(tasks, (list, tuple)) else [tasks])]
    episodes = []
    for i in range(n_episodes):
        rng = make_rng(seed, "episode", i)
        ep = script_demonstration(tasks[i % len(tasks)], rng, hold_steps=hold_steps)
        pts = sample_episode_points(ep, n_points, rng, crop_half_extent, robot_fraction)
        episodes.append(attach_tracks(ep, pts))
    meta = {"tasks": [t.slug for t in tasks], "n_points": n_points, "seed": seed,
            "crop_half_extent": crop_half_extent, "robot_fraction": robot_fraction,
            "hold_steps": hold_steps, "scene_dim": SCENE_DIM, "proprio_dim": PROPRIO_DIM,
            "action_dim": ACTION_DIM}
    return Dataset(episodes, meta)


def _f64(arr) -> bytes:
    return np.ascontiguousarray(np.asarray(arr, dtype="<f8")).tobytes()


def encode_dataset(ds: Dataset) -> bytes:
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<I", DATASET_VERSION))
    meta = json.dumps(ds.meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(ds.episodes)))
    for ep in ds.episodes:
        layout = json.dumps(ep.layout, sort_keys=True).encode()
        T, n_bodies = ep.poses.shape[:2]
        buf.write(struct.pack("<II", int(ep.task), len(layout)))
        buf.write(layout)
        buf.write(struct.pack("<III", T, n_bodies, ep.n_points))
        for arr in (ep.scene_features, ep.proprio, ep.actions, ep.poses):
            buf.write(_f64(arr))
        buf.write(np.asarray(ep.point_bodies, dtype="<u4").tobytes())
        buf.write(np.asarray(ep.point_faces, dtype="<u4").tobytes())
        buf.write(_f64(ep.point_bary))
        buf.write(_f64(ep.tracks))
        buf.write(np.asarray(ep.labels, dtype=np.uint8).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise DatasetError(f"truncated dataset at byte {self.pos} (wanted {n} more)")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, k: int = 1):
        vals = struct.unpack(f"<{k}I", self.take(4 * k))
        return vals[0] if k == 1 else vals

    def f64(self, *shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)


def decode_dataset(blob: bytes) -> Dataset:
    if blob[:4] != DATASET_MAGIC:
        raise DatasetError("not a P4RD dataset (bad magic)")
    r = _Reader(blob)
    r.take(4)
    version = r.u32()
    if version != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {version}")
    meta = json.loads(r.take(r.u32()))
    sd, pd, ad = meta["scene_dim"], meta["proprio_dim"], meta["action_dim"]
    episodes = []
    for _ in range(r.u32()):
        task, llen = r.u32(2)
        layout = json.loads(r.take(llen))
        T, n_bodies, Np = r.u32(3)
        ep = Episode(Task(task), layout, r.f64(T, sd), r.f64(T, pd), r.f64(T, ad), r.f64(T, n_bodies, 12))
        ep.point_bodies = np.frombuffer(r.take(4 * Np), dtype="<u4").astype(np.int64)
        ep.point_faces = np.frombuffer(r.take(4 * Np), dtype="<u4").astype(np.int64)
        ep.point_bary = r.f64(Np, 3)
        ep.tracks = r.f64(T, Np, 3)
        ep.labels = np.frombuffer(r.take(Np), dtype=np.uint8).copy()
        if not np.isfinite(ep.tracks).all():
            raise DatasetError("dataset contains non-finite track coordinates")
        episodes.append(ep)
    if r.pos != len(blob):
        raise DatasetError(f"{len(blob) - r.pos} trailing bytes after the last episode")
    return Dataset(episodes, meta)


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def load_dataset(path) -> Dataset:
    return decode_dataset(Path(path).read_bytes())
