"""Kinematic manipulation world: drawer, door and pick-and-place scenes.

Bodies are rigid triangle meshes whose poses are fully determined by the
gripper trajectory, so every surface point's ground-truth 3-D track is
available exactly. There is no contact or dynamics; a grasp is a kinematic
attachment between the gripper and a body handle.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

from .geometry import (
    Label,
    RigidTransform,
    SurfacePoint,
    TriangleMesh,
    blend,
    box_mesh,
    grid_mesh,
    sample_surface_points,
)

MAX_DELTA = 0.05  # actuation limit per axis, metres/step
CONTROL_STEP = 0.04  # scripted controller speed
GRASP_RADIUS = 0.02
GRIPPER_ID = 0
TABLE_ID = 1
SCENE_DIM = 16
PROPRIO_DIM = 4
ACTION_DIM = 4

DRAWER_RANGE = (0.0, 0.2)
DRAWER_SUCCESS = 0.18
DOOR_RANGE = (0.0, math.pi / 2)
DOOR_SUCCESS = math.radians(80.0)
DOOR_STOP = math.radians(88.0)
DOOR_STEP = math.radians(6.0)
PLACE_TOLERANCE = 0.03
CUBE_SIZE = 0.05
LIFT_HEIGHT = 0.10
HOVER_HEIGHT = 0.08


class Task(enum.IntEnum):
    DRAWER = 0
    DOOR = 1
    PICK_PLACE = 2

    @classmethod
    def parse(cls, name: Union[str, int, "Task"]) -> "Task":
        if isinstance(name, (Task, int)):
            return cls(int(name))
        key = name.strip().lower().replace("-", "_").replace("pickplace", "pick_place")
        for t in cls:
            if t.name.lower() == key:
                return t
        raise ValueError(f"unknown task {name!r} (expected drawer, door or pick_place)")

    @property
    def slug(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class Fixed:
    pass


@dataclass(frozen=True)
class Free:
    pass


@dataclass(frozen=True)
class Prismatic:
    axis: tuple[float, float, float]
    range: tuple[float, float]


@dataclass(frozen=True)
class Revolute:
    axis: tuple[float, float, float]
    pivot: tuple[float, float, float]
    range: tuple[float, float]


Articulation = Union[Fixed, Free, Prismatic, Revolute]


@dataclass
class Body:
    body_id: int
    name: str
    mesh: TriangleMesh  # body-local frame
    articulation: Articulation
    base_pose: RigidTransform = field(default_factory=RigidTransform)
    coordinate: float = 0.0
    handle: np.ndarray | None = None  # body-local grasp point

    def pose(self) -> RigidTransform:
        art = self.articulation
        if isinstance(art, Prismatic):
            shift = RigidTransform.from_translation(self.coordinate * np.asarray(art.axis))
            return shift.compose(self.base_pose)
        if isinstance(art, Revolute):
            pivot = np.asarray(art.pivot)
            rot = RigidTransform.from_axis_angle(art.axis, self.coordinate)
            about = RigidTransform(rot.rotation, pivot - rot.rotation @ pivot)
            return about.compose(self.base_pose)
        return self.base_pose

    def handle_world(self) -> np.ndarray:
        return self.pose().apply(self.handle)


@dataclass
class Action:
    delta_position: np.ndarray
    gripper_command: float

    def __post_init__(self):
        self.delta_position = np.asarray(self.delta_position, dtype=np.float64).reshape(3)
        self.gripper_command = float(self.gripper_command)

    def clipped(self) -> "Action":
        return Action(np.clip(self.delta_position, -MAX_DELTA, MAX_DELTA),
                      min(max(self.gripper_command, 0.0), 1.0))

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.delta_position, [self.gripper_command]])

    @classmethod
    def from_array(cls, a) -> "Action":
        a = np.asarray(a, dtype=np.float64)
        return cls(a[:3], a[3])


@dataclass
class Observation:
    scene_features: np.ndarray
    proprio: np.ndarray
    task_id: int


@dataclass
class Scene:
    task: Task
    bodies: list[Body]
    gripper: np.ndarray
    width: float = 1.0
    attached: int | None = None
    goal: np.ndarray | None = None
    layout: dict = field(default_factory=dict)

    def copy(self) -> "Scene":
        return replace(self, bodies=[replace(b) for b in self.bodies], gripper=self.gripper.copy(),
                       goal=None if self.goal is None else self.goal.copy())

    def body(self, body_id: int) -> Body:
        return self.bodies[body_id]

    @property
    def target(self) -> Body:
        """The body the task manipulates (drawer, door or cube)."""
        return self.bodies[-1]

    def poses(self) -> list[RigidTransform]:
        return [b.pose() for b in self.bodies]

    def pose_array(self) -> np.ndarray:
        return np.stack([p.to_vector() for p in self.poses()])

    def meshes(self) -> list[TriangleMesh]:
        return [b.mesh for b in self.bodies]


# scene construction ---------------------------------------------------------

def gripper_mesh() -> TriangleMesh:
    return box_mesh((0.04, 0.04, 0.06), center=(0.0, 0.0, 0.03), body_id=GRIPPER_ID, label=Label.ROBOT)


def _gripper_body(pos) -> Body:
    return Body(GRIPPER_ID, "gripper", gripper_mesh(), Free(), RigidTransform.from_translation(pos))


def _table_body() -> Body:
    return Body(TABLE_ID, "table", grid_mesh((-0.8, 0.8), (-0.6, 1.0), 16, body_id=TABLE_ID), Fixed())


def sample_layout(task: Task, rng: np.random.Generator) -> dict:
    """Randomised layout parameters; positions are drawn from a 0.4 m square."""
    task = Task.parse(task)
    layout = {"gripper": [float(rng.uniform(-0.05, 0.05)), float(rng.uniform(-0.05, 0.05)),
                          float(rng.uniform(0.25, 0.32))]}
    if task in (Task.DRAWER, Task.DOOR):
        layout["cabinet"] = [float(rng.uniform(-0.2, 0.2)), float(rng.uniform(0.3, 0.7))]
    else:
        obj = np.array([rng.uniform(-0.2, 0.2), rng.uniform(0.1, 0.5)])
        goal = np.array([rng.uniform(-0.2, 0.2), rng.uniform(0.1, 0.5)])
        while np.linalg.norm(goal - obj) < 0.12:
            goal = np.array([rng.uniform(-0.2, 0.2), rng.uniform(0.1, 0.5)])
        layout["object"] = [float(obj[0]), float(obj[1])]
        layout["goal"] = [float(goal[0]), float(goal[1])]
    return layout


def build_scene(task, layout: dict) -> Scene:
    task = Task.parse(task)
    bodies = [_gripper_body(layout["gripper"]), _table_body()]
    goal = None
    if task is Task.DRAWER:
        cx, cy = layout["cabinet"]
        cab = TriangleMesh.merge([
            box_mesh((0.30, 0.02, 0.25), (0.0, 0.14, 0.0)),
            box_mesh((0.02, 0.30, 0.25), (-0.14, 0.0, 0.0)),
            box_mesh((0.02, 0.30, 0.25), (0.14, 0.0, 0.0)),
            box_mesh((0.30, 0.30, 0.02), (0.0, 0.0, 0.115)),
        ], body_id=2, label=Label.SCENE)
        bodies.append(Body(2, "cabinet", cab, Fixed(), RigidTransform.from_translation((cx, cy, 0.125))))
        drawer = TriangleMesh.merge([
            box_mesh((0.24, 0.28, 0.08), (0.0, 0.0, 0.0)),
            box_mesh((0.08, 0.02, 0.02), (0.0, -0.15, 0.0)),
        ], body_id=3, label=Label.SCENE)
        bodies.append(Body(3, "drawer", drawer, Prismatic((0.0, -1.0, 0.0), DRAWER_RANGE),
                           RigidTransform.from_translation((cx, cy - 0.01, 0.15)),
                           handle=np.array([0.0, -0.16, 0.0])))
    elif task is Task.DOOR:
        cx, cy = layout["cabinet"]
        cab = TriangleMesh.merge([
            box_mesh((0.30, 0.02, 0.25), (0.0, 0.14, 0.0)),
            box_mesh((0.02, 0.30, 0.25), (-0.14, 0.0, 0.0)),
            box_mesh((0.02, 0.30, 0.25), (0.14, 0.0, 0.0)),
            box_mesh((0.30, 0.30, 0.02), (0.0, 0.0, 0.115)),
        ], body_id=2, label=Label.SCENE)
        bodies.append(Body(2, "cabinet", cab, Fixed(), RigidTransform.from_translation((cx, cy, 0.125))))
        pivot = (cx - 0.13, cy - 0.155, 0.13)
        door = TriangleMesh.merge([
            box_mesh((0.26, 0.01, 0.22), (0.13, 0.0, 0.0)),
            box_mesh((0.02, 0.03, 0.06), (0.23, -0.02, 0.0)),
        ], body_id=3, label=Label.SCENE)
        bodies.append(Body(3, "door", door, Revolute((0.0, 0.0, -1.0), pivot, DOOR_RANGE),
                           RigidTransform.from_translation(pivot), handle=np.array([0.23, -0.035, 0.0])))
    else:
        ox, oy = layout["object"]
        gx, gy = layout["goal"]
        pad = box_mesh((0.08, 0.08, 0.002), (0.0, 0.0, 0.0), body_id=2)
        bodies.append(Body(2, "goal_pad", pad, Fixed(), RigidTransform.from_translation((gx, gy, 0.001))))
        cube = box_mesh((CUBE_SIZE,) * 3, body_id=3)
        bodies.append(Body(3, "cube", cube, Free(), RigidTransform.from_translation((ox, oy, CUBE_SIZE / 2)),
                           handle=np.array([0.0, 0.0, CUBE_SIZE / 2])))
        goal = np.array([gx, gy, CUBE_SIZE / 2])
    return Scene(task, bodies, np.array(layout["gripper"], dtype=np.float64), 1.0, None, goal, dict(layout))


# dynamics -------------------------------------------------------------------

def _revolute_angle(body: Body, point: np.ndarray) -> float:
    art = body.articulation
    axis = np.asarray(art.axis) / np.linalg.norm(art.axis)
    pivot = np.asarray(art.pivot)
    rest = body.base_pose.apply(body.handle) - pivot
    rest -= axis * (axis @ rest)
    v = point - pivot
    v -= axis * (axis @ v)
    return math.atan2(float(axis @ np.cross(rest, v)), float(rest @ v))


def step(scene: Scene, action: Action) -> Scene:
    """Advance the scene by one action (clipped to the actuation limits)."""
    a = action.clipped()
    s = scene.copy()
    s.width = a.gripper_command
    if a.gripper_command >= 0.5:
        s.attached = None
    elif s.attached is None:
        best, best_d = None, GRASP_RADIUS
        for b in s.bodies:
            if b.handle is None or isinstance(b.articulation, Fixed):
                continue
            dist = float(np.linalg.norm(b.handle_world() - s.gripper))
            if dist <= best_d:
                best, best_d = b.body_id, dist
        s.attached = best

    d = a.delta_position
    if s.attached is None:
        s.gripper = s.gripper + d
    else:
        b = s.bodies[s.attached]
        art = b.articulation
        if isinstance(art, Free):
            b.base_pose = RigidTransform(b.base_pose.rotation, b.base_pose.translation + d)
            s.gripper = s.gripper + d
        elif isinstance(art, Prismatic):
            q = b.coordinate + float(d @ np.asarray(art.axis))
            b.coordinate = min(max(q, art.range[0]), art.range[1])
            s.gripper = b.handle_world()
        elif isinstance(art, Revolute):
            q = _revolute_angle(b, s.gripper + d)
            b.coordinate = min(max(q, art.range[0]), art.range[1])
            s.gripper = b.handle_world()
    s.bodies[GRIPPER_ID].base_pose = RigidTransform.from_translation(s.gripper)
    return s


def success(task, scene: Scene) -> bool:
    task = Task.parse(task)
    if task is Task.DRAWER:
        return scene.target.coordinate >= DRAWER_SUCCESS
    if task is Task.DOOR:
        return scene.target.coordinate >= DOOR_SUCCESS
    center = scene.target.pose().translation
    released = scene.width >= 0.5 and scene.attached is None
    return bool(np.linalg.norm(center - scene.goal) <= PLACE_TOLERANCE and released)


def observe(scene: Scene) -> Observation:
    """Low-dimensional stand-in for camera images plus proprioception."""
    f = np.zeros(SCENE_DIM)
    tgt = scene.target
    handle = tgt.handle_world()
    f[0:3] = handle
    f[3] = tgt.coordinate
    if scene.task is Task.DOOR:
        f[4:7] = tgt.articulation.pivot
    else:
        f[4:7] = tgt.pose().translation
    if scene.task is Task.PICK_PLACE:
        f[7:10] = scene.goal
        f[14:16] = (scene.goal - tgt.pose().translation)[:2]
    else:
        f[7:10] = scene.bodies[2].pose().translation
    f[10] = 1.0 if scene.attached is not None else 0.0
    f[11:14] = handle - scene.gripper
    proprio = np.concatenate([scene.gripper, [scene.width]])
    return Observation(f, proprio, int(scene.task))


# scripted expert ------------------------------------------------------------

def _toward(cur: np.ndarray, target: np.ndarray, limit: float = CONTROL_STEP) -> np.ndarray:
    """Straight-line step: the whole offset is scaled so no axis exceeds ``limit``."""
    d = target - cur
    m = float(np.abs(d).max())
    return d if m <= limit else d * (limit / m)


def _hold(command: float) -> Action:
    return Action(np.zeros(3), command)


def scripted_action(task, obs: Observation) -> Action:
    """Reactive waypoint controller; a pure function of the observation."""
    task = Task.parse(task)
    f = obs.scene_features
    g = obs.proprio[:3]
    handle, q, attached = f[0:3], f[3], f[10] > 0.5

    if task is Task.DRAWER:
        if attached:
            if q >= DRAWER_RANGE[1] - 1e-9:
                return _hold(0.0)
            return Action(np.array([0.0, -0.03, 0.0]), 0.0)
        if np.linalg.norm(handle - g) <= 0.005:
            return _hold(0.0)
        return Action(_toward(g, handle), 1.0)

    if task is Task.DOOR:
        if attached:
            if q >= DOOR_STOP:
                return _hold(0.0)
            pivot = f[4:7]
            r = handle - pivot
            c, s = math.cos(DOOR_STEP), math.sin(DOOR_STEP)
            # opening turns about -z
            nxt = pivot + np.array([c * r[0] + s * r[1], -s * r[0] + c * r[1], r[2]])
            return Action(_toward(g, nxt), 0.0)
        if np.linalg.norm(handle - g) <= 0.005:
            return _hold(0.0)
        return Action(_toward(g, handle), 1.0)

    obj, goal = f[4:7], f[7:10]
    if not attached:
        at_goal = np.linalg.norm(obj[:2] - goal[:2]) <= 0.005 and abs(obj[2] - goal[2]) <= 1e-6
        if at_goal:
            return _hold(1.0)
        if np.linalg.norm(handle - g) <= 0.005:
            return _hold(0.0)
        if np.linalg.norm((handle - g)[:2]) > 0.005:
            target = np.array([handle[0], handle[1], handle[2] + HOVER_HEIGHT])
        else:
            target = handle
        return Action(_toward(g, target), 1.0)
    if np.linalg.norm(obj[:2] - goal[:2]) > 0.005:
        if obj[2] < goal[2] + LIFT_HEIGHT - 1e-9:
            target = np.array([obj[0], obj[1], goal[2] + LIFT_HEIGHT])
        else:
            target = np.array([goal[0], goal[1], goal[2] + LIFT_HEIGHT])
    elif obj[2] > goal[2] + 1e-9:
        target = goal
    else:
        return _hold(1.0)
    return Action(_toward(obj, target), 0.0)


# demonstrations and tracks ----------------------------------------------------

class ScriptedFailure(AssertionError):
    pass


@dataclass
class Episode:
    """One demonstration. Index ``τ`` of observations/poses/tracks is the state
    *before* ``actions[τ]`` is applied."""

    task: Task
    layout: dict
    scene_features: np.ndarray  # [T, SCENE_DIM]
    proprio: np.ndarray  # [T, PROPRIO_DIM]
    actions: np.ndarray  # [T, ACTION_DIM]
    poses: np.ndarray  # [T, n_bodies, 12]
    tracks: np.ndarray | None = None  # [T, Np, 3]
    labels: np.ndarray | None = None  # [Np] uint8
    point_bodies: np.ndarray | None = None  # [Np]
    point_faces: np.ndarray | None = None  # [Np]
    point_bary: np.ndarray | None = None  # [Np, 3]

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def n_points(self) -> int:
        return 0 if self.tracks is None else self.tracks.shape[1]

    def observation(self, t: int) -> Observation:
        return Observation(self.scene_features[t], self.proprio[t], int(self.task))

    def scene(self) -> Scene:
        return build_scene(self.task, self.layout)

    def surface_points(self) -> list[SurfacePoint]:
        return [SurfacePoint(int(f), tuple(float(x) for x in b), Label(int(lab)), int(body))
                for body, f, b, lab in zip(self.point_bodies, self.point_faces, self.point_bary, self.labels)]


def script_demonstration(task, rng: np.random.Generator, hold_steps: int = 10, max_steps: int = 300) -> Episode:
    """Roll out the scripted controller on a freshly sampled layout.

    After the success predicate first holds, ``hold_steps`` more controller
    steps are recorded so that late windows still see terminal behaviour.
    """
    task = Task.parse(task)
    layout = sample_layout(task, rng)
    scene = build_scene(task, layout)
    feats, props, acts, poses = [], [], [], []
    remaining = None
    while True:
        if remaining is None and success(task, scene):
            remaining = hold_steps
        if remaining is not None:
            if remaining == 0:
                break
            remaining -= 1
        if len(acts) >= max_steps:
            raise ScriptedFailure(f"{task.slug} script did not succeed within {max_steps} steps")
        obs = observe(scene)
        a = scripted_action(task, obs)
        if np.abs(a.delta_position).max() > MAX_DELTA:
            raise ScriptedFailure("scripted action exceeds the actuation limit")
        feats.append(obs.scene_features)
        props.append(obs.proprio)
        acts.append(a.to_array())
        poses.append(scene.pose_array())
        scene = step(scene, a)
    if not success(task, scene):
        raise ScriptedFailure(f"{task.slug} script ended in a failed state")
    return Episode(task, layout, np.array(feats), np.array(props), np.array(acts), np.array(poses))


def replay_scenes(episode: Episode) -> list[Scene]:
    """Re-run the recorded actions from the episode's layout (states 0..T)."""
    scene = episode.scene()
    out = [scene]
    for a in episode.actions:
        scene = step(scene, Action.from_array(a))
        out.append(scene)
    return out


def sample_episode_points(episode: Episode, n: int, rng: np.random.Generator, crop_half_extent: float = 0.6,
                          robot_fraction: float = 0.5) -> list[SurfacePoint]:
    """Query points on the frame-0 meshes inside a gripper-centred cube."""
    scene = episode.scene()
    poses = {b.body_id: RigidTransform.from_vector(v) for b, v in zip(scene.bodies, episode.poses[0])}
    return sample_surface_points(scene.meshes(), n, episode.proprio[0, :3], crop_half_extent,
                                 robot_fraction, rng, poses)


def extract_tracks(episode: Episode, surface_points: list[SurfacePoint]) -> np.ndarray:
    """``P[τ, j]``: world position of surface point ``j`` at every recorded step."""
    meshes = {b.body_id: b.mesh for b in episode.scene().bodies}
    n_bodies = episode.poses.shape[1]
    bodies = np.array([sp.body_id for sp in surface_points])
    faces = np.array([sp.face_index for sp in surface_points])
    bary = np.array([sp.barycentric for sp in surface_points], dtype=np.float64)
    T = episode.poses.shape[0]
    out = np.empty((T, len(surface_points), 3))
    for body in np.unique(bodies):
        if body < 0 or body >= n_bodies or body not in meshes:
            raise KeyError(f"body {body} has no pose record")
        sel = np.flatnonzero(bodies == body)
        local = blend(meshes[int(body)], faces[sel], bary[sel])
        rot = episode.poses[:, body, :9].reshape(T, 3, 3)
        trans = episode.poses[:, body, 9:12]
        out[:, sel] = local[None] @ np.swapaxes(rot, 1, 2) + trans[:, None, :]
    return out


def attach_tracks(episode: Episode, surface_points: list[SurfacePoint]) -> Episode:
    episode.tracks = extract_tracks(episode, surface_points)
    episode.labels = np.array([int(sp.label) for sp in surface_points], dtype=np.uint8)
    episode.point_bodies = np.array([sp.body_id for sp in surface_points], dtype=np.int64)
    episode.point_faces = np.array([sp.face_index for sp in surface_points], dtype=np.int64)
    episode.point_bary = np.array([sp.barycentric for sp in surface_points], dtype=np.float64)
    return episode
