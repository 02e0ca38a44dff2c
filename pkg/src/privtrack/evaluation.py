"""Closed-loop rollouts, success rates and the ablation matrix."""

from __future__ import annotations

import csv
import enum
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .datasets import Dataset, generate, load_dataset
from .geometry import blend, sample_surface_points
from .params import make_rng
from .policy import Policy, PolicyInput, PtInput
from .supervision import ACTION_SCALE, normalize_points
from .trainer import TrainConfig, train
from .world import Action, Scene, Task, build_scene, observe, sample_layout, scripted_action, step, success

DEFAULT_TRIALS = 50
DEFAULT_MAX_STEPS = 200
RESULT_COLUMNS = ["row_type", "axis", "value", "seed", "task", "successes", "trials", "success_rate",
                  "success_rate_std", "n_seeds", "final_loss_pt", "final_loss_act", "error"]


class AblationError(ValueError):
    pass


# agents ---------------------------------------------------------------------

class ScriptedPolicy:
    """The demonstration controller behind the rollout interface (horizon 1)."""

    def plan(self, observations, scenes, rngs) -> np.ndarray:
        return np.stack([scripted_action(s.task, o).to_array()[None] for o, s in zip(observations, scenes)])


class ConstantPolicy:
    """Repeats one env-unit action; the zero action is the usual do-nothing check."""

    def __init__(self, action=(0.0, 0.0, 0.0, 1.0)):
        self.action = np.asarray(action, dtype=np.float64)

    def plan(self, observations, scenes, rngs) -> np.ndarray:
        return np.broadcast_to(self.action, (len(observations), 1, len(self.action))).copy()


def scene_points(scene: Scene, bodies, faces, bary) -> np.ndarray:
    """Current world positions of surface points attached to scene bodies."""
    out = np.empty((len(bodies), 3))
    for b in np.unique(bodies):
        sel = np.flatnonzero(bodies == b)
        body = scene.bodies[int(b)]
        out[sel] = body.pose().apply(blend(body.mesh, faces[sel], bary[sel]))
    return out


class PolicyAgent:
    """Adapts a trained :class:`Policy`: batches observations, converts
    policy units to env units, and supplies point tokens when the policy
    reads P_t in its backbone."""

    def __init__(self, policy: Policy, flow_steps: int = 10, n_points: int | None = None,
                 crop_half_extent: float = 0.6, robot_fraction: float = 0.5):
        self.policy = policy
        self.flow_steps = flow_steps
        self.n_points = n_points or policy.config.Np
        self.crop = crop_half_extent
        self.robot_fraction = robot_fraction
        self._points: dict[int, tuple] = {}

    @property
    def needs_points(self) -> bool:
        return self.policy.config.head_pt_input is PtInput.BACKBONE_TOKEN

    def start(self, trial: int, scene: Scene, rng: np.random.Generator) -> None:
        if self.needs_points:
            poses = {b.body_id: b.pose() for b in scene.bodies}
            sps = sample_surface_points(scene.meshes(), self.n_points, scene.gripper, self.crop,
                                        self.robot_fraction, rng, poses)
            self._points[trial] = (np.array([p.body_id for p in sps]), np.array([p.face_index for p in sps]),
                                   np.array([p.barycentric for p in sps]))

    def plan(self, observations, scenes, rngs, trials=None) -> np.ndarray:
        tokens = None
        if self.needs_points:
            tokens = np.stack([normalize_points(scene_points(s, *self._points[t]), s.gripper)
                               for s, t in zip(scenes, trials)])
        inp = PolicyInput.from_observations(observations, token_points=tokens)
        if self.policy.config.arch.value == "oft":
            chunk = self.policy.act(inp)
        else:
            x0 = np.stack([r.standard_normal((self.policy.config.H, self.policy.config.action_dim)) for r in rngs])
            chunk = self.policy.sample_actions_fm(inp, self.flow_steps, None, x0=x0)
        return chunk * ACTION_SCALE


# rollouts -------------------------------------------------------------------

@dataclass
class RolloutResult:
    task: Task
    seed: int
    success: bool
    steps: int
    gripper: np.ndarray  # [steps+1, 3]
    actions: np.ndarray  # [steps, 4]
    diagnostic: str = ""


def initial_scene(task, seed: int) -> Scene:
    task = Task.parse(task)
    return build_scene(task, sample_layout(task, make_rng(seed, "rollout", int(task))))


def rollout_many(agent, task, seeds, max_steps: int = DEFAULT_MAX_STEPS) -> list[RolloutResult]:
    """Run one closed-loop episode per seed, batching policy calls across
    trials. Every predicted chunk is executed in full unless the task
    succeeds part-way; success is checked after each env step."""
    task = Task.parse(task)
    seeds = [int(s) for s in seeds]
    scenes = [initial_scene(task, s) for s in seeds]
    rngs = [make_rng(s, "agent", int(task)) for s in seeds]
    if hasattr(agent, "start"):
        for i, (sc, r) in enumerate(zip(scenes, rngs)):
            agent.start(i, sc, r)
    grip = [[sc.gripper.copy()] for sc in scenes]
    acts: list[list] = [[] for _ in seeds]
    done = [success(task, sc) for sc in scenes]
    diag = ["" for _ in seeds]
    n_steps = [0] * len(seeds)
    while True:
        active = [i for i in range(len(seeds)) if not done[i] and n_steps[i] < max_steps]
        if not active:
            break
        obs = [observe(scenes[i]) for i in active]
        kwargs = {"trials": active} if isinstance(agent, PolicyAgent) else {}
        chunks = agent.plan(obs, [scenes[i] for i in active], [rngs[i] for i in active], **kwargs)
        for i, chunk in zip(active, chunks):
            if not np.isfinite(chunk).all():
                done[i] = True
                diag[i] = f"non-finite action at step {n_steps[i]}"
                continue
            for a in chunk:
                act = Action.from_array(a).clipped()
                scenes[i] = step(scenes[i], act)
                n_steps[i] += 1
                acts[i].append(act.to_array())
                grip[i].append(scenes[i].gripper.copy())
                if success(task, scenes[i]):
                    done[i] = True
                    break
                if n_steps[i] >= max_steps:
                    break
    out = []
    for i, s in enumerate(seeds):
        ok = success(task, scenes[i]) and not diag[i]
        out.append(RolloutResult(task, s, ok, n_steps[i], np.array(grip[i]),
                                 np.array(acts[i]).reshape(-1, 4), diag[i]))
    return out


def rollout(agent, task, seed: int, max_steps: int = DEFAULT_MAX_STEPS) -> RolloutResult:
    return rollout_many(agent, task, [seed], max_steps)[0]


def trial_seeds(seed: int, trials: int) -> list[int]:
    return [int(x) for x in make_rng(seed, "trials").integers(0, 2**31 - 1, trials)]


def success_rate(agent, task, seed: int, trials: int = DEFAULT_TRIALS,
                 max_steps: int = DEFAULT_MAX_STEPS) -> tuple[int, int]:
    results = rollout_many(agent, task, trial_seeds(seed, trials), max_steps)
    return sum(r.success for r in results), trials


# ablation -------------------------------------------------------------------

class Axis(str, enum.Enum):
    SUPERVISION = "supervision"
    PT_INPUT = "pt_input"
    EMBED_VARIANT = "embed_variant"
    WEIGHT = "weight"
    POINT_COUNT = "point_count"


AXIS_VALUES = {
    Axis.SUPERVISION: ["baseline", "full3d", "goal_only", "track2d", "robot_only", "scene_only"],
    Axis.PT_INPUT: ["baseline", "pt_backbone", "pt_backbone_track", "head_only", "no_pt"],
    Axis.EMBED_VARIANT: ["baseline", "cross_attn", "point_expert", "backbone_query",
                         "backbone_query_attend_action"],
    Axis.WEIGHT: [0.1, 1.0, 10.0],
    Axis.POINT_COUNT: [256, 512, 1024],
}


@dataclass
class AblationSpec:
    axis: Axis
    values: list = field(default_factory=list)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    tasks: list = field(default_factory=lambda: ["drawer"])
    train: dict = field(default_factory=dict)  # TrainConfig overrides shared by all cells
    episodes: int = 100
    Np: int = 1024
    data_seed: int = 0
    datasets: dict = field(default_factory=dict)  # Np -> P4RD path
    trials: int = DEFAULT_TRIALS
    max_steps: int = DEFAULT_MAX_STEPS
    flow_steps: int = 10
    workers: int = 1

    def __post_init__(self):
        self.axis = Axis(self.axis)
        if not self.values:
            self.values = list(AXIS_VALUES[self.axis])
        allowed = AXIS_VALUES[self.axis]
        if self.axis is Axis.WEIGHT:
            self.values = [float(v) for v in self.values]
            if any(v < 0 for v in self.values):
                raise AblationError("loss weights must be >= 0")
        elif self.axis is Axis.POINT_COUNT:
            self.values = [int(v) for v in self.values]
            if any(v < 2 for v in self.values):
                raise AblationError("point counts must be >= 2")
        else:
            bad = [v for v in self.values if v not in allowed]
            if bad:
                raise AblationError(f"unknown {self.axis.value} values {bad}; choose from {allowed}")
        if not self.seeds:
            raise AblationError("at least one seed is required")
        self.tasks = [Task.parse(t).slug for t in self.tasks]
        self.datasets = {int(k): v for k, v in self.datasets.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "AblationSpec":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise AblationError(f"unknown ablation spec keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "AblationSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def cell_config(spec: AblationSpec, value, seed: int) -> TrainConfig:
    """The train config for one (value, seed) cell."""
    base = dict(spec.train)
    policy = dict(base.pop("policy", {}))
    base.update({"seed": int(seed), "Np": spec.Np, "out_dir": "", "dataset": "", "record_wall_time": False})
    policy.setdefault("head_enabled", True)
    axis = spec.axis
    if value == "baseline":
        policy["head_enabled"] = False
    elif axis is Axis.SUPERVISION:
        base["variant"] = value
    elif axis is Axis.PT_INPUT:
        policy["head_pt_input"] = {"pt_backbone": "backbone_token", "pt_backbone_track": "backbone_token",
                                   "head_only": "head_only", "no_pt": "none"}[value]
        policy["head_enabled"] = value != "pt_backbone"
    elif axis is Axis.EMBED_VARIANT:
        policy["embed_variant"] = value
    elif axis is Axis.WEIGHT:
        base["omega_pt"] = float(value)
    elif axis is Axis.POINT_COUNT:
        base["Np"] = int(value)
    if axis is Axis.EMBED_VARIANT:
        policy["arch"] = "expert"
    base["policy"] = policy
    return TrainConfig.from_dict(base)


def _dataset_for(spec: AblationSpec, Np: int, cache: dict) -> Dataset:
    if Np not in cache:
        if Np in spec.datasets:
            cache[Np] = load_dataset(spec.datasets[Np])
        else:
            cache[Np] = generate(spec.tasks, spec.episodes, Np, spec.data_seed)
    return cache[Np]


_DATA_CACHE: dict = {}


def run_cell(spec: AblationSpec, value, seed: int) -> list[dict]:
    """Train and evaluate one cell; any exception becomes error rows."""
    base = {"row_type": "data", "axis": spec.axis.value, "value": value, "seed": seed}
    try:
        cfg = cell_config(spec, value, seed)
        result = train(cfg, _dataset_for(spec, cfg.Np, _DATA_CACHE))
        policy = result.policy
        if policy.config.head_enabled and policy.config.head_pt_input is not PtInput.BACKBONE_TOKEN:
            policy = policy.strip_head()
        agent = PolicyAgent(policy, spec.flow_steps, n_points=cfg.Np)
        final = result.final_validation
        rows = []
        for task in spec.tasks:
            k, n = success_rate(agent, task, seed, spec.trials, spec.max_steps)
            rows.append({**base, "task": task, "successes": k, "trials": n, "success_rate": k / n,
                         "final_loss_pt": final["val_loss_pt"], "final_loss_act": final["val_loss_act"]})
        return rows
    except Exception as exc:  # noqa: BLE001 - a failing cell must not sink the matrix
        msg = f"{type(exc).__name__}: {exc}"
        return [{**base, "row_type": "error", "task": t, "successes": 0, "trials": 0, "error": msg}
                for t in spec.tasks]


def _run_cell_args(args):
    return run_cell(*args)


def summarize(rows: list[dict]) -> list[dict]:
    """Mean and population std of per-seed success rates for each (value, task)."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        if r["row_type"] == "data":
            groups.setdefault((r["axis"], str(r["value"]), r["task"]), []).append(r)
    out = []
    for (axis, value, task), rs in groups.items():
        sr = np.array([r["success_rate"] for r in rs], dtype=np.float64)
        lpt = [r["final_loss_pt"] for r in rs if r.get("final_loss_pt") is not None
               and not math.isnan(r["final_loss_pt"])]
        out.append({"row_type": "summary", "axis": axis, "value": rs[0]["value"], "seed": None, "task": task,
                    "successes": sum(r["successes"] for r in rs), "trials": sum(r["trials"] for r in rs),
                    "success_rate": float(sr.mean()), "success_rate_std": float(sr.std()),
                    "n_seeds": len(rs), "final_loss_pt": float(np.mean(lpt)) if lpt else None,
                    "final_loss_act": float(np.mean([r["final_loss_act"] for r in rs]))})
    return out


def run_ablation(spec: AblationSpec) -> list[dict]:
    """Full factorial over (value, seed): data rows in cell order, then summaries."""
    cells = [(spec, v, s) for v in spec.values for s in spec.seeds]
    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as pool:
            parts = list(pool.map(_run_cell_args, cells))
    else:
        parts = [run_cell(*c) for c in cells]
    rows = [r for part in parts for r in part]
    return rows + summarize(rows)


# result CSV -------------------------------------------------------------------

def _cell(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def write_results(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in RESULT_COLUMNS])


def _parse_value(axis: str, v: str):
    if axis == Axis.WEIGHT.value:
        return float(v)
    if axis == Axis.POINT_COUNT.value:
        return int(v)
    return v


def read_results(path) -> list[dict]:
    ints = {"seed", "successes", "trials", "n_seeds"}
    floats = {"success_rate", "success_rate_std", "final_loss_pt", "final_loss_act"}
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RESULT_COLUMNS:
            raise AblationError(f"unexpected columns {reader.fieldnames}")
        for raw in reader:
            r = {}
            for k, v in raw.items():
                if v == "":
                    r[k] = None
                elif k in ints:
                    r[k] = int(v)
                elif k in floats:
                    r[k] = float(v)
                elif k == "value":
                    r[k] = _parse_value(raw["axis"], v)
                else:
                    r[k] = v
            rows.append(r)
    return rows


def validate_results(rows: list[dict]) -> None:
    """Schema checks: row types, count bounds, and rate/count agreement."""
    for i, r in enumerate(rows):
        if r["row_type"] not in ("data", "summary", "error"):
            raise AblationError(f"row {i}: unknown row_type {r['row_type']!r}")
        if r["successes"] is None or r["trials"] is None or not 0 <= r["successes"] <= r["trials"]:
            raise AblationError(f"row {i}: successes/trials out of range")
        if r["row_type"] == "data":
            if not 0.0 <= r["success_rate"] <= 1.0 or r["success_rate"] != r["successes"] / r["trials"]:
                raise AblationError(f"row {i}: success_rate disagrees with counts")
        if r["row_type"] == "error" and not r["error"]:
            raise AblationError(f"row {i}: error row without a message")


@dataclass
class Comparison:
    axis: str
    task: str
    a: str
    b: str
    mean_a: float
    mean_b: float
    n_a: int
    n_b: int
    cohens_d: float

    @property
    def diff(self) -> float:
        return self.mean_b - self.mean_a

    @property
    def direction(self) -> str:
        return "higher" if self.diff > 0 else ("lower" if self.diff < 0 else "equal")

    def describe(self) -> str:
        d = "n/a" if math.isnan(self.cohens_d) else f"{self.cohens_d:+.3f}"
        return (f"{self.axis}/{self.task}: {self.b} vs {self.a}: SR {self.mean_b:.3f} vs {self.mean_a:.3f} "
                f"(diff {self.diff:+.3f}, {self.direction}; Cohen's d {d}; seeds {self.n_b}/{self.n_a})")


def compare(rows: list[dict], a="baseline", b="full3d") -> list[Comparison]:
    """Effect of ``b`` over ``a`` per task: mean difference and Cohen's d
    with the pooled sample standard deviation."""
    out = []
    data = [r for r in rows if r["row_type"] == "data"]
    for task in sorted({r["task"] for r in data}):
        xa = np.array([r["success_rate"] for r in data if r["task"] == task and str(r["value"]) == str(a)])
        xb = np.array([r["success_rate"] for r in data if r["task"] == task and str(r["value"]) == str(b)])
        if not len(xa) or not len(xb):
            continue
        pooled = math.nan
        if len(xa) + len(xb) > 2:
            pooled = math.sqrt(((len(xa) - 1) * xa.var(ddof=1 if len(xa) > 1 else 0)
                                + (len(xb) - 1) * xb.var(ddof=1 if len(xb) > 1 else 0))
                               / (len(xa) + len(xb) - 2))
        diff = xb.mean() - xa.mean()
        if pooled and not math.isnan(pooled):
            dval = diff / pooled
        else:
            dval = 0.0 if diff == 0 else math.nan
        out.append(Comparison(data[0]["axis"], task, str(a), str(b), float(xa.mean()), float(xb.mean()),
                              len(xa), len(xb), float(dval)))
    return out
