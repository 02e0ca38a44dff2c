"""Joint action + point-track training loop and its CSV logs."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .datasets import Dataset, load_dataset
from .params import adam_step, make_rng
from .policy import Arch, ConfigError, Policy, PolicyConfig, PolicyInput
from .supervision import SupervisionVariant, VariantKind, WindowBatch, stack_windows

LOG_COLUMNS = ["step", "loss_total", "loss_act", "loss_pt", "eval_sr", "wall_ms"]
VAL_COLUMNS = ["step", "val_loss_act", "val_loss_pt"]
RESERVED_POLICY_KEYS = {"H", "Np", "supervision", "seed"}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    policy: dict = field(default_factory=dict)
    omega_pt: float = 1.0
    Np: int = 1024
    H: int = 8
    lr: float = 1e-3
    batch_size: int = 32
    steps: int = 2000
    seed: int = 0
    variant: str = "full3d"
    dataset: str = ""
    log_interval: int = 100
    out_dir: str = ""
    weight_decay: float = 0.0
    cosine_schedule: bool = False
    checkpoint_interval: int = 0
    eval_interval: int = 0
    eval_trials: int = 10
    eval_max_steps: int = 200
    flow_steps: int = 10
    val_windows: int = 512
    detach_head: bool = False
    record_wall_time: bool = True

    def __post_init__(self):
        if self.omega_pt < 0:
            raise ConfigError(f"omega_pt must be >= 0, got {self.omega_pt}")
        for name in ("H", "Np", "batch_size", "log_interval", "flow_steps", "val_windows"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        clash = RESERVED_POLICY_KEYS & set(self.policy)
        if clash:
            raise ConfigError(f"policy block may not set {sorted(clash)}; they come from the train config")
        VariantKind(self.variant)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown train config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def policy_config(self, head_np: int) -> PolicyConfig:
        return PolicyConfig.from_dict({**self.policy, "H": self.H, "Np": head_np,
                                       "supervision": self.variant, "seed": self.seed})


@dataclass
class LossTerms:
    total: ad.Tensor
    act: ad.Tensor
    pt: ad.Tensor | None


def combined_loss(policy: Policy, batch: WindowBatch, omega_pt: float,
                  rng: np.random.Generator | None = None, detach_head: bool = False) -> LossTerms:
    """``L = L_act + ω·L_pt``. OFT regresses the chunk with L1; the expert
    regresses the flow velocity with a squared error."""
    c = policy.config
    if batch.actions.shape[1:] != (c.H, c.action_dim):
        raise ConfigError(f"batch actions {batch.actions.shape[1:]} do not match H={c.H}, action_dim={c.action_dim}")
    inp = PolicyInput.from_batch(batch)
    pred, target, tracks = policy.forward_train(inp, batch.actions, rng, detach_head)
    l_act = ad.l1_loss(pred, target) if c.arch is Arch.OFT else ad.mse_loss(pred, target)
    if tracks is None:
        return LossTerms(l_act, l_act, None)
    if tracks.shape != batch.target.shape:
        raise ConfigError(f"head output {tracks.shape} does not match the {c.supervision.value} target "
                          f"{batch.target.shape}")
    l_pt = ad.l1_loss(tracks, batch.target)
    return LossTerms(l_act + omega_pt * l_pt, l_act, l_pt)


def _even_subset(n: int, k: int) -> np.ndarray:
    return np.arange(n) if n <= k else np.linspace(0, n - 1, k).round().astype(np.int64)


def validation_losses(policy: Policy, batch: WindowBatch, seed: int, chunk: int = 128) -> tuple[float, float]:
    """Mean losses over a fixed window set; the expert's noise is re-drawn
    from the same stream every call so values are comparable across steps."""
    rng = make_rng(seed, "validation")
    acts, pts, weights = [], [], []
    with ad.no_grad():
        for lo in range(0, len(batch), chunk):
            sub = batch.take(slice(lo, lo + chunk))
            terms = combined_loss(policy, sub, 0.0, rng)
            acts.append(terms.act.item())
            pts.append(math.nan if terms.pt is None else terms.pt.item())
            weights.append(len(sub))
    w = np.asarray(weights, dtype=np.float64)
    return float(np.dot(acts, w) / w.sum()), float(np.dot(pts, w) / w.sum())


@dataclass
class TrainResult:
    policy: Policy
    log: list[dict]
    validation: list[dict]

    @property
    def final_validation(self) -> dict:
        return self.validation[-1]


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_csv(path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def read_log(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.append({k: (int(v) if k == "step" else (float(v) if v != "" else None)) for k, v in r.items()})
    return out


def prepare_batches(cfg: TrainConfig, dataset: Dataset) -> tuple[WindowBatch, WindowBatch]:
    if dataset.n_points != cfg.Np:
        raise ConfigError(f"dataset has Np={dataset.n_points} but the config asks for Np={cfg.Np}")
    variant = SupervisionVariant(cfg.variant)
    train_eps, val_eps = dataset.split(0.1)
    if not train_eps:
        raise ConfigError("dataset has no training episodes")
    train = stack_windows(train_eps, cfg.H, variant)
    val = stack_windows(val_eps or train_eps, cfg.H, variant)
    return train, val.take(_even_subset(len(val), cfg.val_windows))


def train(cfg: TrainConfig, dataset: Dataset | None = None, on_eval=None, on_step=None) -> TrainResult:
    """Train from scratch; writes logs/checkpoints when ``cfg.out_dir`` is set.

    ``on_eval(policy, step)`` supplies the success rate for ``eval_sr``; the
    CLI passes closed-loop rollouts. ``on_step(policy, step)`` runs after
    every optimiser update, e.g. to record the parameter trajectory.
    """
    if dataset is None:
        if not cfg.dataset:
            raise ConfigError("no dataset given")
        dataset = load_dataset(cfg.dataset)
    train_b, val_b = prepare_batches(cfg, dataset)
    policy = Policy(cfg.policy_config(train_b.head_points.shape[1]))
    out = Path(cfg.out_dir) if cfg.out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    shuffle = make_rng(cfg.seed, "shuffle")
    noise = make_rng(cfg.seed, "noise")
    n = len(train_b)
    order = shuffle.permutation(n)
    cursor = 0
    log, val_rows = [], []
    t0 = time.perf_counter()

    def record_validation(step):
        try:
            va, vp = validation_losses(policy, val_b, cfg.seed)
        except ad.NonFiniteError as exc:
            raise TrainingError(f"non-finite validation loss at step {step}: {exc}") from None
        val_rows.append({"step": step, "val_loss_act": va, "val_loss_pt": vp})

    for step in range(cfg.steps + 1):
        if step % cfg.log_interval == 0 or step == cfg.steps:
            record_validation(step)
        if out and cfg.checkpoint_interval and step and step % cfg.checkpoint_interval == 0:
            policy.save(out / f"checkpoint_{step:06d}.p4rk")
        if step == cfg.steps:
            break
        if cursor + cfg.batch_size > n:
            order = shuffle.permutation(n)
            cursor = 0
        idx = np.sort(order[cursor:cursor + cfg.batch_size])
        cursor += cfg.batch_size
        batch = train_b.take(idx)
        try:
            terms = combined_loss(policy, batch, cfg.omega_pt, noise, cfg.detach_head)
            ad.backward(terms.total)
        except ad.NonFiniteError as exc:
            raise TrainingError(f"non-finite value at step {step}: {exc}") from None
        if step % cfg.log_interval == 0:
            row = {"step": step, "loss_total": terms.total.item(), "loss_act": terms.act.item(),
                   "loss_pt": None if terms.pt is None else terms.pt.item(), "eval_sr": None,
                   "wall_ms": round((time.perf_counter() - t0) * 1000) if cfg.record_wall_time else 0}
            if on_eval is not None and cfg.eval_interval and step % cfg.eval_interval == 0:
                row["eval_sr"] = on_eval(policy, step)
            log.append(row)
        # the last backbone layer's post-attention block feeds only the final
        # states; architectures that read just the per-layer keys/values leave
        # it without a gradient, and Adam treats it as a zero step
        for prm in policy.params.params.values():
            if prm.grad is None:
                prm.grad = np.zeros_like(prm.data)
        lr = cfg.lr
        if cfg.cosine_schedule:
            lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / max(cfg.steps, 1)))
        adam_step(policy.params, lr=lr, weight_decay=cfg.weight_decay)
        if on_step is not None:
            on_step(policy, step + 1)
    if out:
        policy.save(out / "policy.p4rk")
        write_csv(out / "train_log.csv", log, LOG_COLUMNS)
        write_csv(out / "validation.csv", val_rows, VAL_COLUMNS)
    return TrainResult(policy, log, val_rows)
