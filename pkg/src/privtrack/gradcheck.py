"""Central finite-difference checks for every op and for both full policies."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .params import make_rng
from .policy import Arch, EmbedVariant, Policy, PolicyConfig, PolicyInput, PtInput, linear
from .supervision import WindowBatch
from .trainer import combined_loss

EPS = 1e-6
TOLERANCE = 1e-5


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_err: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= TOLERANCE


def rel_err(analytic: np.ndarray, numeric: np.ndarray, scale: float | None = None) -> float:
    """``max|a - n| / max(|a|_inf, |n|_inf, 1e-12)``."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    if scale is None:
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    return float(np.abs(a - n).max(initial=0.0) / max(scale, 1e-12))


def check_function(fn, inputs: list[np.ndarray], rng: np.random.Generator, eps: float = EPS) -> float:
    """Compare backprop against central differences of ``sum(fn(*x) * R)``."""
    leaves = [ad.Tensor(x, requires_grad=True) for x in inputs]
    out = fn(*leaves)
    R = rng.standard_normal(out.shape)
    ad.backward(ad.tsum(out * R))
    analytic = [np.zeros_like(x) if t.grad is None else t.grad for x, t in zip(inputs, leaves)]

    def value(xs):
        with ad.no_grad():
            return float((fn(*[ad.Tensor(x) for x in xs]).data * R).sum())

    worst = 0.0
    for i, x in enumerate(inputs):
        num = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xs = [y.copy() for y in inputs]
            xs[i][idx] += eps
            up = value(xs)
            xs[i][idx] -= 2 * eps
            num[idx] = (up - value(xs)) / (2 * eps)
        worst = max(worst, rel_err(analytic[i], num))
    return worst


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * (margin + np.abs(x)), x)


# op cases: each returns (fn, inputs) for one random instance -------------------

def _shape(rng, k=3, lo=1, hi=4):
    return tuple(int(s) for s in rng.integers(lo, hi + 1, k))


def _case_binary(op):
    def case(rng):
        s = _shape(rng)
        sb = tuple(1 if rng.random() < 0.3 else n for n in s)[int(rng.integers(0, 2)):]
        return (lambda a, b: ad.elementwise(op, a, b)), [rng.standard_normal(s), rng.standard_normal(sb)]
    return case


def _case_unary(op):
    def case(rng):
        x = _away_from_zero(rng, _shape(rng)) if op == "relu" else 2 * rng.standard_normal(_shape(rng))
        return (lambda a: ad.elementwise(op, a)), [x]
    return case


def _case_matmul(rng):
    m, k, n = (int(v) for v in rng.integers(1, 5, 3))
    kind = int(rng.integers(0, 3))
    if kind == 0:  # folded batch @ 2-D
        a, b = rng.standard_normal((2, m, k)), rng.standard_normal((k, n))
    elif kind == 1:  # m == 1 stacked rows
        a, b = rng.standard_normal((3, 2, 1, k)), rng.standard_normal((k, n))
    else:  # batched both sides
        a, b = rng.standard_normal((2, m, k)), rng.standard_normal((2, k, n))
    return ad.matmul, [a, b]


def _case_sum(rng):
    s = _shape(rng)
    axis = [None, 0, 1, -1, (0, 2)][int(rng.integers(0, 5))]
    keep = bool(rng.integers(0, 2))
    return (lambda x: ad.tsum(x, axis, keep)), [rng.standard_normal(s)]


def _case_mean(rng):
    s = _shape(rng)
    axis = [None, 0, -1, (1, 2)][int(rng.integers(0, 4))]
    keep = bool(rng.integers(0, 2))
    return (lambda x: ad.mean(x, axis, keep)), [rng.standard_normal(s)]


def _case_reshape(rng):
    s = _shape(rng)
    return (lambda x: ad.reshape(x, (s[0] * s[1], s[2]))), [rng.standard_normal(s)]


def _case_transpose(rng):
    perm = tuple(int(p) for p in rng.permutation(3))
    return (lambda x: ad.transpose(x, perm)), [rng.standard_normal(_shape(rng))]


def _case_broadcast(rng):
    s = _shape(rng)
    return (lambda x: ad.broadcast_to(x, (2,) + s)), [rng.standard_normal((1,) + s[1:])]


def _case_getitem(rng):
    s = _shape(rng, lo=2)
    if rng.random() < 0.5:
        idx = (slice(None), slice(1, None))
    else:
        idx = rng.integers(0, s[0], 5)  # repeats exercise scatter-add
    return (lambda x: ad.getitem(x, idx)), [rng.standard_normal(s)]


def _case_concat(rng):
    s = _shape(rng)
    axis = int(rng.integers(0, 3))
    s2 = list(s)
    s2[axis] = int(rng.integers(1, 4))
    return (lambda a, b: ad.concat([a, b], axis)), [rng.standard_normal(s), rng.standard_normal(tuple(s2))]


def _case_broadcast_concat(rng):
    B, H, N, d = (int(v) for v in rng.integers(1, 4, 4))
    return ad.broadcast_concat, [rng.standard_normal((B, H, d)), rng.standard_normal((B, N, d))]


def _case_layer_norm(rng):
    s = _shape(rng, lo=2)[:-1] + (int(rng.integers(3, 6)),)  # width 2 is ill-conditioned
    return ad.layer_norm, [rng.standard_normal(s), rng.standard_normal(s[-1]), rng.standard_normal(s[-1])]


def _case_attention(rng):
    T, S, d = (int(v) for v in rng.integers(1, 5, 3))
    mask = rng.random((T, S)) < 0.7
    mask[np.arange(T), rng.integers(0, S, T)] = True
    use_mask = bool(rng.integers(0, 2))
    return ((lambda q, k, v: ad.attention(q, k, v, mask if use_mask else None)),
            [rng.standard_normal((2, T, d)), rng.standard_normal((2, S, d)), rng.standard_normal((2, S, d))])


def _case_l1(rng):
    s = _shape(rng)
    t = rng.standard_normal(s)
    return ad.l1_loss, [t + _away_from_zero(rng, s), t]


def _case_mse(rng):
    s = _shape(rng)
    return ad.mse_loss, [rng.standard_normal(s), rng.standard_normal(s)]


def _case_pointwise_linear(rng):
    N, k, n = (int(v) for v in rng.integers(1, 5, 3))
    return ((lambda x, w, b: linear(x, w, b, pointwise=True)),
            [rng.standard_normal((2, N, k)), rng.standard_normal((k, n)), rng.standard_normal(n)])


OP_CASES = {
    "add": _case_binary("add"), "sub": _case_binary("sub"), "mul": _case_binary("mul"),
    "relu": _case_unary("relu"), "gelu": _case_unary("gelu"), "tanh": _case_unary("tanh"),
    "matmul": _case_matmul, "sum": _case_sum, "mean": _case_mean, "reshape": _case_reshape,
    "transpose": _case_transpose, "broadcast_to": _case_broadcast, "getitem": _case_getitem,
    "concat": _case_concat, "broadcast_concat": _case_broadcast_concat, "layer_norm": _case_layer_norm,
    "attention": _case_attention, "l1_loss": _case_l1, "mse_loss": _case_mse,
    "pointwise_linear": _case_pointwise_linear,
}


# full policies ------------------------------------------------------------------

def tiny_policy_config(arch: Arch, i: int) -> PolicyConfig:
    variants = list(EmbedVariant) if arch is Arch.EXPERT else [EmbedVariant.CROSS_ATTN]
    inputs = list(PtInput)
    sup = ["full3d", "goal_only", "track2d", "full3d"][i % 4]
    return PolicyConfig(arch=arch, d=8, H=2, Np=3, n_heads=2, n_layers=2, seed=i,
                        embed_variant=variants[i % len(variants)], head_pt_input=inputs[i % len(inputs)],
                        supervision=sup)


def random_batch(cfg: PolicyConfig, rng: np.random.Generator, B: int = 2) -> WindowBatch:
    H, Np = cfg.H, cfg.Np
    if cfg.supervision.value == "goal_only":
        tshape = (B, Np, cfg.head_out_dim)
    else:
        tshape = (B, H, Np, cfg.head_out_dim)
    pts = rng.standard_normal((B, Np, 3)) * 0.2
    return WindowBatch(rng.standard_normal((B, cfg.scene_dim)), rng.standard_normal((B, cfg.proprio_dim)),
                       rng.integers(0, cfg.n_tasks, B), rng.standard_normal((B, H, cfg.action_dim)),
                       pts, pts, rng.standard_normal(tshape) * 0.1, np.zeros(B, dtype=np.int64),
                       np.zeros(B, dtype=np.int64))


def check_policy(arch: Arch, i: int, rng: np.random.Generator, n_coords: int = 12) -> float:
    """Relative error of the combined loss gradient on random parameter
    coordinates, plus one directional derivative along all parameters."""
    cfg = tiny_policy_config(arch, i)
    policy = Policy(cfg)
    for p in policy.params.params.values():
        p.data = rng.standard_normal(p.shape) * 0.5
    batch = random_batch(cfg, rng)
    omega = float(rng.uniform(0.1, 2.0))
    noise_seed = int(rng.integers(0, 2**31))
    # place L1 targets at least 0.05 away from the current predictions so no
    # finite-difference probe straddles the |x| kink
    with ad.no_grad():
        pred, _, tracks = policy.forward_train(PolicyInput.from_batch(batch), batch.actions,
                                               make_rng(noise_seed, "gradcheck"))
    if arch is Arch.OFT:
        batch.actions = pred.data + 0.5 * _away_from_zero(rng, pred.shape)
    if tracks is not None:
        batch.target = tracks.data + 0.5 * _away_from_zero(rng, tracks.shape)

    def loss():
        return combined_loss(policy, batch, omega, make_rng(noise_seed, "gradcheck")).total

    policy.params.zero_grad()
    ad.backward(loss())
    params = policy.params.params
    grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}
    scale = max(np.abs(g).max() for g in grads.values())

    def value():
        with ad.no_grad():
            return loss().item()

    names = list(params)
    sizes = np.array([params[k].size for k in names], dtype=np.float64)
    picks = rng.choice(len(names), n_coords, p=np.sqrt(sizes) / np.sqrt(sizes).sum())
    a_vals, n_vals = [], []
    for j in picks:
        p = params[names[j]]
        flat = int(rng.integers(0, p.size))
        idx = np.unravel_index(flat, p.shape)
        orig = p.data[idx]
        p.data[idx] = orig + EPS
        up = value()
        p.data[idx] = orig - EPS
        down = value()
        p.data[idx] = orig
        a_vals.append(grads[names[j]][idx])
        n_vals.append((up - down) / (2 * EPS))
    worst = rel_err(np.array(a_vals), np.array(n_vals), scale)

    direction = {k: rng.standard_normal(p.shape) for k, p in params.items()}
    norm = np.sqrt(sum((v * v).sum() for v in direction.values()))
    base = {k: p.data.copy() for k, p in params.items()}
    vals = []
    for sgn in (1.0, -1.0):
        for k, p in params.items():
            p.data = base[k] + sgn * EPS * direction[k] / norm
        vals.append(value())
    for k, p in params.items():
        p.data = base[k]
    numeric = (vals[0] - vals[1]) / (2 * EPS)
    analytic = sum((grads[k] * direction[k]).sum() for k in params) / norm
    return max(worst, rel_err(np.array([analytic]), np.array([numeric])))


def run_suite(instances: int = 100, seed: int = 0, ops=None, policies: bool = True) -> list[CheckResult]:
    results = []
    for name, case in OP_CASES.items():
        if ops is not None and name not in ops:
            continue
        rng = make_rng(seed, "gradcheck", name)
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(instances):
            fn, inputs = case(rng)
            worst = max(worst, check_function(fn, inputs, rng))
        results.append(CheckResult(name, instances, worst, time.perf_counter() - t0))
    if policies:
        for arch in Arch:
            rng = make_rng(seed, "gradcheck", f"policy-{arch.value}")
            t0 = time.perf_counter()
            worst = max(check_policy(arch, i, rng) for i in range(instances))
            results.append(CheckResult(f"policy_{arch.value}", instances, worst, time.perf_counter() - t0))
    return results
