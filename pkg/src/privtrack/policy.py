"""Toy OFT-style and expert-style policies with an optional point-track head.

Attention is organised by token group. Each group has its own projection
weights and a fixed list of groups it may read from, which is the same as a
block mask over the concatenated sequence but computes the observation
prefix in isolation. The prefix is therefore bitwise unaffected by whatever
action-side tokens exist.

======================  ==============================================
group                   attends to
======================  ==============================================
prefix                  prefix
OFT action queries      prefix, queries
expert                  prefix, expert
backbone query          prefix, query (+ expert when attending action)
point expert            prefix, point expert
======================  ==============================================

Parameters of the point-track head live under ``pt_head.`` and those of the
embedding module under ``pt_embed.``; stripping drops both prefixes.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .params import ParamStore, load_checkpoint, make_rng, save_checkpoint
from .supervision import VariantKind
from .world import ACTION_DIM, PROPRIO_DIM, SCENE_DIM

HEAD_PREFIXES = ("pt_head.", "pt_embed.")
SCENE_TOKENS = 4
TIME_DIM = 16
HEAD_HIDDEN = 64
FUSION_HIDDEN = 128
INPUT_SCALE = 10.0  # metres -> decimetres, so observation features are O(1)


class Arch(str, enum.Enum):
    OFT = "oft"
    EXPERT = "expert"


class EmbedVariant(str, enum.Enum):
    CROSS_ATTN = "cross_attn"
    POINT_EXPERT = "point_expert"
    BACKBONE_QUERY = "backbone_query"
    BACKBONE_QUERY_ATTEND_ACTION = "backbone_query_attend_action"


class PtInput(str, enum.Enum):
    HEAD_ONLY = "head_only"
    BACKBONE_TOKEN = "backbone_token"
    NONE = "none"


class ConfigError(ValueError):
    pass


class StripError(ValueError):
    pass


@dataclass
class PolicyConfig:
    arch: Arch = Arch.OFT
    d: int = 64
    H: int = 8
    Np: int = 1024
    action_dim: int = ACTION_DIM
    embed_variant: EmbedVariant = EmbedVariant.CROSS_ATTN
    head_enabled: bool = True
    head_pt_input: PtInput = PtInput.HEAD_ONLY
    supervision: VariantKind = VariantKind.FULL3D
    n_heads: int = 4
    n_layers: int = 2
    scene_dim: int = SCENE_DIM
    proprio_dim: int = PROPRIO_DIM
    n_tasks: int = 3
    seed: int = 0

    def __post_init__(self):
        try:
            self.arch = Arch(self.arch)
            self.embed_variant = EmbedVariant(self.embed_variant)
            self.head_pt_input = PtInput(self.head_pt_input)
            self.supervision = VariantKind(self.supervision)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.scene_dim % SCENE_TOKENS:
            raise ConfigError(f"scene_dim={self.scene_dim} must split into {SCENE_TOKENS} tokens")
        for name in ("d", "H", "Np", "action_dim", "n_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if (self.head_enabled and self.arch is Arch.OFT
                and self.embed_variant is not EmbedVariant.CROSS_ATTN):
            raise ConfigError(f"embed_variant={self.embed_variant.value} needs the expert architecture")

    @property
    def head_out_dim(self) -> int:
        return 2 if self.supervision is VariantKind.TRACK2D else 3

    def to_dict(self) -> dict:
        return {k: (v.value if isinstance(v, enum.Enum) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown policy config keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class PolicyInput:
    """A batch of observations. ``head_points`` feed the track head,
    ``token_points`` the backbone (only for the backbone-token input)."""

    scene: np.ndarray  # [B, scene_dim]
    proprio: np.ndarray  # [B, proprio_dim]
    task_id: np.ndarray  # [B]
    head_points: np.ndarray | None = None  # [B, Np, 3]
    token_points: np.ndarray | None = None  # [B, N, 3]

    def __len__(self) -> int:
        return len(self.scene)

    @classmethod
    def from_batch(cls, batch) -> "PolicyInput":
        return cls(batch.scene, batch.proprio, batch.task_id, batch.head_points, batch.points)

    @classmethod
    def from_observations(cls, observations, head_points=None, token_points=None) -> "PolicyInput":
        return cls(np.stack([o.scene_features for o in observations]),
                   np.stack([o.proprio for o in observations]),
                   np.array([o.task_id for o in observations]), head_points, token_points)

    def take(self, idx) -> "PolicyInput":
        pick = (lambda a: None if a is None else a[idx])
        return PolicyInput(*(pick(getattr(self, f.name)) for f in fields(self)))


def time_embedding(s: np.ndarray) -> np.ndarray:
    """Sinusoidal features of the flow time, ``[B] -> [B, TIME_DIM]``."""
    freqs = np.exp(np.linspace(0.0, math.log(1000.0), TIME_DIM // 2))
    ang = np.asarray(s, dtype=np.float64)[:, None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def linear(x, w: Tensor, b: Tensor, pointwise: bool = False) -> Tensor:
    """``x @ w + b``. ``pointwise`` evaluates every row as its own product so a
    row's output does not depend on the other rows in the batch."""
    x = ad.as_tensor(x)
    if pointwise:
        k = x.shape[-1]
        y = ad.matmul(ad.reshape(x, x.shape[:-1] + (1, k)), w)
        return ad.reshape(y, x.shape[:-1] + (w.shape[-1],)) + b
    return ad.matmul(x, w) + b


class Policy:
    def __init__(self, config: PolicyConfig, store: ParamStore | None = None):
        self.config = config
        if store is None:
            store = ParamStore()
            self._build(store)
        self.params = store

    # parameters ---------------------------------------------------------

    def _weight(self, store, name, shape, fan_in, zero=False):
        if zero:
            return store.add(name, np.zeros(shape))
        bound = 1.0 / math.sqrt(fan_in)
        return store.add(name, make_rng(self.config.seed, name).uniform(-bound, bound, shape))

    def _dense(self, store, name, n_in, n_out, zero=False):
        self._weight(store, f"{name}.w", (n_in, n_out), n_in, zero)
        store.add(f"{name}.b", np.zeros(n_out))

    def _norm(self, store, name, d):
        store.add(f"{name}.g", np.ones(d))
        store.add(f"{name}.b", np.zeros(d))

    def _stack_params(self, store, prefix):
        d = self.config.d
        for i in range(self.config.n_layers):
            p = f"{prefix}.l{i}"
            self._norm(store, f"{p}.ln1", d)
            self._dense(store, f"{p}.qkv", d, 3 * d)
            self._dense(store, f"{p}.o", d, d)
            self._norm(store, f"{p}.ln2", d)
            self._dense(store, f"{p}.fc1", d, 2 * d)
            self._dense(store, f"{p}.fc2", 2 * d, d)

    def _build(self, store):
        c = self.config
        d = c.d
        self._dense(store, "bb.scene", c.scene_dim // SCENE_TOKENS, d)
        self._weight(store, "bb.scene_pos", (SCENE_TOKENS, d), d)
        self._weight(store, "bb.task", (c.n_tasks, d), d)
        if c.arch is Arch.OFT:
            self._dense(store, "bb.proprio", c.proprio_dim, d)
        if c.head_pt_input is PtInput.BACKBONE_TOKEN:
            self._dense(store, "bb.pt_token", 3, d)
        self._stack_params(store, "bb")
        if c.arch is Arch.OFT:
            self._weight(store, "bb.query", (c.H, d), d)
            self._norm(store, "bb.ln_f", d)
            self._dense(store, "act.fc1", d, d)
            self._dense(store, "act.fc2", d, c.action_dim, zero=True)
        else:
            self._dense(store, "ex.proprio", c.proprio_dim, d)
            self._dense(store, "ex.act_in", c.action_dim, d)
            self._weight(store, "ex.pos", (c.H, d), d)
            self._dense(store, "ex.t1", d + TIME_DIM, d)
            self._dense(store, "ex.t2", d, d)
            self._stack_params(store, "ex")
            self._norm(store, "ex.ln_f", d)
            self._dense(store, "ex.out", d, c.action_dim, zero=True)
        if not c.head_enabled:
            return
        if c.arch is Arch.EXPERT:
            self._weight(store, "pt_embed.queries", (c.H, d), d)
            self._norm(store, "pt_embed.ln_f", d)
            v = c.embed_variant
            if v is EmbedVariant.CROSS_ATTN:
                self._norm(store, "pt_embed.ln_q", d)
                self._norm(store, "pt_embed.ln_kv", d)
                self._dense(store, "pt_embed.q", d, d)
                self._dense(store, "pt_embed.kv", d, 2 * d)
                self._dense(store, "pt_embed.o", d, d)
                self._norm(store, "pt_embed.ln2", d)
                self._dense(store, "pt_embed.fc1", d, 2 * d)
                self._dense(store, "pt_embed.fc2", 2 * d, d)
            elif v is EmbedVariant.POINT_EXPERT:
                self._stack_params(store, "pt_embed.pexpert")
        if c.head_pt_input is PtInput.NONE:
            self._weight(store, "pt_head.point_id", (c.Np, d), d)
        else:
            self._dense(store, "pt_head.pm1", 3, HEAD_HIDDEN)
            self._dense(store, "pt_head.pm2", HEAD_HIDDEN, d)
        self._dense(store, "pt_head.f1", 2 * d, FUSION_HIDDEN)
        self._dense(store, "pt_head.f2", FUSION_HIDDEN, c.head_out_dim, zero=True)

    def p(self, name) -> Tensor:
        return self.params[name]

    def num_parameters(self) -> int:
        return self.params.num_parameters()

    def head_parameter_names(self) -> list[str]:
        return [n for n in self.params.names() if n.startswith(HEAD_PREFIXES)]

    # building blocks ----------------------------------------------------

    def _dense_apply(self, name, x, pointwise=False):
        return linear(x, self.p(f"{name}.w"), self.p(f"{name}.b"), pointwise)

    def _ln(self, name, x):
        return ad.layer_norm(x, self.p(f"{name}.g"), self.p(f"{name}.b"))

    def _split_heads(self, t):
        B, T, d = t.shape
        nh = self.config.n_heads
        return ad.transpose(ad.reshape(t, (B, T, nh, d // nh)), (0, 2, 1, 3))

    def _merge_heads(self, t):
        B, nh, T, dh = t.shape
        return ad.reshape(ad.transpose(t, (0, 2, 1, 3)), (B, T, nh * dh))

    def _stack(self, prefix, x, sources=()):
        """Run a token group through its transformer layers.

        ``sources`` holds, per other group it may read, the list of per-layer
        ``(k, v)`` head tensors. Returns final states and this group's own
        per-layer keys/values.
        """
        d = self.config.d
        own = []
        for i in range(self.config.n_layers):
            p = f"{prefix}.l{i}"
            qkv = self._dense_apply(f"{p}.qkv", self._ln(f"{p}.ln1", x))
            q = self._split_heads(ad.getitem(qkv, (Ellipsis, slice(0, d))))
            k = self._split_heads(ad.getitem(qkv, (Ellipsis, slice(d, 2 * d))))
            v = self._split_heads(ad.getitem(qkv, (Ellipsis, slice(2 * d, 3 * d))))
            own.append((k, v))
            ks = [src[i][0] for src in sources] + [k]
            vs = [src[i][1] for src in sources] + [v]
            kk = ks[0] if len(ks) == 1 else ad.concat(ks, axis=2)
            vv = vs[0] if len(vs) == 1 else ad.concat(vs, axis=2)
            a = self._merge_heads(ad.attention(q, kk, vv))
            x = x + self._dense_apply(f"{p}.o", a)
            h = ad.gelu(self._dense_apply(f"{p}.fc1", self._ln(f"{p}.ln2", x)))
            x = x + self._dense_apply(f"{p}.fc2", h)
        return x, own

    def _check_input(self, inp: PolicyInput):
        c = self.config
        B = len(inp.scene)
        if inp.scene.shape != (B, c.scene_dim):
            raise ShapeError(f"scene features {inp.scene.shape} do not match scene_dim={c.scene_dim}")
        if inp.proprio.shape != (B, c.proprio_dim):
            raise ShapeError(f"proprio {inp.proprio.shape} does not match proprio_dim={c.proprio_dim}")
        if np.shape(inp.task_id) != (B,):
            raise ShapeError(f"task_id shape {np.shape(inp.task_id)} != ({B},)")
        if c.head_pt_input is PtInput.BACKBONE_TOKEN:
            if inp.token_points is None or inp.token_points.ndim != 3 or inp.token_points.shape[0] != B:
                raise ShapeError("backbone-token input needs token_points of shape [B, N, 3]")

    # backbone -----------------------------------------------------------

    def prefix_tokens(self, inp: PolicyInput) -> Tensor:
        c = self.config
        B = len(inp.scene)
        scene = INPUT_SCALE * np.asarray(inp.scene, dtype=np.float64).reshape(B, SCENE_TOKENS, -1)
        toks = [self._dense_apply("bb.scene", scene) + self.p("bb.scene_pos"),
                ad.reshape(ad.getitem(self.p("bb.task"), np.asarray(inp.task_id, dtype=np.int64)), (B, 1, c.d))]
        if c.arch is Arch.OFT:
            toks.append(ad.reshape(self._dense_apply("bb.proprio", INPUT_SCALE * inp.proprio), (B, 1, c.d)))
        if c.head_pt_input is PtInput.BACKBONE_TOKEN:
            toks.append(self._dense_apply("bb.pt_token", INPUT_SCALE * inp.token_points))
        return ad.concat(toks, axis=1)

    def encode_prefix(self, inp: PolicyInput):
        """Backbone pass over observation tokens only: ``(states, per-layer kv)``."""
        self._check_input(inp)
        return self._stack("bb", self.prefix_tokens(inp))

    def _queries(self, name, B):
        q = self.p(name)
        return ad.broadcast_to(q, (B,) + q.shape)

    # OFT ----------------------------------------------------------------

    def forward_oft(self, inp: PolicyInput, prefix=None):
        """Returns ``(z [B,H,d], actions [B,H,action_dim])``."""
        if self.config.arch is not Arch.OFT:
            raise ConfigError("forward_oft needs arch=oft")
        _, pkv = prefix if prefix is not None else self.encode_prefix(inp)
        x, _ = self._stack("bb", self._queries("bb.query", len(inp)), [pkv])
        z = self._ln("bb.ln_f", x)
        a = self._dense_apply("act.fc2", ad.gelu(self._dense_apply("act.fc1", z)))
        return z, a

    # expert -------------------------------------------------------------

    def expert_tokens(self, inp: PolicyInput, noisy, s) -> Tensor:
        c = self.config
        B = len(inp)
        noisy = np.asarray(noisy, dtype=np.float64)
        if noisy.shape != (B, c.H, c.action_dim):
            raise ShapeError(f"noisy chunk {noisy.shape} != {(B, c.H, c.action_dim)}")
        temb = np.broadcast_to(time_embedding(s)[:, None, :], (B, c.H, TIME_DIM))
        a = self._dense_apply("ex.act_in", noisy) + self.p("ex.pos")
        h = ad.gelu(self._dense_apply("ex.t1", ad.concat([a, temb], axis=-1)))
        act_tok = self._dense_apply("ex.t2", h)
        prop = ad.reshape(self._dense_apply("ex.proprio", INPUT_SCALE * inp.proprio), (B, 1, c.d))
        return ad.concat([prop, act_tok], axis=1)

    def _expert_pass(self, inp, noisy, s, pkv):
        s = np.asarray(s, dtype=np.float64).reshape(-1)
        if s.shape != (len(inp),):
            s = np.broadcast_to(s, (len(inp),))
        if (s < 0).any() or (s > 1).any():
            raise ValueError(f"flow time must lie in [0, 1], got range [{s.min()}, {s.max()}]")
        x, ekv = self._stack("ex", self.expert_tokens(inp, noisy, s), [pkv])
        h = self._ln("ex.ln_f", ad.getitem(x, (slice(None), slice(1, None))))
        return self._dense_apply("ex.out", h), ekv

    def forward_expert(self, inp: PolicyInput, noisy, s, prefix=None) -> Tensor:
        """Predicted velocity ``[B,H,action_dim]`` at flow time ``s``."""
        if self.config.arch is not Arch.EXPERT:
            raise ConfigError("forward_expert needs arch=expert")
        _, pkv = prefix if prefix is not None else self.encode_prefix(inp)
        return self._expert_pass(inp, noisy, s, pkv)[0]

    def sample_actions_fm(self, inp: PolicyInput, n_steps: int, rng: np.random.Generator | None,
                          velocity=None, x0=None) -> np.ndarray:
        """Euler integration of the learned field from noise (s=0) to data (s=1).

        The starting noise is drawn from ``rng`` unless ``x0`` supplies it.
        ``velocity(x, s)`` can replace the network, which is how the sampler is
        tested against closed-form fields.
        """
        if n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {n_steps}")
        c = self.config
        B = len(inp)
        if x0 is None:
            if rng is None:
                raise ValueError("sampling needs an rng or explicit starting noise")
            x0 = rng.standard_normal((B, c.H, c.action_dim))
        x = np.array(x0, dtype=np.float64)
        if velocity is None:
            with ad.no_grad():
                prefix = self.encode_prefix(inp)

            def velocity(x, s):
                with ad.no_grad():
                    return self.forward_expert(inp, x, np.full(B, s), prefix).data
        dt = 1.0 / n_steps
        for i in range(n_steps):
            x = x + dt * velocity(x, i * dt)
        return x

    # embedding module -----------------------------------------------------

    def embed_queries(self, prefix, expert_kv=None, B=None) -> Tensor:
        """Horizon embedding ``z [B,H,d]`` for the expert architecture.

        ``prefix`` is the ``(states, kv)`` pair of :meth:`encode_prefix`;
        ``expert_kv`` is needed by the attend-action variant only. The
        point-expert variant mirrors the action expert's layer structure with
        its own weights and reads the backbone layer by layer; this wiring is
        our interpretation of a briefly described design.
        """
        c = self.config
        if c.arch is not Arch.EXPERT or not c.head_enabled:
            raise ConfigError("embed_queries needs arch=expert with the head enabled")
        states, pkv = prefix
        B = states.shape[0]
        v = c.embed_variant
        queries = self._queries("pt_embed.queries", B)
        if v is EmbedVariant.CROSS_ATTN:
            d = c.d
            q = self._split_heads(self._dense_apply("pt_embed.q", self._ln("pt_embed.ln_q", queries)))
            kv = self._dense_apply("pt_embed.kv", self._ln("pt_embed.ln_kv", states))
            k = self._split_heads(ad.getitem(kv, (Ellipsis, slice(0, d))))
            vv = self._split_heads(ad.getitem(kv, (Ellipsis, slice(d, 2 * d))))
            x = queries + self._dense_apply("pt_embed.o", self._merge_heads(ad.attention(q, k, vv)))
            h = ad.gelu(self._dense_apply("pt_embed.fc1", self._ln("pt_embed.ln2", x)))
            x = x + self._dense_apply("pt_embed.fc2", h)
        elif v is EmbedVariant.POINT_EXPERT:
            x, _ = self._stack("pt_embed.pexpert", queries, [pkv])
        elif v is EmbedVariant.BACKBONE_QUERY:
            x, _ = self._stack("bb", queries, [pkv])
        else:
            if expert_kv is None:
                raise ValueError("backbone_query_attend_action needs the expert keys/values")
            x, _ = self._stack("bb", queries, [pkv, expert_kv])
        return self._ln("pt_embed.ln_f", x)

    # point-track head -----------------------------------------------------

    def point_embedding(self, points, B) -> Tensor:
        if self.config.head_pt_input is PtInput.NONE:
            pid = self.p("pt_head.point_id")
            return ad.broadcast_to(pid, (B,) + pid.shape)
        if points is None:
            raise ShapeError("the point-track head needs head_points")
        h = ad.gelu(self._dense_apply("pt_head.pm1", INPUT_SCALE * np.asarray(points), pointwise=True))
        return self._dense_apply("pt_head.pm2", h, pointwise=True)

    def predict_tracks(self, z, points) -> Tensor:
        """``ΔP̂ [B,H,Np,out]`` from ``z [B,H,d]`` and normalised ``P_t [B,Np,3]``.

        The first fusion layer acting on ``z ⊕ e`` is split into its ``z`` and
        ``e`` halves, which avoids materialising the ``[B,H,Np,2d]`` pairing.
        Goal-only supervision mean-pools ``z`` over the horizon and returns
        ``[B,Np,out]``.
        """
        c = self.config
        z = ad.as_tensor(z)
        if z.ndim != 3 or z.shape[-1] != c.d:
            raise ShapeError(f"z has shape {z.shape}, expected [B, H, {c.d}]")
        B = z.shape[0]
        goal = c.supervision is VariantKind.GOAL_ONLY
        if goal:
            z = ad.mean(z, axis=1, keepdims=True)
        e = self.point_embedding(points, B)
        w1 = self.p("pt_head.f1.w")
        wz = ad.getitem(w1, slice(0, c.d))
        we = ad.getitem(w1, slice(c.d, 2 * c.d))
        uz = ad.matmul(z, wz)  # [B,H,F]
        ue = linear(e, we, self.p("pt_head.f1.b"), pointwise=True)  # [B,Np,F]
        Hh, Np = uz.shape[1], ue.shape[1]
        u = (ad.reshape(uz, (B, Hh, 1, FUSION_HIDDEN)) + ad.reshape(ue, (B, 1, Np, FUSION_HIDDEN)))
        out = self._dense_apply("pt_head.f2", ad.gelu(u), pointwise=True)
        return ad.reshape(out, (B, Np, c.head_out_dim)) if goal else out

    def predict_tracks_reference(self, z, points) -> Tensor:
        """Unfactored form: explicit ``broadcast_concat`` then the fusion MLP."""
        c = self.config
        z = ad.as_tensor(z)
        B = z.shape[0]
        goal = c.supervision is VariantKind.GOAL_ONLY
        if goal:
            z = ad.mean(z, axis=1, keepdims=True)
        e = self.point_embedding(points, B)
        fused = ad.broadcast_concat(z, e)
        h = ad.gelu(self._dense_apply("pt_head.f1", fused))
        out = self._dense_apply("pt_head.f2", h)
        return ad.reshape(out, (B, e.shape[1], c.head_out_dim)) if goal else out

    # full passes ------------------------------------------------------------

    def forward_train(self, inp: PolicyInput, actions, rng: np.random.Generator | None = None,
                      detach_head: bool = False):
        """One training pass.

        Returns ``(pred, target, tracks)``: OFT predicts the chunk itself;
        the expert predicts the flow velocity for one ``(ε, s)`` draw per
        record, with target ``a - ε``. ``tracks`` is None without a head.
        ``detach_head`` cuts the graph between the policy and the head.
        """
        c = self.config
        actions = np.asarray(actions, dtype=np.float64)
        prefix = self.encode_prefix(inp)
        if c.arch is Arch.OFT:
            z, pred = self.forward_oft(inp, prefix)
            target = actions
            ekv = None
        else:
            B = len(inp)
            eps = rng.standard_normal(actions.shape)
            s = rng.uniform(0.0, 1.0, B)
            x_s = (1.0 - s)[:, None, None] * eps + s[:, None, None] * actions
            pred, ekv = self._expert_pass(inp, x_s, s, prefix[1])
            target = actions - eps
            z = None
        tracks = None
        if c.head_enabled:
            if detach_head:
                prefix = (prefix[0].detach(), [(k.detach(), v.detach()) for k, v in prefix[1]])
                ekv = None if ekv is None else [(k.detach(), v.detach()) for k, v in ekv]
                z = None if z is None else z.detach()
            if c.arch is Arch.EXPERT:
                z = self.embed_queries(prefix, ekv)
            tracks = self.predict_tracks(z, inp.head_points)
        return pred, target, tracks

    def act(self, inp: PolicyInput, rng: np.random.Generator | None = None, flow_steps: int = 10) -> np.ndarray:
        """Action chunk in policy units ``[B,H,action_dim]``; never runs the head."""
        if self.config.arch is Arch.OFT:
            with ad.no_grad():
                return self.forward_oft(inp)[1].data
        if rng is None:
            raise ValueError("the expert policy samples noise and needs an rng")
        return self.sample_actions_fm(inp, flow_steps, rng)

    # stripping and persistence ------------------------------------------------

    def strip_head(self) -> "Policy":
        c = self.config
        if c.head_pt_input is PtInput.BACKBONE_TOKEN:
            raise StripError("cannot strip: P_t is fed to the backbone as tokens, so point input stays "
                             "on the action path and is still required at inference")
        cfg = replace(c, head_enabled=False)
        return Policy(cfg, self.params.subset(lambda n: not n.startswith(HEAD_PREFIXES)))

    def save(self, path) -> None:
        path = Path(path)
        save_checkpoint(self.params.state(), path)
        sidecar_path(path).write_text(json.dumps(self.config.to_dict(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "Policy":
        path = Path(path)
        config = PolicyConfig.from_dict(json.loads(sidecar_path(path).read_text()))
        policy = cls(config)
        policy.params.load_state(load_checkpoint(path))
        return policy


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")
