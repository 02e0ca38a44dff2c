"""Parameter storage, AdamW, seeded streams and the P4RK checkpoint container."""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor

CHECKPOINT_MAGIC = b"P4RK"
CHECKPOINT_VERSION = 1


class MissingGradError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def make_rng(seed: int, *stream) -> np.random.Generator:
    """PCG64 generator keyed by ``seed`` plus an optional stream path.

    String stream labels are folded to integers with CRC32, so the mapping
    is stable across processes and platforms.
    """
    keys = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for s in stream:
        keys.append(zlib.crc32(s.encode()) if isinstance(s, str) else int(s) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(keys)))


@dataclass
class ParamStore:
    """Named parameters plus AdamW moment buffers."""

    params: dict[str, Tensor] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} registered twice")
        t = Tensor(value, requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise CheckpointError(f"parameter names differ: missing={sorted(missing)} extra={sorted(extra)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise CheckpointError(f"{k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()

    def subset(self, keep) -> "ParamStore":
        """Copy of the store restricted to names for which ``keep(name)`` is true."""
        out = ParamStore(step=self.step)
        for k, p in self.params.items():
            if keep(k):
                out.add(k, p.data.copy())
                out.m[k] = self.m[k].copy()
                out.v[k] = self.v[k].copy()
        return out


def adam_step(store: ParamStore, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One AdamW update with decoupled weight decay; clears gradients afterwards."""
    for name, p in store.params.items():
        if p.grad is None:
            raise MissingGradError(f"parameter {name!r} has no gradient")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = p.grad
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data = p.data - lr * update
        p.grad = None


# checkpoint container -------------------------------------------------------

def encode_checkpoint(state: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    for name, arr in state.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 8 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a P4RK checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64)
        out[name] = data.reshape(dims)
    return out


def save_checkpoint(state: dict[str, np.ndarray], path) -> None:
    Path(path).write_bytes(encode_checkpoint(state))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())
