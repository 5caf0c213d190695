"""Parameter store with group tags, AdamW with per-group learning rates,
cosine learning-rate schedule, global-norm clipping, and checkpoint I/O.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor

GROUPS = ("backbone", "diffusion_head", "vision_encoder")

CHECKPOINT_MAGIC = b"LSK1"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Named parameters, each tagged with exactly one group, plus AdamW moments."""

    def __init__(self):
        self.entries: dict[str, Tensor] = {}
        self.group: dict[str, str] = {}
        self.frozen_groups: set[str] = set()
        # sidecar optimizer state: name -> {"m": ndarray, "v": ndarray, "t": int}
        self.opt_state: dict[str, dict] = {}

    def add(self, name: str, data: np.ndarray, group: str) -> Tensor:
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        if name in self.entries:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self.entries[name] = t
        self.group[name] = group
        return t

    def remove(self, name: str) -> None:
        del self.entries[name]
        del self.group[name]
        self.opt_state.pop(name, None)

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def names(self):
        return list(self.entries)

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def freeze(self, group: str) -> None:
        self.frozen_groups.add(group)

    def clone_values(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.entries.items()}


@dataclass
class LrSchedule:
    peak_lr: float
    floor_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.floor_lr > self.peak_lr:
            raise ValueError("floor_lr must not exceed peak_lr")
        if self.warmup_steps >= self.total_steps:
            raise ValueError("warmup_steps must be < total_steps")


def cosine_lr(step: int, sched: LrSchedule) -> float:
    """Linear warmup to the peak, then cosine decay to the floor."""
    if step > sched.total_steps:
        raise ValueError(f"step {step} exceeds total_steps {sched.total_steps}")
    if step < sched.warmup_steps:
        return sched.peak_lr * step / sched.warmup_steps
    progress = (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    return sched.floor_lr + (sched.peak_lr - sched.floor_lr) * 0.5 * (1.0 + np.cos(np.pi * progress))


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most max_norm; returns the pre-clip norm."""
    sq = 0.0
    for t in store.entries.values():
        if t.grad is not None:
            sq += float(np.sum(t.grad * t.grad))
    norm = float(np.sqrt(sq))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for t in store.entries.values():
            if t.grad is not None:
                t.grad *= scale
    return norm


def adamw_step(
    store: ParamStore,
    lr_by_group: dict[str, float],
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> None:
    """One decoupled-weight-decay Adam step over every unfrozen parameter with a grad."""
    b1, b2 = betas
    for name, t in store.entries.items():
        group = store.group[name]
        if group in store.frozen_groups:
            continue
        g = t.grad
        if g is None:
            continue
        if not np.isfinite(np.sum(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
        if group not in lr_by_group:
            raise KeyError(f"no learning rate for group {group!r}")
        lr = lr_by_group[group]
        state = store.opt_state.get(name)
        if state is None:
            state = {"m": np.zeros_like(t.data), "v": np.zeros_like(t.data), "t": 0}
            store.opt_state[name] = state
        state["t"] += 1
        m, v = state["m"], state["v"]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        denom = np.sqrt(v / (1.0 - b2 ** state["t"]))
        denom += eps
        update = m / (1.0 - b1 ** state["t"])
        update /= denom
        if weight_decay:
            update += weight_decay * t.data
        update *= lr
        t.data -= update


# -- checkpoint format ---------------------------------------------------------
#
# magic "LSK1" | version u32 LE | records:
#   [name-length u32 LE][UTF-8 name][rank u32 LE][dims u32 LE each][payload f64 LE]
# Optimizer state lives under the "opt/" name prefix, scalar metadata under "meta/".


def write_records(path: str, records: dict[str, np.ndarray]) -> None:
    """Atomically write named float64 arrays in the checkpoint format."""
    dirname = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=dirname, prefix=".tmp-ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", CHECKPOINT_VERSION))
            for name in sorted(records):
                arr = np.ascontiguousarray(records[name], dtype=np.float64)
                nb = name.encode("utf-8")
                f.write(struct.pack("<I", len(nb)))
                f.write(nb)
                f.write(struct.pack("<I", arr.ndim))
                for dim in arr.shape:
                    f.write(struct.pack("<I", dim))
                f.write(arr.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_records(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        while True:
            head = f.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            payload = f.read(8 * count)
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
        return out


def store_to_records(store: ParamStore, include_opt: bool = True) -> dict[str, np.ndarray]:
    records: dict[str, np.ndarray] = {}
    for name, t in store.entries.items():
        records[name] = t.data
    if include_opt:
        for name, state in store.opt_state.items():
            records[f"opt/m/{name}"] = state["m"]
            records[f"opt/v/{name}"] = state["v"]
            records[f"opt/t/{name}"] = np.array([float(state["t"])])
    return records


def records_into_store(records: dict[str, np.ndarray], store: ParamStore) -> None:
    """Load parameter and optimizer records into an already-built store."""
    for name, t in store.entries.items():
        if name not in records:
            raise KeyError(f"checkpoint is missing parameter {name!r}")
        if records[name].shape != t.data.shape:
            raise ValueError(f"shape mismatch for {name!r}")
        t.data = records[name].astype(np.float64).copy()
    for name in store.entries:
        key = f"opt/m/{name}"
        if key in records:
            store.opt_state[name] = {
                "m": records[f"opt/m/{name}"].copy(),
                "v": records[f"opt/v/{name}"].copy(),
                "t": int(records[f"opt/t/{name}"][0]),
            }
