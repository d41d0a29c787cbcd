"""AdamW with named parameter groups and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class MissingGroupError(KeyError):
    pass


@dataclass
class OptimizerState:
    group_lr: dict[str, float]
    group_of: dict[str, str]
    total_steps: int
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    warmup_steps: int = 0
    min_lr_ratio: float = 0.1
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def lr_factor(self, step: int) -> float:
        """Multiplier on the base rate for 1-based ``step``."""
        if self.warmup_steps and step <= self.warmup_steps:
            return step / self.warmup_steps
        span = max(1, self.total_steps - self.warmup_steps)
        t = min(1.0, (step - self.warmup_steps) / span)
        return self.min_lr_ratio + (1.0 - self.min_lr_ratio) * 0.5 * (1.0 + math.cos(math.pi * t))

    def lr(self, group: str, step: int | None = None) -> float:
        return self.group_lr[group] * self.lr_factor(self.step + 1 if step is None else step)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: OptimizerState) -> None:
    """One in-place AdamW update.

    Decoupled weight decay applies to matrices only (ndim >= 2).  A missing
    gradient counts as zero.  Parameters whose group rate is 0 are left
    untouched, moments included.
    """
    for name in params:
        if name not in state.group_of:
            raise MissingGroupError(f"parameter {name!r} has no group assignment")
    state.step += 1
    t = state.step
    b1, b2 = state.betas
    factor = state.lr_factor(t)
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        base = state.group_lr[state.group_of[name]]
        if base == 0.0:
            continue
        lr = base * factor
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay and p.data.ndim >= 2:
            update = update + state.weight_decay * p.data
        p.data = p.data - lr * update


class AdamW:
    """Stateful wrapper: reads ``.grad`` off the parameters."""

    def __init__(self, params: dict[str, Tensor], groups: dict[str, tuple[float, list[str]]],
                 total_steps: int, weight_decay: float = 0.0, betas=(0.9, 0.95), eps: float = 1e-8,
                 warmup_steps: int = 0, min_lr_ratio: float = 0.1):
        self.params = params
        group_of = {}
        for gname, (_, names) in groups.items():
            for n in names:
                group_of[n] = gname
        self.state = OptimizerState(
            group_lr={g: float(lr) for g, (lr, _) in groups.items()},
            group_of=group_of,
            total_steps=total_steps,
            weight_decay=weight_decay,
            betas=tuple(betas),
            eps=eps,
            warmup_steps=warmup_steps,
            min_lr_ratio=min_lr_ratio,
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adamw_step(self.params, {n: p.grad for n, p in self.params.items()}, self.state)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"optim.step": np.array(float(self.state.step))}
        for name in self.params:
            if name in self.state.m:
                out[f"optim.m.{name}"] = self.state.m[name]
                out[f"optim.v.{name}"] = self.state.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.state.step = int(arrays["optim.step"])
        self.state.m.clear()
        self.state.v.clear()
        for key, arr in arrays.items():
            for prefix, store in (("optim.m.", self.state.m), ("optim.v.", self.state.v)):
                if key.startswith(prefix):
                    name = key[len(prefix):]
                    store[name] = arr.astype(self.params[name].data.dtype) if name in self.params else arr.copy()
