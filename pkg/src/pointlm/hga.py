"""Hierarchical geometry aggregation: grid-cell pooling of point tokens inside
the language model and the matching unpooling on the way back."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import GridMapping, cell_means, dynamic_grid_sample, pad_cells
from .layers import init_linear, multihead_attention
from .rng import Rng

POOLING_MODES = ("mean", "max", "maxmean")


class PlanError(ValueError):
    pass


class EmptyStackError(RuntimeError):
    pass


@dataclass
class HgaPlan:
    """Where aggregations and propagations fire (1-based "after layer i").

    Within a block, ``l`` aggregations fire ``O + 1`` layers apart; the first
    propagation comes ``H + 1`` layers after the last aggregation, and the
    next block starts ``H + 1`` layers after the last propagation.  With
    l=3, H=2, O=0, start=1 this gives aggregations after 1,2,3 / 11,12,13 and
    propagations after 6,7,8 / 16,17,18.  ``blocks`` overrides the pattern.
    """

    l: int = 3
    H: int = 2
    O: int = 0
    n_blocks: int = 1
    start: int = 1
    pooling_mode: str = "maxmean"
    residual: bool = False
    attention: bool = True
    blocks: list[tuple[list[int], list[int]]] | None = None

    def __post_init__(self):
        if self.pooling_mode not in POOLING_MODES:
            raise PlanError(f"unknown pooling mode {self.pooling_mode!r}")
        if self.blocks is not None:
            self.blocks = [(list(a), list(p)) for a, p in self.blocks]
        for a, p in self.placements():
            if len(a) != len(p):
                raise PlanError(f"block has {len(a)} aggregations but {len(p)} propagations")
        layers = [layer for layer, _ in self.events()]
        if any(b < a for a, b in zip(layers, layers[1:])):
            raise PlanError(f"plan layers must be non-decreasing, got {layers}")
        if layers and layers[0] < 1:
            raise PlanError("plan layers are 1-based")

    @classmethod
    def empty(cls) -> "HgaPlan":
        return cls(n_blocks=0)

    @classmethod
    def desk(cls) -> "HgaPlan":
        return cls(l=3, H=1, O=0, n_blocks=1)

    @classmethod
    def paper(cls) -> "HgaPlan":
        return cls(l=3, H=2, O=0, n_blocks=2)

    def placements(self) -> list[tuple[list[int], list[int]]]:
        if self.blocks is not None:
            return self.blocks
        out = []
        layer = self.start
        for _ in range(self.n_blocks):
            aggs = [layer + i * (self.O + 1) for i in range(self.l)]
            first_prop = aggs[-1] + self.H + 1
            props = [first_prop + i * (self.O + 1) for i in range(self.l)]
            out.append((aggs, props))
            layer = props[-1] + self.H + 1
        return out

    def events(self) -> list[tuple[int, str]]:
        ev = []
        for aggs, props in self.placements():
            ev += [(a, "agg") for a in aggs] + [(p, "prop") for p in props]
        return ev

    def n_aggregations(self) -> int:
        return sum(len(a) for a, _ in self.placements())

    def validate(self, n_layers: int) -> None:
        depth = 0
        for layer, kind in self.events():
            if layer > n_layers:
                raise PlanError(f"plan fires after layer {layer} but the model has {n_layers}")
            depth += 1 if kind == "agg" else -1
            if depth < 0:
                raise PlanError("propagation without a pending aggregation")
        if depth != 0:
            raise PlanError("unbalanced plan")

    def to_dict(self) -> dict:
        return {"l": self.l, "H": self.H, "O": self.O, "n_blocks": self.n_blocks, "start": self.start,
                "pooling_mode": self.pooling_mode, "residual": self.residual,
                "attention": self.attention, "blocks": self.blocks}


@dataclass
class StackFrame:
    mapping: GridMapping
    coords: np.ndarray
    features: T.Tensor


@dataclass
class HgaStack:
    frames: list[StackFrame] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.frames)


def init_gated_attention(rng: Rng, dim: int, prefix: str) -> dict[str, T.Tensor]:
    wqkv, bqkv = init_linear(rng.split("qkv"), dim, 3 * dim)
    wo, bo = init_linear(rng.split("o"), dim, dim)
    return {f"{prefix}wqkv": wqkv, f"{prefix}bqkv": bqkv, f"{prefix}wo": wo, f"{prefix}bo": bo,
            f"{prefix}gate": T.Tensor(np.zeros(()), requires_grad=True)}


def gated_self_attention(block, mask: np.ndarray, params: dict[str, T.Tensor], heads: int,
                         prefix: str = "") -> T.Tensor:
    """``block + tanh(gate) * SelfAttn(block)``, attention restricted to valid cell members."""
    block = T.as_tensor(block)
    mask = np.asarray(mask, dtype=bool)
    if block.ndim != 3 or mask.shape != block.shape[:2]:
        raise T.ShapeError("gated_self_attention", block.shape, mask.shape)
    add_mask = np.where(mask, 0.0, -np.inf)[:, None, None, :]  # cells x 1 x 1 x k
    attn = multihead_attention(block, params[f"{prefix}wqkv"], params[f"{prefix}bqkv"],
                               params[f"{prefix}wo"], params[f"{prefix}bo"], heads, add_mask)
    return block + T.tanh(params[f"{prefix}gate"]) * attn


def pool_cells(block, mask: np.ndarray, mode: str) -> T.Tensor:
    """Masked pooling over the member axis of an M_i x k x D block."""
    block = T.as_tensor(block)
    m = mask[:, :, None].astype(block.data.dtype)
    if mode in ("mean", "maxmean"):
        mean = (block * m).sum(axis=1) / m.sum(axis=1)
    if mode in ("max", "maxmean"):
        mx = (block + np.where(mask, 0.0, -np.inf)[:, :, None]).max(axis=1)
    if mode == "mean":
        return mean
    if mode == "max":
        return mx
    if mode == "maxmean":
        return 0.5 * (mean + mx)
    raise ValueError(f"unknown pooling mode {mode!r}")


def aggregate(tokens, coords: np.ndarray, cell_size: float, mode: str, params: dict[str, T.Tensor] | None,
              stack: HgaStack, heads: int = 1, prefix: str = "") -> tuple[T.Tensor, np.ndarray]:
    """Group tokens by grid cell, mix within cells, pool to one token per cell."""
    tokens = T.as_tensor(tokens)
    mapping = dynamic_grid_sample(coords, cell_size)
    block, mask = pad_cells(tokens, mapping)
    if params is not None:
        block = gated_self_attention(block, mask, params, heads, prefix)
    pooled = pool_cells(block, mask, mode)
    new_coords = cell_means(coords, mapping).data
    stack.frames.append(StackFrame(mapping, np.asarray(coords), tokens))
    return pooled, new_coords


def propagate(tokens, stack: HgaStack, residual: bool = False) -> tuple[T.Tensor, np.ndarray]:
    """Copy each cell token back to the cell's members and pop the stack."""
    if not stack.frames:
        raise EmptyStackError("propagate called with an empty aggregation stack")
    frame = stack.frames.pop()
    tokens = T.as_tensor(tokens)
    if tokens.shape[0] != frame.mapping.n_cells:
        raise T.ShapeError("propagate", tokens.shape, (frame.mapping.n_cells,))
    out = T.gather(tokens, frame.mapping.cell_of_point, axis=0)
    if residual:
        out = out + frame.features
    return out, frame.coords
