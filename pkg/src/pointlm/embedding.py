"""Encoder-free point tokenizer.

Three FPS + k-NN stages.  At each stage every neighbor carries the feature
of its source point concatenated with a sin/cos encoding of its offset from
the center; a linear layer widens this and a max over the neighborhood gives
the center feature.  A final linear projects to the language-model width.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import PointCloud, fps, knn_indices
from .rng import Rng


@dataclass(frozen=True)
class EmbedConfig:
    input_points: int = 512
    stage_sizes: tuple[int, int, int] = (128, 64, 32)
    group_k: int = 16
    stage_dims: tuple[int, int, int, int] = (24, 48, 96, 192)
    model_dim: int = 256
    freq_bands: int = 4

    def __post_init__(self):
        object.__setattr__(self, "stage_sizes", tuple(int(s) for s in self.stage_sizes))
        object.__setattr__(self, "stage_dims", tuple(int(s) for s in self.stage_dims))
        s, d = self.stage_sizes, self.stage_dims
        if len(s) != 3 or len(d) != 4:
            raise ValueError("EmbedConfig: need 3 stage sizes and 4 stage dims (lift + 3)")
        if not (s[0] > s[1] > s[2] >= 1):
            raise ValueError(f"EmbedConfig: stage sizes must strictly decrease, got {s}")
        if not (d[0] < d[1] < d[2] < d[3]):
            raise ValueError(f"EmbedConfig: stage dims must strictly increase, got {d}")
        if s[0] > self.input_points:
            raise ValueError("EmbedConfig: first stage larger than input")
        if self.group_k > s[1] or self.group_k < 1:
            raise ValueError(f"EmbedConfig: group_k={self.group_k} must be within [1, {s[1]}]")
        if self.freq_bands < 1:
            raise ValueError("EmbedConfig: freq_bands must be >= 1")

    @property
    def trig_dim(self) -> int:
        return 6 * self.freq_bands

    @classmethod
    def desk(cls) -> "EmbedConfig":
        return cls()

    @classmethod
    def paper(cls) -> "EmbedConfig":
        return cls(input_points=8192, stage_sizes=(512, 256, 128), group_k=81,
                   stage_dims=(288, 576, 1152, 2304), model_dim=4096, freq_bands=4)


def trig_encode(rel: np.ndarray, freq_bands: int) -> np.ndarray:
    """``(..., 3) -> (..., 6B)``; per axis, per band ``b``: sin(2^b pi c), cos(2^b pi c)."""
    if freq_bands < 1:
        raise ValueError("trig_encode: freq_bands must be >= 1")
    rel = np.asarray(rel, dtype=np.float64)
    freqs = np.pi * 2.0 ** np.arange(freq_bands)
    ang = rel[..., :, None] * freqs  # (..., 3, B)
    out = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # (..., 3, B, 2)
    return out.reshape(rel.shape[:-1] + (6 * freq_bands,))


def resample(cloud: PointCloud, target: int, rng: Rng | None = None) -> PointCloud:
    """FPS down to ``target`` points, or pad up by seeded repetition."""
    if target < 1:
        raise ValueError("resample: target must be >= 1")
    n = cloud.N
    if n == target:
        return cloud
    if n > target:
        return cloud.subset(fps(cloud.positions, target))
    rng = rng or Rng(0).split("resample")
    extra = rng.integers(n, target - n)
    return cloud.subset(np.concatenate([np.arange(n), extra]))


@dataclass
class StageGeometry:
    centers: np.ndarray  # m_s indices into the previous stage's points
    neighbors: np.ndarray  # m_s x k indices into the previous stage's points
    rel: np.ndarray  # m_s x k x 3
    enc: np.ndarray  # m_s x k x 6B


@dataclass
class EmbedGeometry:
    """Parameter-free part of the tokenizer, cacheable per cloud."""

    features: np.ndarray  # input_points x 6
    stages: list[StageGeometry] = field(default_factory=list)
    centers: np.ndarray | None = None  # M x 3 final token coordinates

    @property
    def patches(self) -> np.ndarray:
        return self.stages[-1].rel


def prepare_geometry(cloud: PointCloud, cfg: EmbedConfig, rng: Rng | None = None) -> EmbedGeometry:
    cloud = resample(cloud, cfg.input_points, rng)
    pos = cloud.positions
    geo = EmbedGeometry(features=cloud.features())
    for m in cfg.stage_sizes:
        centers = fps(pos, m)
        nbr = knn_indices(pos, pos[centers], cfg.group_k)
        rel = pos[nbr] - pos[centers][:, None, :]
        geo.stages.append(StageGeometry(centers, nbr, rel, trig_encode(rel, cfg.freq_bands)))
        pos = pos[centers]
    geo.centers = pos
    return geo


@dataclass
class TokenSet:
    tokens: T.Tensor  # M x D
    centers: np.ndarray  # M x 3
    patches: np.ndarray  # M x k x 3


def init_embed_params(cfg: EmbedConfig, rng: Rng, prefix: str = "embed.") -> dict[str, T.Tensor]:
    d = cfg.stage_dims
    shapes = {"lift": (6, d[0])}
    for s in range(3):
        shapes[f"stage{s}"] = (d[s] + cfg.trig_dim, d[s + 1])
    shapes["proj"] = (d[3], cfg.model_dim)
    params = {}
    for name, (fan_in, fan_out) in shapes.items():
        w = rng.split(name).normal((fan_in, fan_out)) / np.sqrt(fan_in)
        params[f"{prefix}{name}.w"] = T.Tensor(w, requires_grad=True)
        params[f"{prefix}{name}.b"] = T.Tensor(np.zeros(fan_out), requires_grad=True)
    return params


def _check_params(cfg: EmbedConfig, params: dict[str, T.Tensor], prefix: str) -> None:
    d = cfg.stage_dims
    want = {"lift": (6, d[0]), "proj": (d[3], cfg.model_dim)}
    for s in range(3):
        want[f"stage{s}"] = (d[s] + cfg.trig_dim, d[s + 1])
    for name, shape in want.items():
        w = params.get(f"{prefix}{name}.w")
        if w is None or w.shape != shape:
            got = None if w is None else w.shape
            raise T.ShapeError(f"embed config/params mismatch at {prefix}{name}.w", shape, got or ())


def embed_geometry(geo: EmbedGeometry, cfg: EmbedConfig, params: dict[str, T.Tensor],
                   prefix: str = "embed.") -> TokenSet:
    _check_params(cfg, params, prefix)
    feat = T.Tensor(geo.features) @ params[f"{prefix}lift.w"] + params[f"{prefix}lift.b"]
    for s, st in enumerate(geo.stages):
        m, k = st.neighbors.shape
        carried = T.gather(feat, st.neighbors, axis=0)  # m x k x d
        h = T.concat([carried, T.Tensor(st.enc)], axis=2)
        h = h @ params[f"{prefix}stage{s}.w"] + params[f"{prefix}stage{s}.b"]
        feat = h.max(axis=1)
    tokens = feat @ params[f"{prefix}proj.w"] + params[f"{prefix}proj.b"]
    return TokenSet(tokens, geo.centers, geo.patches)


def embed(cloud: PointCloud, cfg: EmbedConfig, params: dict[str, T.Tensor], prefix: str = "embed.") -> TokenSet:
    return embed_geometry(prepare_geometry(cloud, cfg), cfg, params, prefix)


def embed_param_count(cfg: EmbedConfig, include_projection: bool = True) -> int:
    d = cfg.stage_dims
    n = 6 * d[0] + d[0]
    for s in range(3):
        n += (d[s] + cfg.trig_dim) * d[s + 1] + d[s + 1]
    if include_projection:
        n += d[3] * cfg.model_dim + cfg.model_dim
    return n
