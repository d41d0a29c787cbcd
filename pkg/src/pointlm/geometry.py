"""Point-set kernels: FPS, k-NN grouping, chamfer distance, rigid motions,
grid-size scheduling, dynamic grid sampling and cell padding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import Rng


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if self.colors is None:
            self.colors = np.full_like(self.positions, 0.5)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.positions) < 1:
            raise ValueError("point cloud needs at least one point")
        if self.colors.shape != self.positions.shape:
            raise ValueError(f"colors {self.colors.shape} do not match positions {self.positions.shape}")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("point cloud has non-finite coordinates")

    @property
    def N(self) -> int:
        return len(self.positions)

    def features(self) -> np.ndarray:
        return np.concatenate([self.positions, self.colors], axis=1)

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.positions[idx], self.colors[idx])


def normalize_unit_ball(positions: np.ndarray) -> np.ndarray:
    """Center on the centroid and scale by the largest norm."""
    p = positions - positions.mean(axis=0)
    r = np.sqrt((p * p).sum(axis=1)).max()
    return p / r if r > 0 else p


# -- sampling / grouping -------------------------------------------------------------

def fps(positions: np.ndarray, m: int, start_rule: str = "index0") -> np.ndarray:
    """Greedy farthest point sampling; ties go to the smallest index."""
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    if not 1 <= m <= n:
        raise ValueError(f"fps: need 1 <= m <= N, got m={m}, N={n}")
    if start_rule == "index0":
        cur = 0
    elif start_rule == "max_norm":
        cur = int(np.argmax((positions * positions).sum(axis=1)))
    else:
        raise ValueError(f"fps: unknown start rule {start_rule!r}")
    sel = np.empty(m, dtype=np.int64)
    mind = np.full(n, np.inf)
    for t in range(m):
        sel[t] = cur
        d = positions - positions[cur]
        mind = np.minimum(mind, (d * d).sum(axis=1))
        mind[cur] = -1.0
        cur = int(np.argmax(mind))
    return sel


@dataclass
class PatchSet:
    center_indices: np.ndarray  # M
    centers: np.ndarray  # M x 3
    neighbor_indices: np.ndarray  # M x k
    patches: np.ndarray  # M x k x 3, relative to the center


def knn_indices(positions: np.ndarray, query: np.ndarray, k: int) -> np.ndarray:
    n = len(positions)
    if k > n:
        raise ValueError(f"knn: k={k} exceeds N={n}")
    d = query[:, None, :] - positions[None, :, :]
    d2 = (d * d).sum(axis=2)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def knn_group(positions: np.ndarray, centers: np.ndarray, k: int) -> PatchSet:
    positions = np.asarray(positions, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.int64)
    c = positions[centers]
    idx = knn_indices(positions, c, k)
    return PatchSet(centers, c, idx, positions[idx] - c[:, None, :])


# -- chamfer ------------------------------------------------------------------------

def chamfer_l2(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric squared-L2 chamfer distance with per-set averaging."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer_l2: empty point set")
    d = a[:, None, :] - b[None, :, :]
    d2 = (d * d).sum(axis=2)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def chamfer_l2_batched(a, b) -> T.Tensor:
    """Per-pair chamfer for P corresponding sets: (P,k,3) vs (P,k',3) -> (P,)."""
    a, b = T.as_tensor(a), T.as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise T.ShapeError("chamfer", a.shape, b.shape)
    if a.shape[1] == 0 or b.shape[1] == 0:
        raise ValueError("chamfer: empty point set")
    diff = a.reshape(a.shape[0], a.shape[1], 1, a.shape[2]) - b.reshape(b.shape[0], 1, b.shape[1], b.shape[2])
    d2 = (diff * diff).sum(axis=3)
    return d2.min(axis=2).mean(axis=1) + d2.min(axis=1).mean(axis=1)


# -- rigid motions -------------------------------------------------------------------

def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def apply_rigid(points: np.ndarray, rotation: np.ndarray, translation: np.ndarray) -> np.ndarray:
    return points @ rotation.T + translation


def random_rigid(points: np.ndarray, rng: Rng, max_shift: float = 0.1):
    """Uniform SO(3) rotation plus a uniform shift in [-max_shift, max_shift]^3."""
    rotation = quaternion_to_matrix(rng.normal(4))
    translation = rng.uniform(3, -max_shift, max_shift)
    return apply_rigid(np.asarray(points, dtype=np.float64), rotation, translation), rotation, translation


# -- grid size schedule --------------------------------------------------------------

@dataclass
class GridSchedule:
    alpha: float
    s_min: float
    s_max: float
    l: int
    thetas: np.ndarray
    gamma: float
    beta_ctr: float
    betas: np.ndarray
    sizes: np.ndarray


def grid_schedule(alpha: float = 0.02, s_min: float = 0.02, s_max: float = 1.0, l: int = 3,
                  thetas=None) -> GridSchedule:
    """Cumulative exponential cell sizes ``s_i = alpha * exp(sum_{j<=i} beta_j)``.

    ``beta_j = gamma * tanh(theta_j) + beta_ctr`` keeps every size in
    ``[s_min, s_max]`` whatever the thetas are.
    """
    if not (0 < alpha <= s_min < s_max):
        raise ValueError(f"grid_schedule: need 0 < alpha <= s_min < s_max, got {alpha}, {s_min}, {s_max}")
    if l < 1:
        raise ValueError("grid_schedule: l must be >= 1")
    thetas = np.zeros(l) if thetas is None else np.asarray(thetas, dtype=np.float64).reshape(-1)
    if thetas.shape != (l,):
        raise ValueError(f"grid_schedule: expected {l} thetas, got {thetas.shape[0]}")
    hi = np.log(s_max / alpha)
    lo = np.log(s_min / alpha)
    gamma = (hi - lo) / (2 * l)
    beta_ctr = (hi + lo) / (2 * l)
    betas = gamma * np.tanh(thetas) + beta_ctr
    sizes = np.clip(alpha * np.exp(np.cumsum(betas)), s_min, s_max)
    return GridSchedule(alpha, s_min, s_max, l, thetas, float(gamma), float(beta_ctr), betas, sizes)


# -- dynamic grid sampling -----------------------------------------------------------

@dataclass
class GridMapping:
    cell_of_point: np.ndarray  # M
    cells: list[np.ndarray]  # member indices per cell, ascending
    keys: np.ndarray  # M_i x 3 integer cell keys, lexicographic

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_points(self) -> int:
        return len(self.cell_of_point)

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(c) for c in self.cells], dtype=np.int64)

    @property
    def k_max(self) -> int:
        return int(self.counts.max())


def dynamic_grid_sample(positions: np.ndarray, cell_size: float) -> GridMapping:
    if not cell_size > 0:
        raise ValueError(f"dynamic_grid_sample: cell size must be positive, got {cell_size}")
    keys = np.floor(np.asarray(positions, dtype=np.float64) / cell_size).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(uniq) + 1))
    cells = [order[bounds[i]:bounds[i + 1]] for i in range(len(uniq))]
    return GridMapping(inverse.astype(np.int64), cells, uniq)


def padded_layout(mapping: GridMapping) -> tuple[np.ndarray, np.ndarray]:
    """Row index (into ``[features; cell_means]``) and validity mask, both M_i x k_max."""
    k = mapping.k_max
    m = mapping.n_points
    index = np.empty((mapping.n_cells, k), dtype=np.int64)
    mask = np.zeros((mapping.n_cells, k), dtype=bool)
    for c, members in enumerate(mapping.cells):
        assert len(members) > 0, "empty grid cell"
        index[c, :len(members)] = members
        index[c, len(members):] = m + c
        mask[c, :len(members)] = True
    return index, mask


def cell_means(features, mapping: GridMapping):
    f = T.as_tensor(features)
    sums = T.scatter_add(f, mapping.cell_of_point, mapping.n_cells)
    return sums / mapping.counts.reshape((-1,) + (1,) * (f.ndim - 1)).astype(f.data.dtype)


def pad_cells(features, mapping: GridMapping):
    """Cells as a dense M_i x k_max x D block; short cells padded with their member mean.

    Accepts an ndarray (returns ndarrays) or a Tensor (differentiable).
    """
    is_tensor = isinstance(features, T.Tensor)
    f = T.as_tensor(features)
    if f.shape[0] != mapping.n_points:
        raise T.ShapeError("pad_cells", f.shape, (mapping.n_points,))
    index, mask = padded_layout(mapping)
    rows = T.concat([f, cell_means(f, mapping)], axis=0)
    block = T.gather(rows, index, axis=0)
    return (block, mask) if is_tensor else (block.data, mask)
