"""Event stream -> vertex graph (student input) and dense temporal voxel grid (teacher input)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .events_io import EventStream

OMEGA_KINDS = ("signed_sum", "count")
FEATURE_SCALES = ("none", "max_abs")


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class VoxelConfig:
    """Voxel extent (pixels, pixels, ms) and the number of retained vertices.

    ``feature_scale="max_abs"`` divides each graph's semantic attributes by
    their largest magnitude so they share the [-1, 1] range of the coordinates.
    """

    v_x: int = 5
    v_y: int = 5
    v_t: float = 10.0
    n_vertices: int = 512
    normalize: bool = True
    omega: str = "signed_sum"
    feature_scale: str = "none"

    def __post_init__(self):
        if self.v_x < 1 or self.v_y < 1:
            raise ValueError("voxel spatial extent must be >= 1 pixel")
        if not self.v_t > 0:
            raise ValueError("voxel temporal extent must be positive")
        if self.n_vertices < 1:
            raise ValueError("n_vertices must be >= 1")
        if self.omega not in OMEGA_KINDS:
            raise ValueError(f"unknown omega {self.omega!r}")
        if self.feature_scale not in FEATURE_SCALES:
            raise ValueError(f"unknown feature_scale {self.feature_scale!r}")
        if round(self.v_t * 1000) != self.v_t * 1000:
            raise ValueError("v_t must be a whole number of microseconds")

    @property
    def d_inp(self) -> int:
        return self.v_x * self.v_y

    @property
    def v_t_us(self) -> int:
        return int(round(self.v_t * 1000))


@dataclass
class VoxelGraph:
    """``coords`` (N x 3: x px, y px, t ms, or [0, 1] when normalized) and ``feats`` (N x D_inp)."""

    coords: np.ndarray
    feats: np.ndarray
    counts: np.ndarray | None = None
    normalized: bool = False

    def __len__(self) -> int:
        return len(self.coords)


@dataclass
class DenseVoxelGrid:
    values: np.ndarray      # bins x H x W
    bin_edges: np.ndarray   # bins + 1 boundaries, microseconds

    @property
    def bins(self) -> int:
        return self.values.shape[0]


def voxelize(stream: EventStream, cfg: VoxelConfig) -> VoxelGraph:
    """Bucket events into voxels and keep the ``cfg.n_vertices`` most populated ones.

    Ties in event count are broken by ascending (t, y, x) voxel origin, and
    vertices are emitted in that retention order.
    """
    if len(stream) == 0:
        raise EmptyInputError("cannot voxelize an empty event stream")
    vx = stream.x // cfg.v_x
    vy = stream.y // cfg.v_y
    vt = stream.t // cfg.v_t_us
    nx = int(vx.max()) + 1
    ny = int(vy.max()) + 1
    key = (vt * ny + vy) * nx + vx
    uniq, inverse, counts = np.unique(key, return_inverse=True, return_counts=True)
    # uniq is ascending in key, i.e. in (t, y, x); a stable sort on -count keeps that order within ties
    order = np.argsort(-counts, kind="stable")[: cfg.n_vertices]
    kept = uniq[order]

    slot = np.full(len(uniq), -1, dtype=np.int64)
    slot[order] = np.arange(len(order))
    ev_slot = slot[inverse]
    sel = ev_slot >= 0
    cell = (stream.y[sel] % cfg.v_y) * cfg.v_x + (stream.x[sel] % cfg.v_x)
    weight = stream.p[sel] if cfg.omega == "signed_sum" else np.ones(int(sel.sum()), dtype=np.int64)
    feats = np.zeros((len(order), cfg.d_inp), dtype=np.float64)
    np.add.at(feats, (ev_slot[sel], cell), weight)
    if cfg.feature_scale == "max_abs":
        peak = np.abs(feats).max()
        if peak > 0:
            feats /= peak

    kx = kept % nx
    ky = (kept // nx) % ny
    kt = kept // (nx * ny)
    coords = np.stack([kx * cfg.v_x, ky * cfg.v_y, kt * cfg.v_t], axis=1).astype(np.float64)
    graph = VoxelGraph(coords, feats, counts[order])
    return normalize_coordinates(graph) if cfg.normalize else graph


def normalize_coordinates(graph: VoxelGraph) -> VoxelGraph:
    """Map each coordinate column affinely onto [0, 1]; constant columns become 0."""
    u = np.asarray(graph.coords, dtype=np.float64)
    lo = u.min(axis=0)
    span = u.max(axis=0) - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (u - lo) / safe, 0.0)
    return VoxelGraph(out, graph.feats, graph.counts, normalized=True)


def build_voxel_grid(stream: EventStream, bins: int, height: int, width: int,
                     mode: str = "nearest") -> DenseVoxelGrid:
    """Accumulate polarities into ``bins`` equal time intervals spanning [t_min, t_max].

    ``nearest`` adds each polarity to one bin; ``bilinear`` splits it between
    the two nearest bin centres. Both conserve total signed mass. Events
    outside the ``height`` x ``width`` window are dropped.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if len(stream) == 0:
        raise EmptyInputError("cannot build a voxel grid from an empty event stream")
    t0, t1 = int(stream.t.min()), int(stream.t.max())
    edges = np.linspace(t0, t1, bins + 1)
    keep = (stream.x < width) & (stream.y < height)
    x, y, t, p = stream.x[keep], stream.y[keep], stream.t[keep], stream.p[keep].astype(np.float64)
    grid = np.zeros((bins, height, width), dtype=np.float64)
    span = t1 - t0
    if mode == "nearest":
        if span == 0:
            b = np.zeros(len(t), dtype=np.int64)
        else:
            b = np.minimum((t - t0) * bins // span, bins - 1)
        np.add.at(grid, (b, y, x), p)
    elif mode == "bilinear":
        pos = np.zeros(len(t)) if span == 0 or bins == 1 else (t - t0) * (bins - 1) / span
        lo = np.floor(pos).astype(np.int64)
        frac = pos - lo
        np.add.at(grid, (lo, y, x), p * (1.0 - frac))
        hi = lo + 1
        ok = hi < bins
        np.add.at(grid, (hi[ok], y[ok], x[ok]), (p * frac)[ok])
    else:
        raise ValueError(f"unknown accumulation mode {mode!r}")
    return DenseVoxelGrid(grid, edges)
