"""In-memory datasets of paired representations, minibatching and metrics files."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .edgcn import collate
from .events_io import DatasetManifest, EventStream, read_events
from .representations import VoxelConfig, VoxelGraph, build_voxel_grid, voxelize


@dataclass
class GridSpec:
    bins: int = 5
    height: int = 32
    width: int = 32
    mode: str = "nearest"


class EventDataset:
    """Both representations of every stream in a manifest, built once up front."""

    def __init__(self, streams: Sequence[EventStream], labels: Sequence[int], class_names: Sequence[str],
                 voxel: VoxelConfig, grid: GridSpec, time_span: float = 1.0):
        self.class_names = list(class_names)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.voxel = voxel
        self.grid = grid
        streams = [s.time_slice(time_span) for s in streams]
        self.graphs: list[VoxelGraph] = [voxelize(s, voxel) for s in streams]
        self.grids = np.stack([build_voxel_grid(s, grid.bins, grid.height, grid.width, grid.mode).values
                               for s in streams]).astype(np.float32)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, voxel: VoxelConfig, grid: GridSpec,
                      time_span: float = 1.0) -> "EventDataset":
        streams = [read_events(p) for p, _ in manifest.entries]
        return cls(streams, manifest.labels, manifest.class_names, voxel, grid, time_span)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def graph_batch(self, idx, dtype=torch.float32):
        return collate([self.graphs[i] for i in idx], dtype)

    def grid_batch(self, idx, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.grids[idx], dtype=dtype)

    def label_batch(self, idx) -> torch.Tensor:
        return torch.as_tensor(self.labels[idx])


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Index batches covering ``range(n)``; shuffled when ``rng`` is given.

    A trailing batch of one sample is merged into the previous batch so every
    batch can feed a contrastive loss.
    """
    order = rng.permutation(n) if rng is not None else np.arange(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def metric_columns(n_feat: int) -> list[str]:
    return (["epoch", "split", "loss_total", "loss_task", "loss_inf"]
            + [f"loss_feat_{i + 1}" for i in range(n_feat)] + ["accuracy", "lr", "seed"])


class MetricsWriter:
    """CSV rows with floats written in shortest round-trip form."""

    def __init__(self, path, columns: Sequence[str]):
        self.path = Path(path) if path is not None else None
        self.columns = list(columns)
        self.rows: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(self.columns)

    def write(self, **row) -> None:
        missing = set(self.columns) - set(row)
        if missing:
            raise KeyError(f"metrics row lacks {sorted(missing)}")
        self.rows.append(row)
        if self.path is not None:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow([_fmt(row[c]) for c in self.columns])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_metrics(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
