"""Dense-frame teacher: a small pre-activation residual CNN over voxel grids.

Every stage output is ReLU'd and globally average-pooled into a tap feature;
each tap has a linear auxiliary head and the last stage's head gives the
final prediction.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import MetricsWriter, batches
from .edgcn import ConfigurationError
from .substrate import Optimizer, OptimizerState, init_params, load_weights, save_weights


@dataclass(frozen=True)
class TeacherConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    blocks: int = 1
    n_taps: int = 3
    num_classes: int = 4
    bins: int = 5
    height: int = 32
    width: int = 32

    def __post_init__(self):
        if min(self.widths) < 1 or self.blocks < 1:
            raise ConfigurationError("teacher widths and block counts must be >= 1")
        if not 1 <= self.n_taps <= len(self.widths):
            raise ConfigurationError(f"n_taps must lie in [1, {len(self.widths)}]")
        if list(self.widths) != sorted(self.widths):
            raise ConfigurationError("stage widths must be non-decreasing")
        smallest = min(self.height, self.width) // 2 ** (len(self.widths) - 1)
        if smallest < 2:
            raise ConfigurationError(f"{self.height}x{self.width} input too small for {len(self.widths)} stages")

    @classmethod
    def from_dict(cls, d: dict) -> "TeacherConfig":
        d = dict(d)
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class ResidualBlock(nn.Module):
    """out = conv2(relu(conv1(relu(x)))) + skip(x); skip is a strided 1x1 conv on shape change."""

    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.proj = None
        if stride != 1 or c_in != c_out:
            self.proj = nn.Conv2d(c_in, c_out, 1, stride=stride)

    def forward(self, x):
        h = self.conv2(F.relu(self.conv1(F.relu(x))))
        return h + (x if self.proj is None else self.proj(x))


@dataclass
class TeacherOutputs:
    features: list[torch.Tensor]
    stage_logits: list[torch.Tensor]
    logits: torch.Tensor


class Teacher(nn.Module):
    def __init__(self, cfg: TeacherConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Conv2d(cfg.bins, cfg.widths[0], 3, padding=1)
        stages = []
        c = cfg.widths[0]
        for i, w in enumerate(cfg.widths):
            blocks = [ResidualBlock(c, w, stride=1 if i == 0 else 2)]
            blocks += [ResidualBlock(w, w) for _ in range(cfg.blocks - 1)]
            stages.append(nn.Sequential(*blocks))
            c = w
        self.stages = nn.ModuleList(stages)
        self.heads = nn.ModuleList(nn.Linear(w, cfg.num_classes) for w in self.tap_widths)

    @property
    def tap_widths(self) -> list[int]:
        return list(self.cfg.widths[-self.cfg.n_taps:])

    def forward(self, grids: torch.Tensor) -> TeacherOutputs:
        if grids.dim() == 3:
            grids = grids[None]
        if grids.shape[1] != self.cfg.bins:
            raise ConfigurationError(f"grid has {grids.shape[1]} bins, teacher expects {self.cfg.bins}")
        h = self.stem(grids)
        pooled = []
        for stage in self.stages:
            h = stage(h)
            pooled.append(F.relu(h).mean(dim=(2, 3)))
        feats = pooled[-self.cfg.n_taps:]
        logits = [head(f) for head, f in zip(self.heads, feats)]
        return TeacherOutputs(feats, logits, logits[-1])


def teacher_forward(model: Teacher, grid) -> TeacherOutputs:
    values = getattr(grid, "values", grid)
    dtype = next(model.parameters()).dtype
    return model(torch.as_tensor(values, dtype=dtype))


def frame_loss(out: TeacherOutputs, labels: torch.Tensor, all_heads: bool = True):
    """Sum of cross-entropies over the auxiliary heads (or the final head only)."""
    heads = out.stage_logits if all_heads else out.stage_logits[-1:]
    terms = [F.cross_entropy(lg, labels) for lg in heads]
    return sum(terms), terms


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainResult:
    model: nn.Module
    rows: list[dict]
    best_epoch: int
    final_accuracy: float


def teacher_columns(n_taps: int) -> list[str]:
    return (["epoch", "split", "loss_total"] + [f"loss_head_{i + 1}" for i in range(n_taps)]
            + ["accuracy", "lr", "seed"])


@torch.no_grad()
def teacher_predict(model: Teacher, ds, batch_size: int = 64):
    """Teacher outputs over a whole dataset: (logits, [tap features])."""
    model.eval()
    dtype = next(model.parameters()).dtype
    logits, taps = [], []
    for idx in batches(len(ds), batch_size):
        out = model(ds.grid_batch(idx, dtype))
        logits.append(out.logits)
        taps.append(out.features)
    return torch.cat(logits), [torch.cat([t[i] for t in taps]) for i in range(len(taps[0]))]


def _teacher_eval(model, ds, all_heads, batch_size=64):
    model.eval()
    dtype = next(model.parameters()).dtype
    n = len(ds)
    sums = None
    correct = 0
    with torch.no_grad():
        for idx in batches(n, batch_size):
            y = ds.label_batch(idx)
            out = model(ds.grid_batch(idx, dtype))
            total, terms = frame_loss(out, y, all_heads)
            vals = [float(total)] + [float(F.cross_entropy(l, y)) for l in out.stage_logits]
            sums = [v * len(idx) for v in vals] if sums is None else [s + v * len(idx) for s, v in zip(sums, vals)]
            correct += int((out.logits.argmax(1) == y).sum())
    return [s / n for s in sums], correct / n


def eval_due(epoch: int, epochs: int, every: int) -> bool:
    """Whether held-out splits are evaluated after ``epoch`` (always after the last)."""
    return (epoch + 1) % every == 0 or epoch == epochs - 1


def train_teacher(cfg: TeacherConfig, train, test, *, seed: int = 0, epochs: int = 30,
                  batch_size: int = 32, optimizer=None, all_heads: bool = True, val=None,
                  out_dir=None, dtype=torch.float32, init_weights=None, eval_every: int = 1) -> TrainResult:
    """Minimise the summed auxiliary-head cross-entropy (final head only if ``all_heads`` is off).

    Writes ``metrics.csv`` plus best (by validation accuracy, or training
    accuracy without a validation set) and final weights under ``out_dir``.
    ``init_weights`` names external weights to start from. Held-out splits
    are scored every ``eval_every`` epochs and after the last.
    """
    if train.num_classes != cfg.num_classes:
        raise ConfigurationError("teacher class count does not match the dataset")
    if len(train) == 0:
        raise ValueError("empty training set")
    torch.manual_seed(seed)
    model = Teacher(cfg)
    init_params(model, seed, "he")
    if init_weights is not None:
        load_weights(model, init_weights)
    model = model.to(dtype)
    state = optimizer or OptimizerState(kind="adam", lr_max=1e-3, epochs=epochs)
    opt = Optimizer(model.parameters(), state)
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    writer = MetricsWriter(out_dir / "metrics.csv" if out_dir else None, teacher_columns(cfg.n_taps))

    best_acc, best_epoch = -1.0, -1
    for epoch in range(epochs):
        opt.set_epoch(epoch)
        model.train()
        sums = np.zeros(cfg.n_taps + 1)
        correct = 0
        for idx in batches(len(train), batch_size, rng):
            y = train.label_batch(idx)
            out = model(train.grid_batch(idx, dtype))
            total, terms = frame_loss(out, y, all_heads)
            if not torch.isfinite(total):
                raise TrainingDiverged(f"teacher loss became {float(total)} at epoch {epoch}, step {opt.state.step}")
            total.backward()
            opt.step()
            with torch.no_grad():
                heads = [float(F.cross_entropy(l, y)) for l in out.stage_logits]
            sums += np.array([float(total.detach())] + heads) * len(idx)
            correct += int((out.logits.argmax(1) == y).sum())
        means = (sums / len(train)).tolist()
        train_acc = correct / len(train)
        lr = opt.lr
        writer.write(epoch=epoch, split="train", loss_total=means[0], accuracy=train_acc, lr=lr, seed=seed,
                     **{f"loss_head_{i + 1}": v for i, v in enumerate(means[1:])})
        select_acc = train_acc
        for name, ds in (("val", val), ("test", test)):
            if ds is None or not eval_due(epoch, epochs, eval_every):
                continue
            vals, acc = _teacher_eval(model, ds, all_heads)
            writer.write(epoch=epoch, split=name, loss_total=vals[0], accuracy=acc, lr=lr, seed=seed,
                         **{f"loss_head_{i + 1}": v for i, v in enumerate(vals[1:])})
            if name == "val":
                select_acc = acc
        if select_acc >= best_acc:
            best_acc, best_epoch = select_acc, epoch
            if out_dir:
                save_weights(model, out_dir / "teacher_best")
    if out_dir:
        save_weights(model, out_dir / "teacher_final")
    final_acc = float("nan")
    if test is not None:
        final_acc = next(r["accuracy"] for r in reversed(writer.rows) if r["split"] == "test")
    return TrainResult(model, writer.rows, best_epoch, final_acc)
