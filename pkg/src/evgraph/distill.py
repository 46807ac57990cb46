"""Student training, alone or with cross-representation distillation from a frozen teacher."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import EventDataset, MetricsWriter, batches, metric_columns
from .edgcn import ConfigurationError, EdgcnConfig, EdgcnModel
from .losses import (DistillConfig, LossBundle, apply_variant, crd_total_loss, cross_entropy,
                     kd_loss, l1_inference_loss, nt_xent)
from .substrate import Mlp, MlpSpec, Optimizer, OptimizerState, init_params, save_weights
from .teacher import Teacher, TrainingDiverged, eval_due, teacher_predict

ADAPT_SEED_OFFSET = 1_000_003


class Distiller(nn.Module):
    """Student-side extras for distillation: adapt MLPs and, for variant B, tap heads."""

    def __init__(self, student_widths, teacher_widths, cfg: DistillConfig, num_classes: int):
        super().__init__()
        n = cfg.feature_taps
        pairs = list(zip(student_widths[len(student_widths) - n:], teacher_widths[len(teacher_widths) - n:]))
        self.adapt = nn.ModuleList(
            Mlp(MlpSpec((s, cfg.adapt_hidden or s, t)), name=f"adapt_{i + 1}") for i, (s, t) in enumerate(pairs)
        )
        self.tap_heads = nn.ModuleList()
        if apply_variant(cfg.variant).student_tap_task:
            self.tap_heads = nn.ModuleList(nn.Linear(s, num_classes) for s, _ in pairs)


@dataclass
class StudentRun:
    model: EdgcnModel
    distiller: Distiller | None
    rows: list[dict]
    step_rows: list[dict]
    best_epoch: int
    final_accuracy: float


def student_losses(model, distiller, batch, labels, teacher_out, cfg: DistillConfig | None,
                   record: bool = False):
    """Forward one batch and assemble its loss.

    ``teacher_out`` is (teacher logits, teacher taps) for the batch or None.
    Returns (total tensor, LossBundle, logits, trace).
    """
    coords, feats, mask = batch
    logits, taps, _, trace = model(coords, feats, mask, record=record)
    task = cross_entropy(logits, labels)
    if cfg is None:
        total, bundle = crd_total_loss(task, 0.0, [], DistillConfig(variant=None, lam=1.0))
        return total, bundle, logits, trace
    t_logits, t_taps = teacher_out
    inf = kd_loss(logits, t_logits, cfg.t_kd)
    wiring = apply_variant(cfg.variant)
    feats_terms = []
    n = cfg.feature_taps
    s_taps = taps[len(taps) - n:] if n else []
    t_taps = t_taps[len(t_taps) - n:] if n else []
    for i, (s, t) in enumerate(zip(s_taps, t_taps)):
        z = distiller.adapt[i](s)
        term = nt_xent(z, t, cfg.tau_ntx) if wiring.feature_loss == "ntxent" else l1_inference_loss(z, t)
        if wiring.student_tap_task:
            term = term + cross_entropy(distiller.tap_heads[i](s), labels)
        feats_terms.append(term)
    total, bundle = crd_total_loss(task, inf, feats_terms, cfg)
    return total, bundle, logits, trace


def check_attention_rows(trace, mask, tol: float = 1e-6) -> None:
    for li, layer in enumerate(trace):
        rows = layer["Score"].sum(-1)[mask]
        err = float((rows.detach() - 1.0).abs().max())
        if err > tol:
            raise AssertionError(f"layer {li + 1}: attention rows deviate from 1 by {err}")


def _mean_bundle(bundles: list[tuple[LossBundle, int]], n_feat: int) -> dict:
    total_n = sum(w for _, w in bundles)
    out = {"loss_total": 0.0, "loss_task": 0.0, "loss_inf": 0.0}
    out.update({f"loss_feat_{i + 1}": 0.0 for i in range(n_feat)})
    for b, w in bundles:
        out["loss_total"] += b.total * w
        out["loss_task"] += b.task * w
        out["loss_inf"] += b.inf * w
        for i, f in enumerate(b.feat):
            out[f"loss_feat_{i + 1}"] += f * w
    return {k: v / total_n for k, v in out.items()}


def _slice_teacher(cache, idx):
    if cache is None:
        return None
    logits, taps = cache
    return logits[idx], [t[idx] for t in taps]


@torch.no_grad()
def evaluate_student(model, distiller, ds: EventDataset, cfg, teacher_cache=None, batch_size: int = 64):
    """(mean loss parts, accuracy, predictions) over a dataset."""
    model.eval()
    dtype = next(model.parameters()).dtype
    bundles, preds = [], []
    for idx in batches(len(ds), batch_size):
        y = ds.label_batch(idx)
        _, bundle, logits, _ = student_losses(model, distiller, ds.graph_batch(idx, dtype), y,
                                              _slice_teacher(teacher_cache, idx), cfg)
        bundles.append((bundle, len(idx)))
        preds.append(logits.argmax(1))
    preds = torch.cat(preds).numpy()
    n_feat = cfg.feature_taps if cfg is not None else 0
    return _mean_bundle(bundles, n_feat), float((preds == ds.labels).mean()), preds


def train_student(model_cfg: EdgcnConfig, train: EventDataset, test: EventDataset | None,
                  distill: DistillConfig | None = None, teacher: Teacher | None = None, *,
                  seed: int = 0, epochs: int = 30, batch_size: int = 32,
                  optimizer: OptimizerState | None = None, val: EventDataset | None = None,
                  out_dir=None, dtype=torch.float32, check_attention: bool = False, eval_every: int = 1) -> StudentRun:
    """Train the graph student with SGD and a cosine schedule.

    With ``distill`` set, the frozen ``teacher`` supplies soft targets and
    tap features computed from the dense view of the same streams. Writes
    ``metrics.csv`` (per epoch and split), ``steps.csv`` (per step) and
    best/final weights under ``out_dir``. Held-out splits are scored every
    ``eval_every`` epochs and after the last.
    """
    if model_cfg.num_classes != train.num_classes:
        raise ConfigurationError("student class count does not match the dataset")
    if distill is not None:
        if teacher is None:
            raise ConfigurationError("distillation needs teacher weights")
        if teacher.cfg.num_classes != model_cfg.num_classes:
            raise ConfigurationError(f"teacher predicts {teacher.cfg.num_classes} classes, "
                                     f"student {model_cfg.num_classes}")
        limit = min(len(model_cfg.layers), teacher.cfg.n_taps)
        if distill.feature_taps > limit:
            raise ConfigurationError(f"n_taps={distill.feature_taps} exceeds the {limit} available taps")
        if batch_size < 2 and apply_variant(distill.variant).feature_loss == "ntxent":
            raise ConfigurationError("NT-Xent needs batch size >= 2")

    torch.manual_seed(seed)
    model = init_params(EdgcnModel(model_cfg), seed, "he").to(dtype)
    params = list(model.parameters())
    distiller = None
    caches = {}
    if distill is not None:
        distiller = Distiller(model.tap_widths, teacher.tap_widths, distill, model_cfg.num_classes)
        init_params(distiller, seed + ADAPT_SEED_OFFSET, "he")
        distiller = distiller.to(dtype)
        params += list(distiller.parameters())
        teacher = teacher.to(dtype).eval()
        for p in teacher.parameters():
            p.requires_grad_(False)
        for name, ds in (("train", train), ("val", val), ("test", test)):
            if ds is not None:
                caches[name] = teacher_predict(teacher, ds)

    state = optimizer or OptimizerState(kind="sgd_cosine", epochs=epochs, grad_clip=1.0)
    opt = Optimizer(params, state)
    rng = np.random.default_rng(seed)
    n_feat = distill.feature_taps if distill is not None else 0
    out_dir = Path(out_dir) if out_dir is not None else None
    writer = MetricsWriter(out_dir / "metrics.csv" if out_dir else None, metric_columns(n_feat))
    step_cols = ["step", "epoch", "loss_total", "loss_task", "loss_inf"] + \
        [f"loss_feat_{i + 1}" for i in range(n_feat)] + ["lr"]
    steps = MetricsWriter(out_dir / "steps.csv" if out_dir else None, step_cols)

    best_acc, best_epoch = -1.0, -1
    for epoch in range(epochs):
        opt.set_epoch(epoch)
        lr = opt.lr
        model.train()
        bundles, correct = [], 0
        for idx in batches(len(train), batch_size, rng):
            y = train.label_batch(idx)
            batch = train.graph_batch(idx, dtype)
            total, bundle, logits, trace = student_losses(
                model, distiller, batch, y, _slice_teacher(caches.get("train"), idx), distill,
                record=check_attention)
            if check_attention:
                check_attention_rows(trace, batch[2])
            if not torch.isfinite(total):
                raise TrainingDiverged(f"student loss became {float(total)} at epoch {epoch}")
            total.backward()
            opt.step()
            steps.write(step=opt.state.step, epoch=epoch, loss_total=bundle.total, loss_task=bundle.task,
                        loss_inf=bundle.inf, lr=lr, **{f"loss_feat_{i + 1}": f for i, f in enumerate(bundle.feat)})
            bundles.append((bundle, len(idx)))
            correct += int((logits.argmax(1) == y).sum())
        train_acc = correct / len(train)
        writer.write(epoch=epoch, split="train", accuracy=train_acc, lr=lr, seed=seed,
                     **_mean_bundle(bundles, n_feat))
        select_acc = train_acc
        for name, ds in (("val", val), ("test", test)):
            if ds is None or not eval_due(epoch, epochs, eval_every):
                continue
            means, acc, _ = evaluate_student(model, distiller, ds, distill, caches.get(name))
            writer.write(epoch=epoch, split=name, accuracy=acc, lr=lr, seed=seed, **means)
            if name == "val":
                select_acc = acc
        if select_acc >= best_acc:
            best_acc, best_epoch = select_acc, epoch
            if out_dir:
                save_weights(model, out_dir / "student_best")
    if out_dir:
        save_weights(model, out_dir / "student_final")
        if distiller is not None:
            save_weights(distiller, out_dir / "distiller_final")
    final_acc = float("nan")
    if test is not None:
        final_acc = next(r["accuracy"] for r in reversed(writer.rows) if r["split"] == "test")
    return StudentRun(model, distiller, writer.rows, steps.rows, best_epoch, final_acc)
