"""Task, inference-level and feature-level losses and their combination for student training."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

from .edgcn import NumericError
from .substrate import DegenerateInputError, ShapeError

DISTILL_VARIANTS = ("A", "B", "C", "D")


@dataclass(frozen=True)
class DistillConfig:
    """Distillation settings.

    ``variant`` picks the feature-level wiring (None: inference-level only).
    ``lam`` weighs task against inference-level loss. ``n_taps`` feature
    pairs are used, matched shallow-to-deep.
    """

    variant: str | None = "C"
    lam: float = 0.5
    t_kd: float = 4.0
    tau_ntx: float = 0.5
    n_taps: int = 3
    adapt_hidden: int | None = None

    def __post_init__(self):
        if self.variant is not None and self.variant not in DISTILL_VARIANTS:
            raise ValueError(f"unknown distillation variant {self.variant!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if not (self.t_kd > 0 and self.tau_ntx > 0):
            raise ValueError("temperatures must be positive")
        if self.n_taps < 0:
            raise ValueError("n_taps must be >= 0")

    @property
    def feature_taps(self) -> int:
        return 0 if self.variant is None else self.n_taps

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBundle:
    """Scalar loss parts of one step; ``total`` is recomputed in float64 from the parts."""

    task: float
    inf: float
    feat: list[float] = field(default_factory=list)
    total: float = 0.0


def cross_entropy(logits: torch.Tensor, label) -> torch.Tensor:
    """-log softmax(logits)[label]; batched logits (B, C) give the batch mean."""
    labels = torch.as_tensor(label)
    n = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= n:
        raise ValueError(f"label outside [0, {n})")
    if logits.dim() == 1:
        return -torch.log_softmax(logits, dim=-1)[labels]
    return F.cross_entropy(logits, labels)


def kd_loss(student: torch.Tensor, teacher: torch.Tensor, T: float = 4.0) -> torch.Tensor:
    """T^2 * KL(softmax(teacher / T) || softmax(student / T)), batch mean; teacher is a constant."""
    if student.shape != teacher.shape:
        raise ShapeError(f"student logits {tuple(student.shape)} vs teacher {tuple(teacher.shape)}")
    if not T > 0:
        raise ValueError("temperature must be positive")
    log_q = torch.log_softmax(student / T, dim=-1)
    log_p = torch.log_softmax(teacher.detach() / T, dim=-1)
    # roundoff can leave a near-identical pair a hair below zero
    kl = (log_p.exp() * (log_p - log_q)).sum(-1).clamp_min(0.0)
    return T * T * (kl.mean() if kl.dim() else kl)


def l1_inference_loss(student: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    if student.shape != teacher.shape:
        raise ShapeError(f"student output {tuple(student.shape)} vs teacher {tuple(teacher.shape)}")
    return (student - teacher.detach()).abs().mean()


def nt_xent(student: torch.Tensor, teacher: torch.Tensor, tau: float = 0.5,
            teacher_grad: bool = False) -> torch.Tensor:
    """NT-Xent over the 2B embeddings; each row's positive is its cross-network counterpart.

    All other in-batch embeddings, from either network, act as negatives.
    """
    if student.shape != teacher.shape:
        raise ShapeError(f"student embeddings {tuple(student.shape)} vs teacher {tuple(teacher.shape)}")
    b = student.shape[0]
    if b < 2:
        raise DegenerateInputError("NT-Xent needs a batch of at least 2")
    if not teacher_grad:
        teacher = teacher.detach()
    z = torch.cat([student, teacher], dim=0)
    norms = z.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise NumericError("zero-norm embedding in NT-Xent")
    z = z / norms
    sim = (z @ z.T) / tau
    sim = sim.masked_fill(torch.eye(2 * b, dtype=torch.bool), float("-inf"))
    target = torch.cat([torch.arange(b, 2 * b), torch.arange(0, b)])
    return F.cross_entropy(sim, target)


@dataclass(frozen=True)
class Wiring:
    """How one distillation variant couples the two networks."""

    feature_loss: str | None      # "ntxent" | "l1" | None
    student_tap_task: bool        # task loss on student tap heads (added to feature terms)
    teacher_tap_task: bool        # teacher trained with every auxiliary head


def apply_variant(variant: str | None) -> Wiring:
    if variant is None:
        return Wiring(None, False, False)
    table = {
        "A": Wiring("ntxent", False, False),
        "B": Wiring("ntxent", True, True),
        "C": Wiring("ntxent", False, True),
        "D": Wiring("l1", False, False),
    }
    if variant not in table:
        raise ValueError(f"unknown distillation variant {variant!r}")
    return table[variant]


def crd_total_loss(task, inf, feats, cfg: DistillConfig):
    """lam * task + (1 - lam) * inf + sum(feats).

    Accepts tensors or floats; returns (total, bundle) where ``total`` keeps
    the autograd graph and the bundle holds float64 scalars.
    """
    parts = {"task": task, "inf": inf, **{f"feat_{i + 1}": f for i, f in enumerate(feats)}}
    values = {}
    for name, v in parts.items():
        x = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(x):
            raise NumericError(f"non-finite loss component {name!r}")
        values[name] = x
    lam = cfg.lam
    total = lam * task + (1.0 - lam) * inf
    for f in feats:
        total = total + f
    feat_vals = [values[f"feat_{i + 1}"] for i in range(len(feats))]
    bundle = LossBundle(values["task"], values["inf"], feat_vals,
                        compose_total(values["task"], values["inf"], feat_vals, lam))
    return total, bundle


def compose_total(task: float, inf: float, feats, lam: float) -> float:
    total = lam * task + (1.0 - lam) * inf
    for f in feats:
        total += f
    return total
