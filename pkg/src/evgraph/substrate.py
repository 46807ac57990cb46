"""Building blocks shared by the student and teacher networks.

MLP blocks, numerically stable softmax, exact brute-force KNN, finite-difference
gradient checking, the two optimizers with their learning-rate schedules,
seeded initialisation and a flat float32 weight format.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn


class ShapeError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class DeterminismError(RuntimeError):
    pass


class EmptyGradientError(RuntimeError):
    pass


# ---------------------------------------------------------------- MLP


ACTIVATIONS = {"relu": nn.ReLU, "tanh": nn.Tanh, "identity": nn.Identity}


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    activation: str = "relu"
    final_activation: str | None = None

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least an input and an output width")
        if min(self.widths) < 1:
            raise ValueError("MLP widths must be >= 1")


class Mlp(nn.Module):
    """Linear layers with an activation between them; no activation after the last
    layer unless ``final_activation`` is set (``softmax`` acts on the last axis)."""

    def __init__(self, spec: MlpSpec | Sequence[int], name: str = "mlp"):
        super().__init__()
        if not isinstance(spec, MlpSpec):
            spec = MlpSpec(tuple(spec))
        self.spec = spec
        self.name = name
        layers: list[nn.Module] = []
        pairs = list(zip(spec.widths[:-1], spec.widths[1:]))
        for i, (a, b) in enumerate(pairs):
            layers.append(nn.Linear(a, b))
            if i < len(pairs) - 1:
                layers.append(ACTIVATIONS[spec.activation]())
        self.layers = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.spec.widths[0]:
            raise ShapeError(f"{self.name}: expected last dimension {self.spec.widths[0]}, got {x.shape[-1]}")
        y = self.layers(x)
        fa = self.spec.final_activation
        if fa == "softmax":
            y = softmax(y, dim=-1)
        elif fa is not None:
            y = ACTIVATIONS[fa]()(y)
        return y


def softmax(x: torch.Tensor, dim: int = -1, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Max-subtracted softmax. Entries where ``mask`` is False get probability 0."""
    if mask is not None:
        x = x.masked_fill(~mask, -math.inf)
    m = x.amax(dim=dim, keepdim=True).detach()
    m = torch.where(torch.isfinite(m), m, torch.zeros_like(m))
    e = torch.exp(x - m)
    s = e.sum(dim=dim, keepdim=True)
    # rows with every entry masked come out as all zeros
    return e / torch.where(s > 0, s, torch.ones_like(s))


# ---------------------------------------------------------------- KNN


def pairwise_dists(points: torch.Tensor) -> torch.Tensor:
    """Euclidean distances of (..., N, D) points, from explicit coordinate differences.

    The matmul expansion is avoided so that coincident points always get
    bit-equal distances and ordering is not perturbed by cancellation.
    """
    return torch.cdist(points, points, compute_mode="donot_use_mm_for_euclid_dist")


@torch.no_grad()
def knn(points, k: int, exclude_self: bool = True, mask: torch.Tensor | None = None):
    """Indices of the ``k`` nearest points of every point, nearest first.

    Ties resolve to the lower index. ``points`` may be an (N, D) array or a
    padded (B, N, D) tensor with a (B, N) validity ``mask``; in the batched
    case this returns ``(idx, valid)`` where ``valid`` flags real neighbours
    (rows of short graphs are padded with invalid slots pointing at index 0).
    Unbatched input returns an (N, min(k, candidates)) index array of the
    same kind as the input.
    """
    as_numpy = isinstance(points, np.ndarray)
    pts = torch.as_tensor(points)
    if pts.dim() == 2:
        n = pts.shape[0]
        if exclude_self and n < 2:
            raise DegenerateInputError("knn with exclude_self needs at least 2 points")
        if k < 1:
            raise ValueError("k must be >= 1")
        idx, _ = knn(pts[None], k, exclude_self)
        idx = idx[0]
        return idx.numpy() if as_numpy else idx

    b, n, _ = pts.shape
    if mask is None:
        mask = torch.ones(b, n, dtype=torch.bool)
    d = pairwise_dists(pts)
    d = d.masked_fill(~mask[:, None, :], math.inf)
    if exclude_self:
        d.diagonal(dim1=1, dim2=2).fill_(math.inf)
    avail = n - 1 if exclude_self else n
    kk = min(k, avail)
    order = torch.sort(d, dim=-1, stable=True).indices[..., :kk]
    n_valid = mask.sum(1) - (1 if exclude_self else 0)
    valid = torch.arange(kk)[None, None, :] < n_valid[:, None, None]
    valid = valid & mask[:, :, None]
    idx = torch.where(valid, order, torch.zeros_like(order))
    return idx, valid


# ---------------------------------------------------------------- gradient check


def grad_check(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
               eps: float = 1e-6, n_coords: int = 64, seed: int = 0,
               grads: Sequence[torch.Tensor] | None = None, floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    Up to ``n_coords`` coordinates per tensor are probed. ``grads`` overrides the
    analytic gradients (autograd of ``loss_fn`` otherwise). Relative error uses
    the denominator max(|a|, |b|, floor), so gradients that vanish exactly
    (e.g. a bias ahead of a softmax) are judged against the floor instead of
    against central-difference rounding noise.
    """
    params = list(params)
    with torch.no_grad():
        a, b = loss_fn().item(), loss_fn().item()
    if a != b:
        raise DeterminismError(f"loss closure is not deterministic ({a!r} != {b!r})")
    if grads is None:
        loss = loss_fn()
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        gflat = g.reshape(-1)
        n = flat.numel()
        picks = np.arange(n) if n <= n_coords else rng.choice(n, n_coords, replace=False)
        for i in picks:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
            numeric = (up - down) / (2 * eps)
            analytic = gflat[i].item()
            err = abs(numeric - analytic) / max(abs(numeric), abs(analytic), floor)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- optimizers


def cosine_lr(epoch: float, epochs: int, lr_max: float = 1e-1, lr_min: float = 1e-4) -> float:
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch / epochs))


def halving_lr(epoch: int, lr0: float = 1e-4, every: int = 20) -> float:
    return lr0 * 0.5 ** (epoch // every)


@dataclass
class OptimizerState:
    """``sgd_cosine``: lr anneals lr_max -> lr_min over ``epochs``.
    ``adam``: lr starts at lr_max and halves every ``halve_every`` epochs."""

    kind: str = "sgd_cosine"
    lr_max: float = 1e-1
    lr_min: float = 1e-4
    epochs: int = 30
    halve_every: int = 20
    momentum: float = 0.9
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float | None = None
    epoch: int = 0
    step: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd_cosine", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr_max > 0:
            raise ValueError("learning rate must be positive")
        if not all(0.0 < b < 1.0 for b in self.betas):
            raise ValueError("adam betas must lie in (0, 1)")

    def lr(self, epoch: int | None = None) -> float:
        e = self.epoch if epoch is None else epoch
        if self.kind == "sgd_cosine":
            return cosine_lr(e, self.epochs, self.lr_max, self.lr_min)
        return halving_lr(e, self.lr_max, self.halve_every)


class Optimizer:
    """Schedule-aware wrapper over ``torch.optim``. ``step`` zeroes gradients afterwards."""

    def __init__(self, params: Iterable[nn.Parameter], state: OptimizerState):
        self.params = [p for p in params if p.requires_grad]
        self.state = state
        if state.kind == "sgd_cosine":
            self.inner = torch.optim.SGD(self.params, lr=state.lr(), momentum=state.momentum,
                                         weight_decay=state.weight_decay)
        else:
            self.inner = torch.optim.Adam(self.params, lr=state.lr(), betas=state.betas,
                                          eps=state.eps, weight_decay=state.weight_decay)

    @property
    def lr(self) -> float:
        return self.inner.param_groups[0]["lr"]

    def set_epoch(self, epoch: int) -> None:
        self.state.epoch = epoch
        for group in self.inner.param_groups:
            group["lr"] = self.state.lr()

    def step(self) -> None:
        if all(p.grad is None for p in self.params):
            raise EmptyGradientError("optimizer step before any backward pass")
        if self.state.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(self.params, self.state.grad_clip)
        self.inner.step()
        self.inner.zero_grad(set_to_none=False)
        self.state.step += 1


def sgd_cosine_step(opt: Optimizer) -> None:
    if opt.state.kind != "sgd_cosine":
        raise ValueError("optimizer is not sgd_cosine")
    opt.step()


def adam_step(opt: Optimizer) -> None:
    if opt.state.kind != "adam":
        raise ValueError("optimizer is not adam")
    opt.step()


# ---------------------------------------------------------------- init and serialization


INIT_SCHEMES = ("fan_in", "he", "zeros")


def init_params(module: nn.Module, seed: int, scheme: str = "fan_in") -> nn.Module:
    """Re-initialise every Linear/Conv weight in place; biases are set to zero.

    ``he`` samples U(-sqrt(6/fan_in), sqrt(6/fan_in)), which keeps activation
    variance steady through ReLU stacks; ``fan_in`` samples
    U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}")
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if scheme == "zeros" or p.dim() == 1:
                p.zero_()
                continue
            fan_in = p[0].numel()
            bound = math.sqrt(6.0 / fan_in) if scheme == "he" else 1.0 / math.sqrt(fan_in)
            p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64).mul(2 * bound).sub(bound))
    return module


def save_weights(module: nn.Module, path) -> dict:
    """Write ``<path>.bin`` (little-endian float32) and ``<path>.json`` (name -> offset, shape)."""
    path = Path(path)
    index, chunks, offset = {}, [], 0
    for name, t in module.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4").ravel()
        index[name] = {"offset": offset, "shape": list(t.shape)}
        chunks.append(arr.tobytes())
        offset += arr.size
    path.with_suffix(".bin").write_bytes(b"".join(chunks))
    path.with_suffix(".json").write_text(json.dumps({"dtype": "<f4", "params": index}, indent=1))
    return index


def load_weights(module: nn.Module, path, strict: bool = True) -> nn.Module:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f4")
    own = module.state_dict()
    state = {}
    for name, info in meta["params"].items():
        n = int(np.prod(info["shape"])) if info["shape"] else 1
        arr = blob[info["offset"]:info["offset"] + n].reshape(info["shape"])
        ref = own.get(name)
        dtype = ref.dtype if ref is not None else torch.float32
        state[name] = torch.from_numpy(arr.copy()).to(dtype)
    module.load_state_dict(state, strict=strict)
    return module


def index_param_count(path) -> int:
    """Total element count recorded in a weight index."""
    meta = json.loads(Path(path).with_suffix(".json").read_text())
    return sum(int(np.prod(v["shape"])) if v["shape"] else 1 for v in meta["params"].values())
