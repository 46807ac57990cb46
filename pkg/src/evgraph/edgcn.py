"""EDGCN: three cascaded dynamic aggregation layers (EDAL) and a pooled recognition head.

All layers work on padded batches: ``coords`` (B, N, Du), ``feats`` (B, N, Df)
and a boolean vertex ``mask`` (B, N) so graphs with different vertex counts can
share a batch.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .representations import VoxelGraph
from .substrate import Mlp, MlpSpec, knn, softmax

VARIANTS = ("A", "B", "C", "D", "E")
# which projection defines neighbourhoods under each ablation variant
NEIGHBOUR_SOURCE = {"A": "coord", "B": "feat", "C": "fuse", "D": "fuse", "E": "fuse"}


class ConfigurationError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class DegenerateGraphError(ValueError):
    pass


@dataclass(frozen=True)
class EdalConfig:
    d_in_u: int
    d_in_f: int
    d_out_f: int
    n_neighbors: int = 20

    def __post_init__(self):
        if min(self.d_in_u, self.d_in_f, self.d_out_f, self.n_neighbors) < 1:
            raise ConfigurationError("EDAL widths and neighbour count must be >= 1")


DEFAULT_LAYERS = (
    EdalConfig(3, 25, 64, 20),
    EdalConfig(25, 64, 64, 20),
    EdalConfig(64, 64, 128, 20),
)


def hidden_mlp(d_in: int, d_out: int, name: str, hidden: int | None = None) -> Mlp:
    h = max(d_in, d_out) if hidden is None else hidden
    return Mlp(MlpSpec((d_in, h, d_out)), name=name)


class EdalLayer(nn.Module):
    """One dynamic aggregation layer.

    Projects coordinates and semantics into a shared space, finds neighbours
    by KNN on the fused projection, aggregates fused neighbour features with
    softmax weights computed from coordinate-projection pairs, and updates the
    coordinate attribute from the mean pair relation. Both outputs carry an
    MLP shortcut from the layer input.
    """

    def __init__(self, cfg: EdalConfig, variant: str = "C", rel_mode: str = "concat"):
        super().__init__()
        if variant not in VARIANTS:
            raise ConfigurationError(f"unknown EDAL variant {variant!r}")
        if rel_mode not in ("concat", "diff"):
            raise ConfigurationError(f"unknown rel_mode {rel_mode!r}")
        self.cfg = cfg
        self.variant = variant
        self.rel_mode = rel_mode
        du, df, do = cfg.d_in_u, cfg.d_in_f, cfg.d_out_f
        rel_width = 2 * (do if variant == "E" else df)
        self.m_f = hidden_mlp(df, df, "m_f")
        self.m_u = hidden_mlp(du, df, "m_u")
        self.fuse = hidden_mlp(df, do, "fuse")
        self.m_u_a = hidden_mlp(rel_width, 1, "m_u_a", hidden=rel_width // 2)
        self.q_upd = hidden_mlp(rel_width, df, "q_upd")
        self.m_u_id = hidden_mlp(du, df, "m_u_id")
        self.m_f_id = hidden_mlp(df, do, "m_f_id")

    def relation(self, centre: torch.Tensor, nbr: torch.Tensor) -> torch.Tensor:
        """Stack of per-neighbour pairs (centre_i, neighbour_j), or (centre_i, neighbour_j - centre_i)."""
        centre = centre[:, :, None, :].expand_as(nbr)
        other = nbr - centre if self.rel_mode == "diff" else nbr
        return torch.cat([centre, other], dim=-1)

    def forward(self, coords, feats, mask, variant: str | None = None, record: bool = False,
                check_finite: bool = True):
        variant = self.variant if variant is None else variant
        if variant not in VARIANTS:
            raise ConfigurationError(f"unknown EDAL variant {variant!r}")
        if (variant == "E") != (self.variant == "E"):
            raise ConfigurationError("variant E needs a layer built for it (relation width differs)")
        if int(mask.sum(1).min()) < 2:
            raise DegenerateGraphError("EDAL needs at least 2 vertices per graph")

        stages: dict[str, torch.Tensor | None] = {}
        keep = mask[..., None].to(feats.dtype)
        p_f = stages["P_F"] = self.m_f(feats)
        p_u = stages["P_U"] = self.m_u(coords)
        p_fuse = stages["P_fuse"] = self.fuse(p_f + p_u)

        source = {"coord": p_u, "feat": p_f, "fuse": p_fuse}[NEIGHBOUR_SOURCE[variant]]
        idx, valid = knn(source.detach(), self.cfg.n_neighbors, exclude_self=True, mask=mask)
        b, n, k = idx.shape
        pair = p_fuse if variant == "E" else p_u
        w = pair.shape[-1]

        # First attention layer applied to concat(centre, neighbour) = W_c centre + W_n neighbour,
        # evaluated per vertex before gathering.
        first, act, last = self.m_u_a.layers
        w_c, w_n = first.weight[:, :w], first.weight[:, w:]
        if self.rel_mode == "diff":
            w_c = w_c - w_n
        centre_part = pair @ w_c.T + first.bias
        nbr_part = pair @ w_n.T
        hidden = act(centre_part[:, :, None, :] + gather_rows(nbr_part, idx))
        logits = last(hidden).squeeze(-1)
        score = stages["Score"] = softmax(logits, dim=-1, mask=valid)

        # Neighbour sums run over the k slots in neighbour order, so each vertex's
        # result is independent of where it sits in the vertex array.
        f_aggr = stages["F_Aggr"] = weighted_sum(score, gather_rows(p_fuse, idx))

        if variant == "D":
            u_upd = stages["U_upd"] = None
            u_out = self.m_u_id(coords)
        else:
            vf = valid.to(score.dtype)
            mean_w = vf / vf.sum(2, keepdim=True).clamp_min(1.0)
            nbr_mean = weighted_sum(mean_w, gather_rows(pair, idx))
            if self.rel_mode == "diff":
                nbr_mean = nbr_mean - pair * keep
            rel_mean = torch.cat([pair * keep, nbr_mean], dim=-1)
            u_upd = stages["U_upd"] = self.q_upd(rel_mean)
            u_out = u_upd + self.m_u_id(coords)
        f_out = stages["F_out"] = (f_aggr + self.m_f_id(feats)) * keep
        u_out = stages["U_out"] = u_out * keep

        if check_finite and not (torch.isfinite(u_out).all() and torch.isfinite(f_out).all()):
            bad = next(name for name, t in stages.items() if t is not None and not torch.isfinite(t).all())
            raise NumericError(f"non-finite values at EDAL stage {bad!r}")

        inter = None
        if record:
            inter = dict(stages, neighbors=idx, valid=valid, Rel=self.relation(pair, gather_rows(pair, idx)))
        return u_out, f_out, inter


def gather_rows(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """(B, N, D) rows picked by (B, N, k) indices -> (B, N, k, D)."""
    b, n, k = idx.shape
    flat = (idx + torch.arange(b)[:, None, None] * n).reshape(-1)
    return x.reshape(b * n, -1).index_select(0, flat).reshape(b, n, k, x.shape[-1])


def weighted_sum(w: torch.Tensor, rows: torch.Tensor) -> torch.Tensor:
    """(B, N, k) weights times (B, N, k, D) rows, summed over k -> (B, N, D)."""
    b, n, k, d = rows.shape
    return torch.bmm(w.reshape(b * n, 1, k), rows.reshape(b * n, k, d)).reshape(b, n, d)


def edal_forward(layer: EdalLayer, coords, feats, variant: str | None = None):
    """Single-graph convenience wrapper: (N, Du), (N, Df) -> (U_out, F_out, intermediates)."""
    coords = torch.as_tensor(coords)
    feats = torch.as_tensor(feats)
    if coords.shape[0] < 2:
        raise DegenerateGraphError("EDAL needs at least 2 vertices")
    mask = torch.ones(1, coords.shape[0], dtype=torch.bool)
    u, f, inter = layer(coords[None], feats[None], mask, variant=variant, record=True)
    inter = {k: (v[0] if isinstance(v, torch.Tensor) else v) for k, v in inter.items()}
    return u[0], f[0], inter


@dataclass(frozen=True)
class EdgcnConfig:
    d_inp: int = 25
    num_classes: int = 4
    layers: tuple[EdalConfig, ...] = DEFAULT_LAYERS
    head_hidden: int = 1024
    head_width: int = 128
    variant: str = "C"
    rel_mode: str = "concat"

    @classmethod
    def from_dict(cls, d: dict) -> "EdgcnConfig":
        d = dict(d)
        if "layers" in d:
            d["layers"] = tuple(EdalConfig(**l) if isinstance(l, dict) else EdalConfig(*l) for l in d["layers"])
        if "n_neighbors" in d:
            k = d.pop("n_neighbors")
            d["layers"] = tuple(replace(l, n_neighbors=k) for l in d.get("layers", DEFAULT_LAYERS))
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [asdict(l) for l in self.layers]
        return d

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")
        if self.layers[0].d_in_u != 3:
            raise ConfigurationError("first EDAL must take 3-wide coordinates")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.d_out_f != b.d_in_f:
                raise ConfigurationError(f"layer {i} semantic output {a.d_out_f} != layer {i + 1} input {b.d_in_f}")
            if a.d_in_f != b.d_in_u:
                raise ConfigurationError(f"layer {i} coordinate output {a.d_in_f} != layer {i + 1} input {b.d_in_u}")


class EdgcnModel(nn.Module):
    def __init__(self, cfg: EdgcnConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        first = cfg.layers[0].d_in_f
        self.input_embed = None if cfg.d_inp == first else hidden_mlp(cfg.d_inp, first, "input_embed", hidden=first)
        self.layers = nn.ModuleList(EdalLayer(l, cfg.variant, cfg.rel_mode) for l in cfg.layers)
        last = cfg.layers[-1].d_out_f
        self.head = Mlp(MlpSpec((last, cfg.head_hidden, cfg.head_width), final_activation="relu"), name="head")
        self.classifier = nn.Linear(cfg.head_width, cfg.num_classes)

    @property
    def tap_widths(self) -> list[int]:
        return [l.d_out_f for l in self.cfg.layers]

    def forward(self, coords, feats, mask, variant: str | None = None, record: bool = False):
        """Returns (logits, taps, embedding, trace).

        ``taps`` holds each layer's vertex-max-pooled semantic output,
        ``embedding`` the head output fed to the classifier and ``trace`` the
        per-layer intermediates when ``record`` is set.
        """
        u, f = coords, feats
        if self.input_embed is not None:
            f = self.input_embed(f) * mask[..., None].to(f.dtype)
        taps, trace = [], []
        for layer in self.layers:
            u, f, inter = layer(u, f, mask, variant=variant, record=record)
            taps.append(masked_max(f, mask))
            trace.append(inter)
        emb = self.head(taps[-1])
        return self.classifier(emb), taps, emb, (trace if record else None)


def masked_max(f: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return f.masked_fill(~mask[..., None], float("-inf")).amax(1)


def collate(graphs: Sequence[VoxelGraph], dtype=torch.float32):
    """Pad graphs into (coords, feats, mask) batch tensors."""
    n = max(len(g) for g in graphs)
    b = len(graphs)
    coords = np.zeros((b, n, graphs[0].coords.shape[1]))
    feats = np.zeros((b, n, graphs[0].feats.shape[1]))
    mask = np.zeros((b, n), dtype=bool)
    for i, g in enumerate(graphs):
        coords[i, :len(g)] = g.coords
        feats[i, :len(g)] = g.feats
        mask[i, :len(g)] = True
    return (torch.as_tensor(coords, dtype=dtype), torch.as_tensor(feats, dtype=dtype),
            torch.as_tensor(mask))


def edgcn_forward(model: EdgcnModel, graph: VoxelGraph, record: bool = False):
    """Classify one graph; returns (logits, taps, embedding, trace) without the batch axis."""
    dtype = next(model.parameters()).dtype
    coords, feats, mask = collate([graph], dtype)
    want = model.input_embed.spec.widths[0] if model.input_embed is not None else model.cfg.layers[0].d_in_f
    if feats.shape[-1] != want:
        raise ConfigurationError(f"graph semantic width {feats.shape[-1]} != model input width {want}")
    logits, taps, emb, trace = model(coords, feats, mask, record=record)
    return logits[0], [t[0] for t in taps], emb[0], trace


def ablation_variant_forward(model: EdgcnModel, graph: VoxelGraph, variant: str):
    if variant not in VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}")
    dtype = next(model.parameters()).dtype
    coords, feats, mask = collate([graph], dtype)
    return model(coords, feats, mask, variant=variant)[0][0]


def count_params(model: nn.Module, trainable_only: bool = False) -> dict[str, int]:
    """Element counts per top-level child plus ``total``."""
    groups: dict[str, int] = {}
    for name, p in model.named_parameters():
        if trainable_only and not p.requires_grad:
            continue
        top = name.split(".")[0]
        if top == "layers":
            top = ".".join(name.split(".")[:2])
        groups[top] = groups.get(top, 0) + p.numel()
    groups["total"] = sum(groups.values())
    return groups


def backbone_param_count(model: EdgcnModel) -> int:
    return sum(p.numel() for n, p in model.named_parameters() if not n.startswith("classifier."))


def write_model_card(model: EdgcnModel, path, **extra) -> None:
    card = {"config": model.cfg.to_dict(), "params": count_params(model), **extra}
    Path(path).write_text(json.dumps(card, indent=1, sort_keys=True))
