"""Run configuration, synthetic dataset generation and experiment orchestration.

A run is described by one nested config (YAML on disk, dotted-key overrides
on the command line). Every command writes the fully resolved config next to
its outputs, and output directories are named by a hash of that config, so
rerunning a config reproduces the same directory and the same files.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from .data import EventDataset, GridSpec, batches
from .distill import evaluate_student, train_student
from .edgcn import VARIANTS, ConfigurationError, EdgcnConfig, EdgcnModel, backbone_param_count, collate, count_params
from .events_io import (DatasetManifest, PatternSpec, generate_pattern, jittered, read_events, read_manifest,
                        write_events, write_manifest)
from .losses import DistillConfig, apply_variant
from .representations import VoxelConfig, build_voxel_grid, voxelize
from .substrate import OptimizerState, load_weights
from .teacher import Teacher, TeacherConfig, teacher_predict, train_teacher

SPLITS = ("train", "val", "test", "pool")

DEFAULTS: dict = {
    "dataset": {
        "root": None,
        "manifests": None,
        "width": 32,
        "height": 32,
        "duration": 100.0,
        "event_rate": 20.0,
        "noise_rate": 0.5,
        "noise_jitter": 0.0,
        "velocity_jitter": 0.2,
        "position_jitter": 3.0,
        "per_class": {"train": 40, "val": 0, "test": 20, "pool": 0},
        "seed": 0,
        "classes": [
            {"name": "right", "kind": "moving_bar", "velocity": [0.2, 0.0]},
            {"name": "left", "kind": "moving_bar", "velocity": [-0.2, 0.0]},
            {"name": "down", "kind": "moving_bar", "velocity": [0.0, 0.2]},
            {"name": "up", "kind": "moving_bar", "velocity": [0.0, -0.2]},
        ],
    },
    "representation": {
        "v_x": 5, "v_y": 5, "v_t": 10.0, "n_vertices": 64, "normalize": True, "omega": "signed_sum",
        "feature_scale": "none",
        "bins": 5, "grid_mode": "nearest", "time_span": 1.0,
    },
    "model": {"variant": "C", "rel_mode": "concat", "n_neighbors": 16, "head_hidden": 1024, "head_width": 128},
    "teacher": {
        "widths": [16, 32, 64], "blocks": 1, "n_taps": 3, "train_on": "train", "all_heads": "auto",
        "epochs": 30, "optimizer": {"kind": "adam", "lr_max": 1e-3, "halve_every": 20},
    },
    "distill": None,
    "teacher_weights": None,
    "optimizer": {"kind": "sgd_cosine", "lr_max": 0.1, "lr_min": 1e-4, "momentum": 0.9, "grad_clip": 1.0},
    "epochs": 30,
    "batch_size": 32,
    "eval_every": 1,
    "seed": 0,
    "precision": "float32",
    "output": "runs",
}


class ConfigError(ConfigurationError):
    pass


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` strings; values are parsed as YAML scalars or lists."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for p in parts[:-1]:
            if node.get(p) is None:
                node[p] = {}
            node = node[p]
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-section")
        node[parts[-1]] = yaml.safe_load(raw)
    return cfg


@dataclass
class RunConfig:
    """Resolved configuration of one run; ``raw`` is the nested dict it came from."""

    raw: dict
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def load(cls, path=None, overrides=None) -> "RunConfig":
        user = {}
        base = Path.cwd()
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"config file {path} does not exist")
            user = yaml.safe_load(path.read_text()) or {}
            if not isinstance(user, dict):
                raise ConfigError(f"{path} does not hold a mapping")
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        raw = apply_overrides(deep_merge(DEFAULTS, user), overrides)
        cfg = cls(raw, base)
        cfg.validate()
        return cfg

    @classmethod
    def from_dict(cls, d: dict, overrides=None) -> "RunConfig":
        cfg = cls(apply_overrides(deep_merge(DEFAULTS, d), overrides))
        cfg.validate()
        return cfg

    def with_overrides(self, overrides) -> "RunConfig":
        cfg = RunConfig(apply_overrides(self.raw, overrides), self.base_dir)
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.raw[key]

    # typed views ----------------------------------------------------------

    @property
    def class_names(self) -> list[str]:
        ds = self.raw["dataset"]
        if ds.get("manifests"):
            return read_manifest(self.path(ds["manifests"]["train"])).class_names
        return [c["name"] for c in ds["classes"]]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.raw["precision"]]

    def voxel_config(self) -> VoxelConfig:
        r = self.raw["representation"]
        return VoxelConfig(r["v_x"], r["v_y"], float(r["v_t"]), r["n_vertices"], r["normalize"], r["omega"],
                           r["feature_scale"])

    def grid_spec(self) -> GridSpec:
        r, d = self.raw["representation"], self.raw["dataset"]
        return GridSpec(r["bins"], d["height"], d["width"], r["grid_mode"])

    def model_config(self) -> EdgcnConfig:
        d = dict(self.raw["model"])
        d["d_inp"] = self.voxel_config().d_inp
        d["num_classes"] = self.num_classes
        return EdgcnConfig.from_dict(d)

    def teacher_config(self) -> TeacherConfig:
        t = self.raw["teacher"]
        g = self.grid_spec()
        return TeacherConfig(tuple(t["widths"]), t["blocks"], t["n_taps"], self.num_classes, g.bins, g.height, g.width)

    def distill_config(self) -> DistillConfig | None:
        d = self.raw["distill"]
        if d is None or d is False:
            return None
        d = dict(d)
        d.pop("enabled", None)
        return DistillConfig.from_dict(d)

    def teacher_all_heads(self) -> bool:
        flag = self.raw["teacher"]["all_heads"]
        if flag != "auto":
            return bool(flag)
        dc = self.distill_config()
        return True if dc is None or dc.variant is None else apply_variant(dc.variant).teacher_tap_task

    def optimizer_state(self) -> OptimizerState:
        o = dict(self.raw["optimizer"])
        o.setdefault("epochs", self.raw["epochs"])
        if "betas" in o:
            o["betas"] = tuple(o["betas"])
        return OptimizerState(**o)

    def teacher_optimizer_state(self) -> OptimizerState:
        o = dict(self.raw["teacher"]["optimizer"])
        o.setdefault("epochs", self.raw["teacher"]["epochs"])
        return OptimizerState(**o)

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def output_root(self) -> Path:
        env = os.environ.get("EVG_RUN_ROOT")
        return Path(env) if env else self.path(self.raw["output"])

    def validate(self) -> None:
        r = self.raw
        if r["batch_size"] < 1 or r["epochs"] < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if r["precision"] not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {r['precision']!r}")
        ds = r["dataset"]
        if ds.get("manifests"):
            for split, p in ds["manifests"].items():
                if not self.path(p).exists():
                    raise ConfigError(f"manifest for split {split!r} not found: {p}")
        elif not ds["classes"]:
            raise ConfigError("dataset needs at least one class")
        try:
            self.voxel_config(), self.teacher_config(), self.optimizer_state()
            self.model_config().validate()
            dc = self.distill_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if dc is not None and dc.feature_taps and apply_variant(dc.variant).feature_loss == "ntxent" \
                and r["batch_size"] < 2:
            raise ConfigError("NT-Xent needs batch_size >= 2")
        if r["teacher_weights"] is not None and self._weights_missing(r["teacher_weights"]):
            raise ConfigError(f"teacher weights {r['teacher_weights']} not found")
        if r["teacher"]["train_on"] not in ("train", "pool"):
            raise ConfigError("teacher.train_on must be 'train' or 'pool'")

    def _weights_missing(self, p) -> bool:
        p = self.path(p)
        return not (p.with_suffix(".bin").exists() and p.with_suffix(".json").exists())

    def snapshot(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)

    def digest(self, *extra) -> str:
        payload = {k: v for k, v in self.raw.items() if k != "output"}
        blob = json.dumps([payload, list(extra)], sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


# ---------------------------------------------------------------- data


def _split_seed(base: int, split: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([base, SPLITS.index(split)])


def sample_specs(cfg: RunConfig, split: str) -> list[tuple[PatternSpec, int]]:
    """Pattern specs and labels for every sample of ``split``, in class order."""
    ds = cfg.raw["dataset"]
    n = int(ds["per_class"].get(split, 0))
    rng = np.random.default_rng(_split_seed(ds["seed"], split))
    out = []
    for label, cls in enumerate(ds["classes"]):
        for _ in range(n):
            noise = ds["noise_rate"] * rng.uniform(1.0 - ds["noise_jitter"], 1.0 + ds["noise_jitter"])
            base = PatternSpec(
                kind=cls.get("kind", "moving_bar"),
                velocity=tuple(float(v) for v in cls["velocity"]),
                duration=float(cls.get("duration", ds["duration"])),
                event_rate=float(cls.get("event_rate", ds["event_rate"])),
                noise_rate=float(noise),
                seed=int(rng.integers(2**31)),
                **{k: tuple(cls[k]) if k in ("stagnation", "resume_velocity") else cls[k]
                   for k in ("length", "thickness", "radius", "stagnation", "resume_velocity") if k in cls},
            )
            out.append((jittered(base, rng, ds["width"], ds["height"], ds["velocity_jitter"],
                                 ds["position_jitter"]), label))
    return out


def dataset_dir(cfg: RunConfig) -> Path:
    ds = cfg.raw["dataset"]
    if ds["root"]:
        return cfg.path(ds["root"])
    key = hashlib.sha256(json.dumps({k: v for k, v in ds.items() if k != "root"}, sort_keys=True).encode())
    return cfg.output_root() / f"data-{key.hexdigest()[:12]}"


def cmd_gen_data(cfg: RunConfig, out_dir=None) -> Path:
    """Write every synthetic split as event files plus one JSON-lines manifest per split."""
    ds = cfg.raw["dataset"]
    if ds.get("manifests"):
        raise ConfigError("dataset is given by manifests; nothing to generate")
    root = Path(out_dir) if out_dir is not None else dataset_dir(cfg)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    names = [c["name"] for c in ds["classes"]]
    for split in SPLITS:
        specs = sample_specs(cfg, split)
        if not specs:
            continue
        entries = []
        for i, (spec, label) in enumerate(specs):
            rel = Path(split) / f"{names[label]}_{i:05d}.evg"
            (root / rel).parent.mkdir(parents=True, exist_ok=True)
            write_events(generate_pattern(spec, ds["width"], ds["height"]), root / rel)
            entries.append((str(rel), label))
        write_manifest(DatasetManifest(entries, names, split), root / f"{split}.jsonl")
    (root / "dataset.yaml").write_text(yaml.safe_dump(ds, sort_keys=True))
    return root


def ensure_dataset(cfg: RunConfig) -> dict[str, Path]:
    """Manifest paths per split, generating the synthetic dataset when absent or stale."""
    ds = cfg.raw["dataset"]
    if ds.get("manifests"):
        return {k: cfg.path(v) for k, v in ds["manifests"].items()}
    root = dataset_dir(cfg)
    stamp = root / "dataset.yaml"
    if not (stamp.exists() and yaml.safe_load(stamp.read_text()) == ds):
        cmd_gen_data(cfg, root)
    return {s: root / f"{s}.jsonl" for s in SPLITS if (root / f"{s}.jsonl").exists()}


def load_splits(cfg: RunConfig, time_span: float | None = None) -> dict[str, EventDataset]:
    span = cfg.raw["representation"]["time_span"] if time_span is None else time_span
    out = {}
    for split, path in ensure_dataset(cfg).items():
        out[split] = EventDataset.from_manifest(read_manifest(path), cfg.voxel_config(), cfg.grid_spec(), span)
    return out


def _concat(a: EventDataset, b: EventDataset) -> EventDataset:
    out = copy.copy(a)
    out.graphs = a.graphs + b.graphs
    out.grids = np.concatenate([a.grids, b.grids])
    out.labels = np.concatenate([a.labels, b.labels])
    return out


# ---------------------------------------------------------------- training commands


def _run_dir(cfg: RunConfig, command: str, *extra) -> Path:
    d = cfg.output_root() / f"{command}-{cfg.digest(command, *extra)}"
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.yaml").write_text(cfg.snapshot())
    return d


def seed_list(cfg: RunConfig, seeds: int | None) -> list[int]:
    return [cfg.raw["seed"] + i for i in range(seeds or 1)]


def write_aggregate(path: Path, results: list[tuple[int, float]]) -> dict:
    accs = [a for _, a in results]
    mean = statistics.fmean(accs)
    std = statistics.stdev(accs) if len(accs) > 1 else 0.0
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "accuracy"])
        for s, a in results:
            w.writerow([s, repr(float(a))])
        w.writerow(["mean", repr(mean)])
        w.writerow(["std", repr(std)])
    return {"mean": mean, "std": std, "accuracies": accs}


def _teacher_train_set(cfg: RunConfig, splits: dict[str, EventDataset]) -> EventDataset:
    if cfg.raw["teacher"]["train_on"] == "pool":
        if "pool" not in splits:
            raise ConfigError("teacher.train_on is 'pool' but the dataset has no pool split")
        return _concat(splits["pool"], splits["train"])
    return splits["train"]


def fit_teacher(cfg: RunConfig, splits, seed: int, out_dir=None):
    return train_teacher(cfg.teacher_config(), _teacher_train_set(cfg, splits), splits.get("test"),
                         seed=seed, epochs=cfg.raw["teacher"]["epochs"], batch_size=cfg.raw["batch_size"],
                         optimizer=cfg.teacher_optimizer_state(), all_heads=cfg.teacher_all_heads(),
                         val=splits.get("val"), out_dir=out_dir, dtype=cfg.dtype, eval_every=cfg.raw["eval_every"])


def cmd_train_teacher(cfg: RunConfig, seeds: int | None = None) -> Path:
    splits = load_splits(cfg)
    run = _run_dir(cfg, "teacher", seeds)
    results = []
    for s in seed_list(cfg, seeds):
        res = fit_teacher(cfg, splits, s, run / f"seed_{s}")
        results.append((s, res.final_accuracy))
    write_aggregate(run / "aggregate.csv", results)
    return run


def load_teacher(cfg: RunConfig, weights=None) -> Teacher:
    weights = weights if weights is not None else cfg.raw["teacher_weights"]
    if weights is None:
        raise ConfigError("distillation is enabled but teacher_weights is not set")
    model = Teacher(cfg.teacher_config())
    try:
        load_weights(model, cfg.path(weights))
    except (KeyError, ValueError, FileNotFoundError) as exc:
        raise ConfigError(f"teacher weights {weights} do not fit the teacher config: {exc}") from exc
    return model.to(cfg.dtype)


def fit_student(cfg: RunConfig, splits, seed: int, teacher: Teacher | None, out_dir=None, check_attention=False):
    return train_student(cfg.model_config(), splits["train"], splits.get("test"), cfg.distill_config(), teacher,
                         seed=seed, epochs=cfg.raw["epochs"], batch_size=cfg.raw["batch_size"],
                         optimizer=cfg.optimizer_state(), val=splits.get("val"), out_dir=out_dir,
                         dtype=cfg.dtype, check_attention=check_attention, eval_every=cfg.raw["eval_every"])


def cmd_train_student(cfg: RunConfig, seeds: int | None = None, check_attention: bool = False) -> Path:
    teacher = load_teacher(cfg) if cfg.distill_config() is not None else None
    splits = load_splits(cfg)
    run = _run_dir(cfg, "student", seeds)
    results = []
    for s in seed_list(cfg, seeds):
        res = fit_student(cfg, splits, s, teacher, run / f"seed_{s}", check_attention)
        results.append((s, res.final_accuracy))
    write_aggregate(run / "aggregate.csv", results)
    return run


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    accuracy: float
    per_class_accuracy: dict
    loss: dict
    param_count: int
    latency_ms: float | None = None
    n_samples: int = 0

    def to_json(self, with_latency: bool = True) -> str:
        d = asdict(self)
        if not with_latency:
            d.pop("latency_ms")
        return json.dumps(d, indent=2, sort_keys=True)


def _weights_kind(weights: Path) -> str:
    index = json.loads(Path(weights).with_suffix(".json").read_text())["params"]
    return "teacher" if any(k.startswith("stem.") for k in index) else "student"


def load_model(cfg: RunConfig, weights):
    weights = cfg.path(weights)
    if not weights.with_suffix(".json").exists():
        raise ConfigError(f"weights {weights} not found")
    kind = _weights_kind(weights)
    model = Teacher(cfg.teacher_config()) if kind == "teacher" else EdgcnModel(cfg.model_config())
    index = json.loads(weights.with_suffix(".json").read_text())["params"]
    head = index["heads.%d.weight" % (cfg.raw["teacher"]["n_taps"] - 1)] if kind == "teacher" \
        else index["classifier.weight"]
    if head["shape"][0] != cfg.num_classes:
        raise ConfigError(f"weights predict {head['shape'][0]} classes, dataset has {cfg.num_classes}")
    try:
        load_weights(model, weights)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"weights {weights} do not fit the model config: {exc}") from exc
    return kind, model.to(cfg.dtype).eval()


def _manifest_dataset(cfg: RunConfig, manifest, time_span: float) -> tuple[DatasetManifest, EventDataset]:
    man = read_manifest(cfg.path(manifest))
    if len(man.class_names) != cfg.num_classes:
        raise ConfigError(f"manifest has {len(man.class_names)} classes, config {cfg.num_classes}")
    return man, EventDataset.from_manifest(man, cfg.voxel_config(), cfg.grid_spec(), time_span)


@torch.no_grad()
def single_sample_latency(cfg: RunConfig, kind: str, model, streams, repeats: int = 100) -> float:
    """Median wall-clock ms of one forward from raw events, representation building included."""
    vc, g = cfg.voxel_config(), cfg.grid_spec()
    times = []
    for i in range(max(repeats, 1)):
        s = streams[i % len(streams)]
        t0 = time.perf_counter()
        if kind == "teacher":
            grid = build_voxel_grid(s, g.bins, g.height, g.width, g.mode)
            model(torch.as_tensor(grid.values, dtype=cfg.dtype)[None])
        else:
            model(*collate([voxelize(s, vc)], cfg.dtype))
        times.append(time.perf_counter() - t0)
    return 1000.0 * statistics.median(times)


@torch.no_grad()
def evaluate_model(cfg: RunConfig, kind: str, model, ds: EventDataset) -> tuple[float, np.ndarray, dict]:
    if kind == "student":
        means, acc, preds = evaluate_student(model, None, ds, None)
        loss = {"loss_task": means["loss_task"]}
    else:
        logits, _ = teacher_predict(model, ds)
        preds = logits.argmax(1).numpy()
        acc = float((preds == ds.labels).mean())
        loss = {"loss_task": float(torch.nn.functional.cross_entropy(logits.double(), torch.as_tensor(ds.labels)))}
    return acc, preds, loss


def cmd_evaluate(cfg: RunConfig, weights, manifest, time_span: float = 1.0, out_dir=None,
                 latency_repeats: int = 100) -> EvalReport:
    """Accuracy, per-class accuracy, loss, size and latency of saved weights on one manifest.

    ``report.json`` is deterministic; measured latency goes to ``timing.json``.
    """
    if not 0.0 < time_span <= 1.0:
        raise ConfigError("time span must lie in (0, 1]")
    kind, model = load_model(cfg, weights)
    man, ds = _manifest_dataset(cfg, manifest, time_span)
    acc, preds, loss = evaluate_model(cfg, kind, model, ds)
    per_class = {}
    for c, name in enumerate(man.class_names):
        sel = ds.labels == c
        per_class[name] = float((preds[sel] == c).mean()) if sel.any() else float("nan")
    n_params = backbone_param_count(model) if kind == "student" else sum(p.numel() for p in model.parameters())
    report = EvalReport(acc, per_class, loss, int(n_params), None, len(ds))
    if latency_repeats:
        streams = [read_events(p).time_slice(time_span) for p, _ in man.entries]
        report.latency_ms = single_sample_latency(cfg, kind, model, streams, latency_repeats)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(report.to_json(with_latency=False) + "\n")
        (out_dir / "timing.json").write_text(json.dumps({"latency_ms": report.latency_ms}) + "\n")
    return report


def cmd_export_embeddings(cfg: RunConfig, weights, manifest, out_path) -> Path:
    """One CSV row per sample: path, label and the head embedding fed to the classifier."""
    kind, model = load_model(cfg, weights)
    if kind != "student":
        raise ConfigError("embedding export needs student weights")
    man, ds = _manifest_dataset(cfg, manifest, 1.0)
    rows = []
    with torch.no_grad():
        for idx in batches(len(ds), 64):
            _, _, emb, _ = model(*ds.graph_batch(idx, cfg.dtype))
            rows.extend(emb.numpy())
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label"] + [f"f{i}" for i in range(len(rows[0]))])
        for (p, label), vec in zip(man.entries, rows):
            w.writerow([str(p), label] + [repr(float(x)) for x in vec])
    return out_path


def cmd_benchmark(cfg: RunConfig, weights=None, repeats: int = 100, out_dir=None) -> dict:
    """Per-sample latency and parameter counts of the student (and teacher) on the test split."""
    splits = ensure_dataset(cfg)
    man = read_manifest(splits.get("test") or splits["train"])
    streams = [read_events(p) for p, _ in man.entries]
    out = {}
    if weights is not None:
        kind, model = load_model(cfg, weights)
        models = {kind: model}
    else:
        torch.manual_seed(cfg.raw["seed"])
        models = {"student": EdgcnModel(cfg.model_config()).to(cfg.dtype).eval(),
                  "teacher": Teacher(cfg.teacher_config()).to(cfg.dtype).eval()}
    for kind, model in models.items():
        params = count_params(model)["total"] if kind == "student" else sum(p.numel() for p in model.parameters())
        out[kind] = {"latency_ms": single_sample_latency(cfg, kind, model, streams, repeats), "params": int(params)}
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "benchmark.json").write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return out


# ---------------------------------------------------------------- ablation grids

DISTILL_ROWS = {
    "none": None,
    "inf-only": {"variant": None},
    "A": {"variant": "A"},
    "B": {"variant": "B"},
    "C": {"variant": "C"},
    "D": {"variant": "D"},
}


@dataclass
class GridCell:
    dataset: str
    row: str
    seeds: list[int]
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return statistics.fmean(self.accuracies)

    @property
    def std(self) -> float:
        return statistics.stdev(self.accuracies) if len(self.accuracies) > 1 else 0.0


def _grid_datasets(cfg: RunConfig, datasets: dict | None) -> dict[str, RunConfig]:
    if not datasets:
        return {"synthetic": cfg}
    return {name: RunConfig(deep_merge(cfg.raw, {"dataset": over}), cfg.base_dir) for name, over in datasets.items()}


def run_edal_grid(cfg: RunConfig, seeds: int = 5, datasets: dict | None = None, rows=VARIANTS,
                  out_dir=None) -> list[GridCell]:
    cells = []
    for dname, dcfg in _grid_datasets(cfg, datasets).items():
        splits = load_splits(dcfg)
        for v in rows:
            vcfg = dcfg.with_overrides([f"model.variant={v}", "distill=null"])
            sl = seed_list(vcfg, seeds)
            accs = []
            for s in sl:
                sub = Path(out_dir) / dname / f"edal_{v}" / f"seed_{s}" if out_dir else None
                accs.append(fit_student(vcfg, splits, s, None, sub).final_accuracy)
            cells.append(GridCell(dname, v, sl, accs))
    return cells


def run_distill_grid(cfg: RunConfig, seeds: int = 5, datasets: dict | None = None, rows=tuple(DISTILL_ROWS),
                     out_dir=None) -> list[GridCell]:
    """Each row trains students over ``seeds`` seeds; teachers are fitted once per objective.

    Teachers trained with every auxiliary head serve rows whose wiring asks
    for it (B, C); the others use a final-head-only teacher.
    """
    cells = []
    for dname, dcfg in _grid_datasets(cfg, datasets).items():
        splits = load_splits(dcfg)
        teachers: dict[bool, Teacher] = {}
        base = {k: v for k, v in (dcfg.raw["distill"] or {}).items() if k != "variant"}
        for row in rows:
            spec = DISTILL_ROWS[row]
            rcfg = RunConfig(deep_merge({**dcfg.raw, "distill": None},
                                        {"distill": None if spec is None else {**base, **spec}}), dcfg.base_dir)
            rcfg.validate()
            teacher = None
            if spec is not None:
                heads = rcfg.teacher_all_heads()
                if heads not in teachers:
                    tdir = Path(out_dir) / dname / f"teacher_{'all' if heads else 'final'}" if out_dir else None
                    teachers[heads] = fit_teacher(rcfg, splits, dcfg.raw["seed"], tdir).model
                teacher = teachers[heads]
            sl = seed_list(rcfg, seeds)
            accs = []
            for s in sl:
                sub = Path(out_dir) / dname / f"distill_{row}" / f"seed_{s}" if out_dir else None
                accs.append(fit_student(rcfg, splits, s, teacher, sub).final_accuracy)
            cells.append(GridCell(dname, row, sl, accs))
    return cells


def grid_table(cells: list[GridCell], axis: str) -> str:
    """Markdown table: one row per variant, one accuracy column per dataset."""
    names = list(dict.fromkeys(c.dataset for c in cells))
    rows = list(dict.fromkeys(c.row for c in cells))
    lookup = {(c.dataset, c.row): c for c in cells}
    if axis == "distill":
        head = ["row", "L_task", "L_inf", "L_feat"] + names
    else:
        head = ["variant"] + names
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in rows:
        cols = [r]
        if axis == "distill":
            spec = DISTILL_ROWS[r]
            cols += ["x", "" if spec is None else "x", "x" if spec and spec["variant"] else ""]
        cols += [f"{lookup[(n, r)].mean:.4f} ± {lookup[(n, r)].std:.4f}" for n in names]
        lines.append("| " + " | ".join(cols) + " |")
    return "\n".join(lines) + "\n"


def cmd_ablation_grid(cfg: RunConfig, axis: str, seeds: int = 5, datasets: dict | None = None) -> Path:
    if axis not in ("edal", "distill"):
        raise ConfigError(f"unknown ablation axis {axis!r}")
    run = _run_dir(cfg, f"grid-{axis}", seeds, datasets)
    runner = run_edal_grid if axis == "edal" else run_distill_grid
    cells = runner(cfg, seeds, datasets, out_dir=run)
    with (run / "cells.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "row", "seed", "accuracy"])
        for c in cells:
            for s, a in zip(c.seeds, c.accuracies):
                w.writerow([c.dataset, c.row, s, repr(float(a))])
    with (run / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "row", "mean", "std", "n"])
        for c in cells:
            w.writerow([c.dataset, c.row, repr(c.mean), repr(c.std), len(c.accuracies)])
    (run / "summary.md").write_text(grid_table(cells, axis))
    return run
