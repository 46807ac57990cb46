import csv
import hashlib
import json
from collections import Counter

import pytest
import yaml

from evgraph import cli
from evgraph.data import read_metrics
from evgraph.events_io import read_manifest
from evgraph.harness import (ConfigError, RunConfig, apply_overrides, cmd_ablation_grid, cmd_evaluate,
                             cmd_export_embeddings, cmd_gen_data, cmd_train_student, cmd_train_teacher, ensure_dataset)

TINY = {
    "dataset": {"width": 16, "height": 16, "duration": 60.0, "event_rate": 15.0,
                "per_class": {"train": 3, "val": 0, "test": 2, "pool": 0}, "seed": 3,
                "classes": [{"name": "right", "velocity": [0.15, 0.0]}, {"name": "left", "velocity": [-0.15, 0.0]},
                            {"name": "down", "velocity": [0.0, 0.15]}, {"name": "up", "velocity": [0.0, -0.15]}]},
    "representation": {"v_x": 4, "v_y": 4, "n_vertices": 24, "bins": 3},
    "model": {"n_neighbors": 6, "head_hidden": 32},
    "teacher": {"widths": [4, 8, 8], "epochs": 2},
    "epochs": 2,
    "batch_size": 8,
}


@pytest.fixture
def tiny(run_root, tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def files_digest(root):
    return {p.relative_to(root): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*"))
            if p.is_file()}


def test_gen_data_counts_and_determinism(tiny, tmp_path):
    cfg = RunConfig.load(tiny, ["dataset.per_class.train=50", "dataset.per_class.test=0"])
    a = cmd_gen_data(cfg, tmp_path / "a")
    manifest = read_manifest(a / "train.jsonl")
    assert len(list((a / "train").glob("*.evg"))) == 200 and len(manifest) == 200
    assert manifest.class_names == ["right", "left", "down", "up"]
    assert Counter(manifest.labels) == {0: 50, 1: 50, 2: 50, 3: 50}
    b = cmd_gen_data(cfg, tmp_path / "b")
    assert files_digest(a) == files_digest(b)


def test_overrides_and_validation(tiny):
    cfg = RunConfig.load(tiny, ["distill.lam=0.25", "model.variant=A"])
    assert cfg.distill_config().lam == 0.25 and cfg.model_config().variant == "A"
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])
    for bad in (["model.variant=Q"], ["precision=float16"], ["teacher.train_on=dev"], ["epochs=0"],
                ["teacher_weights=missing/teacher"]):
        with pytest.raises(ConfigError):
            RunConfig.load(tiny, bad)
    with pytest.raises(ConfigError):
        RunConfig.load("does-not-exist.yaml")


def test_student_without_distillation_logs_zero_inference_loss(tiny):
    run = cmd_train_student(RunConfig.load(tiny))
    rows = read_metrics(run / f"seed_{TINY.get('seed', 0)}" / "metrics.csv")
    assert rows and all(float(r["loss_inf"]) == 0.0 for r in rows)
    assert (run / "config.yaml").exists()


def test_five_seeds_and_rerun_equality(tiny, run_root):
    assert cli.main(["train-student", "--config", str(tiny), "--seeds", "5", "--set", "epochs=1"]) == 0
    (run,) = [d for d in run_root.iterdir() if d.name.startswith("student-")]
    assert sorted(d.name for d in run.iterdir() if d.is_dir()) == [f"seed_{s}" for s in range(5)]
    agg = list(csv.reader((run / "aggregate.csv").open()))
    assert [r[0] for r in agg] == ["seed", "0", "1", "2", "3", "4", "mean", "std"]
    first = files_digest(run)
    assert cli.main(["train-student", "--config", str(tiny), "--seeds", "5", "--set", "epochs=1"]) == 0
    assert files_digest(run) == first


def test_teacher_then_distilled_student(tiny):
    cfg = RunConfig.load(tiny)
    trun = cmd_train_teacher(cfg)
    weights = trun / "seed_0" / "teacher_final"
    scfg = cfg.with_overrides([f"teacher_weights={weights}", "distill.variant=C"])
    run = cmd_train_student(scfg)
    rows = read_metrics(run / "seed_0" / "metrics.csv")
    assert "loss_feat_3" in rows[0] and float(rows[0]["loss_inf"]) > 0
    with pytest.raises(ConfigError):
        cmd_train_student(cfg.with_overrides(["distill.variant=C"]))


def test_evaluate_overfit_model_and_time_span(tiny, tmp_path):
    cfg = RunConfig.load(tiny, ["dataset.per_class.train=2", "epochs=40", "eval_every=1000"])
    run = cmd_train_student(cfg)
    weights = run / "seed_0" / "student_final"
    train_manifest = ensure_dataset(cfg)["train"]
    report = cmd_evaluate(cfg, weights, train_manifest, out_dir=tmp_path / "full", latency_repeats=3)
    assert report.accuracy == 1.0 and report.n_samples == 8 and report.latency_ms > 0
    cmd_evaluate(cfg, weights, train_manifest, time_span=1.0, out_dir=tmp_path / "again", latency_repeats=0)
    assert (tmp_path / "full/report.json").read_bytes() == (tmp_path / "again/report.json").read_bytes()
    half = cmd_evaluate(cfg, weights, train_manifest, time_span=0.5, latency_repeats=0)
    assert 0.0 <= half.accuracy <= 1.0
    with pytest.raises(ConfigError):
        cmd_evaluate(cfg, weights, train_manifest, time_span=0.0)
    with pytest.raises(ConfigError):
        cmd_evaluate(cfg.with_overrides(["dataset.classes=[{name: a, velocity: [0.1, 0]}]"]), weights,
                     train_manifest)


def test_export_embeddings(tiny, tmp_path):
    cfg = RunConfig.load(tiny, ["epochs=1"])
    weights = cmd_train_student(cfg) / "seed_0" / "student_final"
    test_manifest = ensure_dataset(cfg)["test"]
    a = cmd_export_embeddings(cfg, weights, test_manifest, tmp_path / "a.csv")
    b = cmd_export_embeddings(cfg, weights, test_manifest, tmp_path / "b.csv")
    rows = list(csv.reader(a.open()))
    assert len(rows) - 1 == len(read_manifest(test_manifest))
    assert len(rows[0]) == 2 + 128
    assert a.read_bytes() == b.read_bytes()


def test_edal_grid_rows_and_rerun(tiny):
    cfg = RunConfig.load(tiny, ["epochs=1"])
    datasets = {"fast": {"event_rate": 15.0}, "sparse": {"event_rate": 6.0}}
    run = cmd_ablation_grid(cfg, "edal", seeds=1, datasets=datasets)
    summary = list(csv.DictReader((run / "summary.csv").open()))
    assert len(summary) == 5 * 2
    assert {r["row"] for r in summary} == {"A", "B", "C", "D", "E"}
    cells = (run / "cells.csv").read_bytes()
    cmd_ablation_grid(cfg, "edal", seeds=1, datasets=datasets)
    assert (run / "cells.csv").read_bytes() == cells


def test_distill_grid_has_inference_only_row(tiny):
    cfg = RunConfig.load(tiny, ["epochs=1", "distill.lam=0.5"])
    run = cmd_ablation_grid(cfg, "distill", seeds=1)
    rows = {r["row"] for r in csv.DictReader((run / "summary.csv").open())}
    assert rows == {"none", "inf-only", "A", "B", "C", "D"}
    table = (run / "summary.md").read_text()
    assert "| inf-only | x | x |  |" in table
    inf_only = read_metrics(run / "synthetic" / "distill_inf-only" / "seed_0" / "metrics.csv")
    assert "loss_feat_1" not in inf_only[0]
    with pytest.raises(ConfigError):
        cmd_ablation_grid(cfg, "depth")


def test_cli_exit_codes(tiny, tmp_path, capsys):
    assert cli.main(["gen-data", "--config", str(tiny), "--out", str(tmp_path / "d")]) == 0
    assert cli.main(["gen-data", "--config", str(tmp_path / "none.yaml")]) == 1
    assert cli.main(["train-student", "--config", str(tiny), "--set", "model.variant=Z"]) == 1
    assert cli.main(["train-student", "--config", str(tiny), "--set", "distill.variant=C"]) == 1
    assert cli.main(["evaluate", "--config", str(tiny), "--weights", str(tmp_path / "w"),
                     "--manifest", str(tmp_path / "d/test.jsonl")]) == 1
    err = capsys.readouterr().err
    assert "ConfigError" in err
    with pytest.raises(SystemExit):
        cli.main(["ablation-grid", "--axis", "depth"])


def test_cli_benchmark_and_evaluate_output(tiny, tmp_path, capsys):
    assert cli.main(["benchmark", "--config", str(tiny), "--repeats", "3", "--out", str(tmp_path / "b")]) == 0
    bench = json.loads((tmp_path / "b/benchmark.json").read_text())
    assert set(bench) == {"student", "teacher"} and bench["student"]["latency_ms"] > 0
