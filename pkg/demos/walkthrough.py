"""From raw events to a distilled student on a small synthetic task.

Run with ``python3 demos/walkthrough.py``; takes about a minute on one core.
"""
import tempfile

import numpy as np
import torch

from evgraph import (DistillConfig, EdgcnConfig, EdgcnModel, EventDataset, GridSpec, PatternSpec, TeacherConfig, VoxelConfig,
                     count_params, generate_pattern, train_student, train_teacher, voxelize)

torch.set_num_threads(1)

# one stream: a bar sweeping right, under light background noise
stream = generate_pattern(PatternSpec("moving_bar", (0.2, 0.0), 100.0, 20.0, 0.5, seed=1), 32, 32)
graph = voxelize(stream, VoxelConfig(n_vertices=64))
print(f"{len(stream)} events -> {len(graph)} vertices, coords {graph.coords.shape}, feats {graph.feats.shape}")


def make_split(n, seed):
    rng = np.random.default_rng(seed)
    directions = [(0.2, 0.0), (-0.2, 0.0), (0.0, 0.2), (0.0, -0.2)]
    streams, labels = [], []
    for label, v in enumerate(directions):
        for _ in range(n):
            spec = PatternSpec("stagnation", v, 100.0, 6.0, 2.0, seed=int(rng.integers(2**31)))
            streams.append(generate_pattern(spec, 32, 32))
            labels.append(label)
    return EventDataset(streams, labels, ["right", "left", "down", "up"], VoxelConfig(n_vertices=64), GridSpec())


train, test, pool = make_split(12, 0), make_split(25, 1), make_split(40, 2)
student_cfg = EdgcnConfig.from_dict({"num_classes": 4, "n_neighbors": 16})
print("student parameters:", count_params(EdgcnModel(student_cfg))["total"])

with tempfile.TemporaryDirectory() as out:
    teacher = train_teacher(TeacherConfig(num_classes=4), pool, test, seed=0, epochs=15, eval_every=100)
    print(f"teacher (trained on a larger pool): {teacher.final_accuracy:.3f}")
    solo = train_student(student_cfg, train, test, seed=0, epochs=20, eval_every=100)
    print(f"student alone:                      {solo.final_accuracy:.3f}")
    crd = train_student(student_cfg, train, test, DistillConfig(variant="C", lam=0.5), teacher.model, seed=0,
                        epochs=20, eval_every=100, out_dir=out)
    print(f"student with distillation:          {crd.final_accuracy:.3f}")
    last = crd.step_rows[-1]
    print("last step loss parts:", {k: round(v, 4) for k, v in last.items() if k.startswith("loss")})
