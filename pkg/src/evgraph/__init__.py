"""Event-stream classification with graph students distilled from dense-frame teachers."""
from .data import EventDataset, GridSpec
from .distill import train_student
from .edgcn import EdalLayer, EdgcnConfig, EdgcnModel, count_params
from .events_io import EventStream, PatternSpec, generate_pattern, read_events, write_events
from .losses import DistillConfig, crd_total_loss, kd_loss, nt_xent
from .representations import VoxelConfig, build_voxel_grid, voxelize
from .teacher import Teacher, TeacherConfig, train_teacher

__all__ = [
    "DistillConfig", "EdalLayer", "EdgcnConfig", "EdgcnModel", "EventDataset", "EventStream", "GridSpec",
    "PatternSpec", "Teacher", "TeacherConfig", "VoxelConfig", "build_voxel_grid", "count_params", "crd_total_loss",
    "generate_pattern", "kd_loss", "nt_xent", "read_events", "train_student", "train_teacher", "voxelize",
    "write_events",
]
