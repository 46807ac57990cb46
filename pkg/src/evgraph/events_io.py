"""Event data model, binary event files, dataset manifests and a synthetic generator.

Event files are little-endian::

    b"EVG1" | u16 width | u16 height | u64 count | count * (u64 t, u16 x, u16 y, i8 p, u8 pad)

followed by an optional u64 trailer holding the stream duration in microseconds.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

MAGIC = b"EVG1"
HEADER = struct.Struct("<4sHHQ")
RECORD_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "u1")])
TRAILER = struct.Struct("<Q")

PATTERN_KINDS = ("moving_bar", "moving_dot", "two_object", "stagnation")


class EventFormatError(ValueError):
    """Malformed event file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class StratificationError(ValueError):
    pass


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


@dataclass(eq=False)
class EventStream:
    """Time-ordered events with sensor geometry. Timestamps are integer microseconds."""

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    width: int
    height: int
    duration: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.t = np.asarray(self.t, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.int64)
        if not (len(self.x) == len(self.y) == len(self.t) == len(self.p)):
            raise ValueError("event field arrays differ in length")

    @classmethod
    def from_events(cls, events: Sequence[Event], width: int, height: int, duration: int | None = None):
        arr = np.array([tuple(e) for e in events], dtype=np.int64).reshape(-1, 4)
        if duration is None:
            duration = int(arr[:, 2].max()) if len(arr) else 0
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], width, height, duration)

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.x[i]), int(self.y[i]), int(self.t[i]), int(self.p[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            (self.width, self.height, self.duration) == (other.width, other.height, other.duration)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.p, other.p)
        )

    def validate(self) -> None:
        """Raise ``ValueError`` if any stream invariant is broken."""
        if len(self) == 0:
            return
        if np.any(np.diff(self.t) < 0):
            raise ValueError("timestamps are not non-decreasing")
        if self.t.min() < 0:
            raise ValueError("negative timestamp")
        if self.x.min() < 0 or self.x.max() >= self.width:
            raise ValueError("x out of sensor range")
        if self.y.min() < 0 or self.y.max() >= self.height:
            raise ValueError("y out of sensor range")
        if not np.all(np.abs(self.p) == 1):
            raise ValueError("polarity must be -1 or +1")
        if self.duration < self.t.max():
            raise ValueError("duration shorter than last timestamp")

    def time_slice(self, fraction: float) -> "EventStream":
        """Events within the first ``fraction`` of the stream duration."""
        if fraction >= 1.0:
            return self
        cut = fraction * self.duration
        keep = self.t <= cut
        return EventStream(self.x[keep], self.y[keep], self.t[keep], self.p[keep],
                           self.width, self.height, int(math.floor(cut)))


# ---------------------------------------------------------------- file I/O


def encode_events(stream: EventStream) -> bytes:
    stream.validate()
    if stream.width > 0xFFFF or stream.height > 0xFFFF:
        raise ValueError("sensor size exceeds u16")
    rec = np.zeros(len(stream), dtype=RECORD_DTYPE)
    rec["t"] = stream.t
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["p"] = stream.p
    return (HEADER.pack(MAGIC, stream.width, stream.height, len(stream))
            + rec.tobytes() + TRAILER.pack(stream.duration))


def decode_events(buf: bytes) -> EventStream:
    if len(buf) < HEADER.size:
        raise EventFormatError("truncated header", len(buf))
    magic, width, height, count = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise EventFormatError(f"bad magic {magic!r}", 0)
    body_end = HEADER.size + count * RECORD_DTYPE.itemsize
    if len(buf) < body_end:
        whole = (len(buf) - HEADER.size) // RECORD_DTYPE.itemsize
        raise EventFormatError(f"truncated: {count} records declared, {whole} present",
                               HEADER.size + whole * RECORD_DTYPE.itemsize)
    rec = np.frombuffer(buf, dtype=RECORD_DTYPE, count=count, offset=HEADER.size)

    def record_offset(i: int) -> int:
        return HEADER.size + int(i) * RECORD_DTYPE.itemsize

    t = rec["t"].astype(np.int64)
    if count > 1:
        bad = np.flatnonzero(np.diff(t) < 0)
        if len(bad):
            raise EventFormatError("non-monotone timestamp", record_offset(bad[0] + 1))
    bad = np.flatnonzero((rec["p"] != 1) & (rec["p"] != -1))
    if len(bad):
        raise EventFormatError("polarity not in {-1, +1}", record_offset(bad[0]) + 12)
    bad = np.flatnonzero((rec["x"] >= width) | (rec["y"] >= height))
    if len(bad):
        raise EventFormatError("coordinate outside sensor", record_offset(bad[0]) + 8)

    tail = len(buf) - body_end
    if tail == TRAILER.size:
        (duration,) = TRAILER.unpack_from(buf, body_end)
        if count and duration < t[-1]:
            raise EventFormatError("duration shorter than last timestamp", body_end)
    elif tail == 0:
        duration = int(t[-1]) if count else 0
    else:
        raise EventFormatError(f"{tail} unexpected trailing bytes", body_end)
    return EventStream(rec["x"], rec["y"], t, rec["p"], width, height, int(duration))


def write_events(stream: EventStream, path) -> None:
    Path(path).write_bytes(encode_events(stream))


def read_events(path) -> EventStream:
    return decode_events(Path(path).read_bytes())


# ---------------------------------------------------------------- manifests


@dataclass
class DatasetManifest:
    entries: list[tuple[str, int]]
    class_names: list[str]
    split: str = "all"

    def __post_init__(self):
        self.entries = [(str(p), int(lbl)) for p, lbl in self.entries]
        n = len(self.class_names)
        for path, label in self.entries:
            if not 0 <= label < n:
                raise ValueError(f"label {label} of {path} outside [0, {n})")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> list[int]:
        return [lbl for _, lbl in self.entries]


def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = [json.dumps({"class_names": manifest.class_names, "split": manifest.split})]
    lines += [json.dumps({"path": p, "label": lbl}) for p, lbl in manifest.entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> DatasetManifest:
    """Read a JSON-lines manifest; relative entry paths resolve against the manifest's folder."""
    path = Path(path)
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    if "class_names" not in header:
        raise ValueError(f"{path}: first line must carry class_names")
    entries = []
    for ln in lines[1:]:
        row = json.loads(ln)
        p = Path(row["path"])
        if not p.is_absolute():
            p = path.parent / p
        entries.append((str(p), row["label"]))
    return DatasetManifest(entries, list(header["class_names"]), header.get("split", "all"))


def split_manifest(manifest: DatasetManifest, train_fraction: float, seed: int,
                   names: tuple[str, str] = ("train", "test")):
    """Stratified, seeded split into two manifests."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    first, second = [], []
    for label in range(len(manifest.class_names)):
        members = [e for e in manifest.entries if e[1] == label]
        if not members:
            continue
        if len(members) < 2:
            raise StratificationError(f"class {manifest.class_names[label]!r} has {len(members)} sample")
        order = rng.permutation(len(members))
        n_first = int(round(train_fraction * len(members)))
        n_first = min(max(n_first, 1), len(members) - 1)
        first += [members[i] for i in order[:n_first]]
        second += [members[i] for i in order[n_first:]]
    return (DatasetManifest(first, manifest.class_names, names[0]),
            DatasetManifest(second, manifest.class_names, names[1]))


# ---------------------------------------------------------------- synthetic generator


@dataclass(frozen=True)
class PatternSpec:
    """Parameters of one synthetic event stream.

    Velocities are in pixels/ms, rates in events/ms. ``start`` is the object
    centre at t=0 (defaults so the sweep is centred on the sensor). For the
    ``stagnation`` kind the object freezes, and emits nothing, between the two
    fractions of ``stagnation`` and afterwards moves with ``resume_velocity``
    (default: ``velocity``).
    """

    kind: str = "moving_bar"
    velocity: tuple[float, float] = (0.2, 0.0)
    duration: float = 100.0
    event_rate: float = 20.0
    noise_rate: float = 0.0
    seed: int = 0
    start: tuple[float, float] | None = None
    length: float = 12.0
    thickness: float = 3.0
    radius: float = 3.0
    stagnation: tuple[float, float] = (0.35, 0.65)
    resume_velocity: tuple[float, float] | None = None

    def validate(self) -> None:
        if self.kind not in PATTERN_KINDS:
            raise ValueError(f"unknown pattern kind {self.kind!r}")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if self.event_rate < 0 or self.noise_rate < 0:
            raise ValueError("rates must be non-negative")
        a, b = self.stagnation
        if not 0.0 <= a <= b <= 1.0:
            raise ValueError("stagnation interval must satisfy 0 <= start <= end <= 1")


def moving_time(spec: PatternSpec, t_ms: np.ndarray) -> np.ndarray:
    """Time (ms) the object has spent moving by ``t_ms``; stagnation pauses the clock."""
    t_ms = np.asarray(t_ms, dtype=np.float64)
    if spec.kind != "stagnation":
        return t_ms
    a, b = spec.stagnation[0] * spec.duration, spec.stagnation[1] * spec.duration
    return np.where(t_ms < a, t_ms, np.where(t_ms < b, a, t_ms - (b - a)))


def _velocities(spec: PatternSpec) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(spec.velocity, dtype=np.float64)
    after = spec.resume_velocity if spec.kind == "stagnation" and spec.resume_velocity is not None else spec.velocity
    return v, np.asarray(after, dtype=np.float64)


def displacement(spec: PatternSpec, t_ms: np.ndarray) -> np.ndarray:
    """Object offset from its start at wall-clock ``t_ms`` (N x 2)."""
    v, after = _velocities(spec)
    moved = moving_time(spec, t_ms)
    if spec.kind != "stagnation":
        return np.outer(moved, v)
    a = spec.stagnation[0] * spec.duration
    return np.outer(np.minimum(moved, a), v) + np.outer(np.maximum(moved - a, 0.0), after)


def default_start(spec: PatternSpec, width: int, height: int) -> np.ndarray:
    """Start that centres the bounding box of the path on the sensor (explicit ``start`` wins)."""
    if spec.start is not None:
        return np.asarray(spec.start, dtype=np.float64)
    turns = np.array([0.0, spec.stagnation[0] * spec.duration, spec.duration])
    path = displacement(spec, turns)
    return np.array([width / 2.0, height / 2.0]) - (path.min(0) + path.max(0)) / 2.0


def _edge_frame(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row unit motion direction and its perpendicular; still rows point along +x."""
    speed = np.hypot(v[:, 0], v[:, 1])[:, None]
    ahead = np.where(speed > 0, v / np.where(speed > 0, speed, 1.0), np.array([1.0, 0.0]))
    return ahead, np.stack([-ahead[:, 1], ahead[:, 0]], axis=1)


def _object_events(rng, spec: PatternSpec, centre0: np.ndarray, sign_flip: float, shape: str,
                   t_ms: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = len(t_ms)
    centre = centre0 + sign_flip * displacement(spec, t_ms)
    v, after = _velocities(spec)
    if spec.kind == "stagnation":
        resumed = t_ms >= spec.stagnation[1] * spec.duration
        vel = np.where(resumed[:, None], after, v) * sign_flip
    else:
        vel = np.tile(v * sign_flip, (n, 1))
    ahead, across = _edge_frame(vel)
    moving = np.hypot(vel[:, 0], vel[:, 1]) > 0
    if shape == "bar":
        lead = rng.random(n) < 0.5
        offset = np.where(lead, 0.5, -0.5) * spec.thickness
        along = rng.uniform(-0.5, 0.5, n) * spec.length
        pos = centre + offset[:, None] * ahead + along[:, None] * across
        sign = np.where(lead, 1, -1)
    else:
        theta = rng.uniform(0.0, 2.0 * np.pi, n)
        unit = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        pos = centre + spec.radius * unit
        proj = (unit * ahead).sum(1)
        sign = np.where(proj >= 0, 1, -1)
    sign = np.where(moving, sign, np.where(rng.random(n) < 0.5, 1, -1))
    return np.floor(pos[:, 0]), np.floor(pos[:, 1]), sign


def generate_pattern(spec: PatternSpec, width: int, height: int) -> EventStream:
    """Render ``spec`` into a deterministic event stream on a ``width`` x ``height`` sensor.

    Moving edges emit +1 on the leading side and -1 on the trailing side.
    Noise events are uniform in space, time and polarity.
    """
    spec.validate()
    if width < 8 or height < 8:
        raise ValueError("sensor must be at least 8x8")
    rng = np.random.default_rng(spec.seed)
    T = float(spec.duration)
    v = np.asarray(spec.velocity, dtype=np.float64)

    active = T
    if spec.kind == "stagnation":
        active = T * (1.0 - (spec.stagnation[1] - spec.stagnation[0]))
    n_pattern = int(rng.poisson(spec.event_rate * active)) if spec.event_rate > 0 else 0
    # sample in moving-clock time, then map back to wall-clock time
    tau = np.sort(rng.uniform(0.0, active, n_pattern))
    if spec.kind == "stagnation":
        a, b = spec.stagnation[0] * T, spec.stagnation[1] * T
        t_ms = np.where(tau < a, tau, tau + (b - a))
    else:
        t_ms = tau

    centre0 = default_start(spec, width, height)
    xs, ys, ps, ts = [], [], [], []
    if spec.kind == "two_object":
        which = rng.random(n_pattern) < 0.5
        offset = np.array([0.0, spec.length]) if abs(v[0]) >= abs(v[1]) else np.array([spec.length, 0.0])
        for sel, c0, flip in ((which, centre0 - offset / 2, 1.0), (~which, centre0 + offset / 2, -1.0)):
            x, y, s = _object_events(rng, spec, c0, flip, "dot", t_ms[sel])
            xs.append(x), ys.append(y), ps.append(s), ts.append(t_ms[sel])
    else:
        shape = "dot" if spec.kind == "moving_dot" else "bar"
        x, y, s = _object_events(rng, spec, centre0, 1.0, shape, t_ms)
        xs.append(x), ys.append(y), ps.append(s), ts.append(t_ms)

    n_noise = int(rng.poisson(spec.noise_rate * T)) if spec.noise_rate > 0 else 0
    xs.append(rng.integers(0, width, n_noise).astype(np.float64))
    ys.append(rng.integers(0, height, n_noise).astype(np.float64))
    ps.append(np.where(rng.random(n_noise) < 0.5, 1, -1))
    ts.append(rng.uniform(0.0, T, n_noise))

    x, y, p, t = (np.concatenate(a) for a in (xs, ys, ps, ts))
    inside = (x >= 0) & (x < width) & (y >= 0) & (y < height)
    x, y, p, t = x[inside], y[inside], p[inside], t[inside]
    t_us = np.minimum(np.floor(t * 1000.0), T * 1000.0).astype(np.int64)
    order = np.argsort(t_us, kind="stable")
    return EventStream(x[order].astype(np.int64), y[order].astype(np.int64), t_us[order],
                       p[order].astype(np.int64), width, height, int(math.floor(T * 1000.0)))


def jittered(spec: PatternSpec, rng: np.random.Generator, width: int, height: int,
             velocity_jitter: float = 0.0, position_jitter: float = 0.0,
             seed: int | None = None) -> PatternSpec:
    """Copy of ``spec`` with relative speed jitter and an absolute start offset in pixels."""
    scale = 1.0 + rng.uniform(-velocity_jitter, velocity_jitter)
    scaled = replace(spec, velocity=_scaled(spec.velocity, scale), resume_velocity=_scaled(spec.resume_velocity, scale))
    start = default_start(scaled, width, height) + rng.uniform(-position_jitter, position_jitter, 2)
    return replace(scaled, start=(float(start[0]), float(start[1])), seed=spec.seed if seed is None else seed)


def _scaled(v, scale: float):
    return None if v is None else (float(v[0]) * scale, float(v[1]) * scale)
