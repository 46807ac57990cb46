import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evgraph.events_io import (PATTERN_KINDS, DatasetManifest, Event, EventFormatError, EventStream, PatternSpec,
                               StratificationError, decode_events, encode_events, generate_pattern, read_events,
                               read_manifest, split_manifest, write_events, write_manifest)


def random_stream(rng, n, width=64, height=48):
    t = np.sort(rng.integers(0, 10**9, n))
    return EventStream(rng.integers(0, width, n), rng.integers(0, height, n), t,
                       rng.choice([-1, 1], n), width, height, int(t[-1]) + 5 if n else 0)


def test_round_trip_three_events(tmp_path):
    s = EventStream.from_events([Event(1, 2, 10, 1), Event(3, 0, 10, -1), Event(7, 5, 99, 1)], 8, 8)
    write_events(s, tmp_path / "a.evg")
    back = read_events(tmp_path / "a.evg")
    assert back == s
    assert list(back) == list(s)


def test_header_layout_is_little_endian():
    s = EventStream.from_events([Event(258, 3, 65536, -1)], 300, 10)
    buf = encode_events(s)
    assert buf[:4] == b"EVG1"
    assert struct.unpack_from("<HHQ", buf, 4) == (300, 10, 1)
    assert struct.unpack_from("<QHHbB", buf, 16) == (65536, 258, 3, -1, 0)


def test_bad_magic_rejected():
    buf = b"XXXX" + encode_events(EventStream.from_events([Event(0, 0, 0, 1)], 8, 8))[4:]
    with pytest.raises(EventFormatError) as err:
        decode_events(buf)
    assert err.value.offset == 0


def test_truncated_file_names_offset():
    buf = encode_events(EventStream.from_events([Event(0, 0, i, 1) for i in range(3)], 8, 8))
    with pytest.raises(EventFormatError) as err:
        decode_events(buf[:16 + 14 + 5])
    assert err.value.offset == 16 + 14


def test_non_monotone_timestamps_name_record_offset():
    buf = bytearray(encode_events(EventStream.from_events([Event(0, 0, i, 1) for i in range(3)], 8, 8)))
    struct.pack_into("<Q", buf, 16 + 2 * 14, 0)
    struct.pack_into("<Q", buf, 16 + 1 * 14, 5)
    with pytest.raises(EventFormatError) as err:
        decode_events(bytes(buf))
    assert err.value.offset == 16 + 2 * 14


def test_file_without_duration_trailer_is_accepted():
    s = EventStream.from_events([Event(0, 0, 3, 1), Event(1, 1, 8, -1)], 8, 8)
    back = decode_events(encode_events(s)[:-8])
    assert back.duration == 8 and np.array_equal(back.t, s.t)


def test_ten_thousand_event_round_trip_hash(tmp_path):
    s = random_stream(np.random.default_rng(1), 10_000)
    write_events(s, tmp_path / "a.evg")
    write_events(read_events(tmp_path / "a.evg"), tmp_path / "b.evg")
    digest = [hashlib.sha256((tmp_path / f).read_bytes()).hexdigest() for f in ("a.evg", "b.evg")]
    assert digest[0] == digest[1]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 200), st.integers(0, 2**32 - 1))
def test_round_trip_is_identity(n, seed):
    s = random_stream(np.random.default_rng(seed), n)
    assert decode_events(encode_events(s)) == s


def test_empty_pattern():
    s = generate_pattern(PatternSpec(event_rate=0.0, noise_rate=0.0), 16, 16)
    assert len(s) == 0


def test_generation_is_deterministic():
    spec = PatternSpec("two_object", (0.1, 0.05), 80.0, 15.0, 2.0, seed=9)
    assert encode_events(generate_pattern(spec, 32, 24)) == encode_events(generate_pattern(spec, 32, 24))


def test_invalid_spec_rejected():
    with pytest.raises(ValueError):
        generate_pattern(PatternSpec(duration=0.0), 16, 16)
    with pytest.raises(ValueError):
        generate_pattern(PatternSpec(noise_rate=-1.0), 16, 16)
    with pytest.raises(ValueError):
        generate_pattern(PatternSpec(), 4, 16)


def test_bar_events_follow_integrated_trajectory():
    spec = PatternSpec("moving_bar", (1.0, 0.0), 50.0, 40.0, 0.0, seed=3, start=(5.0, 24.0), thickness=3.0)
    s = generate_pattern(spec, 64, 48)
    assert len(s) > 1000
    # integrate the centre with small Euler steps, independently of the generator
    dt = 0.01
    steps = np.arange(0.0, 50.0 + dt, dt)
    centre = 5.0 + np.concatenate([[0.0], np.cumsum(np.full(len(steps) - 1, 1.0 * dt))])
    c = np.interp(s.t / 1000.0, steps, centre)
    edge = np.where(s.p > 0, c + 1.5, c - 1.5)
    assert np.all(np.abs(s.x - edge) < 1.0 + 1e-2)
    lo, hi = np.floor(5.0 - 1.5), np.floor(5.0 + 50.0 + 1.5)
    assert s.x.min() >= lo and s.x.max() <= hi


def test_stagnation_silences_pattern_but_not_noise():
    quiet = PatternSpec("stagnation", (0.2, 0.0), 100.0, 30.0, 0.0, seed=2, stagnation=(0.3, 0.6))
    s = generate_pattern(quiet, 32, 32)
    inside = (s.t > 30_000) & (s.t < 60_000)
    assert len(s) > 0 and not inside.any()
    noisy = generate_pattern(PatternSpec("stagnation", (0.2, 0.0), 100.0, 30.0, 5.0, seed=2,
                                         stagnation=(0.3, 0.6)), 32, 32)
    assert ((noisy.t > 30_000) & (noisy.t < 60_000)).sum() > 50


def test_resume_velocity_reverses_motion():
    spec = PatternSpec("stagnation", (0.2, 0.0), 100.0, 30.0, 0.0, seed=4, resume_velocity=(-0.2, 0.0))
    s = generate_pattern(spec, 32, 32)
    early, mid, late = (s.t < 10_000), (s.t > 65_000) & (s.t < 70_000), s.t > 95_000
    assert s.x[mid].mean() > s.x[early].mean() + 4
    assert s.x[late].mean() < s.x[mid].mean() - 4


@settings(max_examples=100, deadline=None)
@given(kind=st.sampled_from(PATTERN_KINDS), vx=st.floats(-0.5, 0.5), vy=st.floats(-0.5, 0.5),
       rate=st.floats(0.0, 30.0), noise=st.floats(0.0, 5.0), seed=st.integers(0, 2**31 - 1),
       w=st.integers(8, 48), h=st.integers(8, 48))
def test_generated_streams_are_valid(kind, vx, vy, rate, noise, seed, w, h):
    s = generate_pattern(PatternSpec(kind, (vx, vy), 60.0, rate, noise, seed=seed), w, h)
    s.validate()
    assert np.all(np.diff(s.t) >= 0)
    assert s.duration >= (s.t.max() if len(s) else 0)


def _manifest(counts):
    entries = [(f"c{c}_{i}.evg", c) for c, n in enumerate(counts) for i in range(n)]
    return DatasetManifest(entries, [f"class{c}" for c in range(len(counts))])


def test_split_80_20_stratified():
    train, test = split_manifest(_manifest([25, 25, 25, 25]), 0.8, seed=0)
    assert (len(train), len(test)) == (80, 20)
    assert all(train.labels.count(c) == 20 and test.labels.count(c) == 5 for c in range(4))


def test_split_deterministic_in_seed():
    m = _manifest([10, 7, 13])
    assert split_manifest(m, 0.7, 5)[0].entries == split_manifest(m, 0.7, 5)[0].entries
    assert split_manifest(m, 0.7, 5)[0].entries != split_manifest(m, 0.7, 6)[0].entries


def test_split_rejects_singleton_class():
    with pytest.raises(StratificationError):
        split_manifest(_manifest([5, 1]), 0.5, 0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(2, 30), min_size=1, max_size=6), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_is_disjoint_exhaustive_stratified(counts, fraction, seed):
    m = _manifest(counts)
    a, b = split_manifest(m, fraction, seed)
    assert set(a.entries).isdisjoint(b.entries)
    assert sorted(a.entries + b.entries) == sorted(m.entries)
    for c, n in enumerate(counts):
        share = a.labels.count(c)
        assert 1 <= share <= n - 1
        assert abs(share - fraction * n) < 1 or share in (1, n - 1)


def test_manifest_round_trip_and_label_check(tmp_path):
    m = DatasetManifest([("a.evg", 0), ("sub/b.evg", 1)], ["x", "y"], "train")
    write_manifest(m, tmp_path / "m.jsonl")
    back = read_manifest(tmp_path / "m.jsonl")
    assert back.class_names == ["x", "y"] and back.split == "train"
    assert back.entries == [(str(tmp_path / "a.evg"), 0), (str(tmp_path / "sub/b.evg"), 1)]
    with pytest.raises(ValueError):
        DatasetManifest([("a.evg", 2)], ["x", "y"])
