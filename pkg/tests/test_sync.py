from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from petmap import sync
from petmap.errors import StaleFrame
from petmap.sync import DetectionFrame, SyncBuffer


def frame(cam, ts):
    return DetectionFrame(cam, ts, ())


def groups_from(stream, **kw):
    buf = SyncBuffer(**kw)
    for f in sorted(stream, key=lambda f: (f.timestamp_ms, f.camera_id)):
        buf.ingest(f)
    return list(buf.drain()), buf


def round_half_away(fr: Fraction) -> int:
    sign = 1 if fr >= 0 else -1
    a = abs(fr)
    q = a.numerator // a.denominator
    if a - q >= Fraction(1, 2):
        q += 1
    return sign * q


def test_ingest_single_frame():
    buf = SyncBuffer()
    buf.ingest(frame(0, 1000))
    assert len(buf) == 1


def test_stale_frame_rejected():
    buf = SyncBuffer()
    for cam in range(4):
        buf.ingest(frame(cam, 1000 + cam))
    assert buf.next_group() is not None
    with pytest.raises(StaleFrame):
        buf.ingest(frame(0, 999))


def test_queues_sorted_after_random_arrival(rng):
    buf = SyncBuffer()
    stamps = {cam: rng.permutation(np.arange(1, 101) * 350 + cam) for cam in range(4)}
    for k in range(100):
        for cam in range(4):
            buf.ingest(frame(cam, int(stamps[cam][k])))
    for q in buf.queues.values():
        ts = [f.timestamp_ms for f in q]
        assert ts == sorted(ts) and len(ts) == 100


def test_four_camera_group():
    buf = SyncBuffer()
    for cam, ts in enumerate([1000, 1100, 1200, 1300]):
        buf.ingest(frame(cam, ts))
    g = buf.next_group()
    assert g.camera_ids == (0, 1, 2, 3)
    assert g.group_timestamp_ms == 1150


def test_three_camera_fallback():
    buf = SyncBuffer()
    for cam, ts in enumerate([1000, 1100, 1200, 1500]):
        buf.ingest(frame(cam, ts))
    g = buf.next_group()
    assert g.camera_ids == (0, 1, 2)
    assert g.group_timestamp_ms == 1100
    assert buf.queues[3][0].timestamp_ms == 1500


def test_two_cameras_discard_anchor_only():
    buf = SyncBuffer()
    buf.ingest(frame(0, 1000))
    buf.ingest(frame(1, 1100))
    assert buf.next_group() is None
    assert [f.timestamp_ms for f in buf.queues[1]] == [1100]
    assert not buf.queues[0]
    assert buf.stats["skipped"] == 1


def test_group_timestamp_examples():
    assert sync.group_timestamp([1000, 1001, 1001, 1002]) == 1001
    assert sync.group_timestamp([1000, 1001]) == 1001
    assert sync.group_timestamp([1000, 1001, 1001]) == 1001
    assert sync.group_timestamp([-1000, -1001]) == -1001


@given(st.lists(st.integers(1, 2**45), min_size=3, max_size=4))
def test_group_timestamp_matches_rational_oracle(ts):
    assert sync.group_timestamp(ts) == round_half_away(Fraction(sum(ts), len(ts)))


def test_tie_prefers_earlier_partner():
    buf = SyncBuffer()
    buf.ingest(frame(0, 1000))
    buf.ingest(frame(1, 1000))
    buf.ingest(frame(2, 1000))
    buf.ingest(frame(3, 1000))
    buf.ingest(frame(3, 1001))
    g = buf.next_group()
    assert dict(zip(g.camera_ids, (f.timestamp_ms for f in g.frames)))[3] == 1000


def test_overflow_drops_oldest():
    buf = SyncBuffer(max_queue=3)
    for ts in (1000, 1350, 1700, 2050):
        buf.ingest(frame(0, ts))
    assert [f.timestamp_ms for f in buf.queues[0]] == [1350, 1700, 2050]
    assert buf.stats["overflow"] == 1
    with pytest.raises(StaleFrame):
        buf.ingest(frame(0, 999))


def test_horizon_holds_back_open_windows():
    buf = SyncBuffer()
    for cam in range(3):
        buf.ingest(frame(cam, 1000))
    assert list(buf.drain(horizon_ms=1200)) == []
    buf.ingest(frame(3, 1100))
    (g,) = list(buf.drain(horizon_ms=1400))
    assert g.size == 4


def test_detection_frame_validation():
    with pytest.raises(ValueError):
        DetectionFrame(4, 1000)
    with pytest.raises(ValueError):
        DetectionFrame(0, 0)
    with pytest.raises(ValueError):
        DetectionFrame(0, 10, ([(0, 0), (1, float("nan")), (1, 1)],))


stream_params = st.tuples(
    st.integers(0, 2**31),  # seed
    st.integers(5, 60),  # frames per camera
    st.integers(0, 200),  # jitter ms
    st.floats(0, 0.3),  # drop probability
)


def _random_stream(seed, n, jitter, p_drop, cams=range(4)):
    rng = np.random.default_rng(seed)
    out = []
    for cam in cams:
        t = 1_000_000
        for k in range(n):
            t += int(rng.integers(250, 450))
            if rng.random() < p_drop:
                continue
            out.append(frame(cam, t + int(rng.integers(0, jitter + 1))))
    return out


@given(stream_params)
def test_group_invariants(params):
    stream = _random_stream(*params)
    groups, buf = groups_from(stream)
    used = set()
    last = None
    for g in groups:
        assert g.disparity_ms <= 350
        assert g.size in (3, 4)
        assert len(set(g.camera_ids)) == g.size
        assert g.group_timestamp_ms == sync.group_timestamp(g.frames)
        for f in g.frames:
            key = (f.camera_id, f.timestamp_ms)
            assert key not in used
            used.add(key)
        if last is not None:
            assert g.group_timestamp_ms > last
        last = g.group_timestamp_ms
    assert len(buf) == 0


@given(st.integers(0, 2**31), st.integers(1, 50))
def test_identical_streams_give_full_groups(seed, n):
    rng = np.random.default_rng(seed)
    ts = 1000 + np.cumsum(rng.integers(1, 1000, n))
    stream = [frame(cam, int(t)) for cam in range(4) for t in ts]
    groups, _ = groups_from(stream)
    assert len(groups) == n and all(g.size == 4 for g in groups)
    removed = [f for f in stream if f.camera_id != 2]
    groups, _ = groups_from(removed)
    assert len(groups) == n and all(g.camera_ids == (0, 1, 3) for g in groups)


@given(stream_params)
def test_two_cameras_never_group(params):
    stream = [f for f in _random_stream(*params) if f.camera_id in (1, 3)]
    groups, buf = groups_from(stream)
    assert groups == []
    assert buf.stats["skipped"] == len(stream)
