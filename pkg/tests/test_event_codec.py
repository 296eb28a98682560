import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evhar.errors import ConfigError, FormatError, InsufficientInputError
from evhar.event_codec import (
    EncoderConfig,
    Event,
    EventStream,
    accumulate_events,
    downsample_indices,
    encode_clip,
    resize_pad,
    uniform_downsample,
    video_to_events,
)


def random_stream(rng, w, h, n, max_dt=50_000):
    t = np.cumsum(rng.integers(0, max_dt, size=n)) + rng.integers(0, 1000)
    return EventStream(w, h, t, rng.integers(0, w, n), rng.integers(0, h, n), rng.choice([-1, 1], n))


def accumulate_oracle(stream, rate, mode):
    """Per-event loop with exact rational window arithmetic."""
    h, w = stream.height, stream.width
    if len(stream) == 0:
        return [[[0.0] * w for _ in range(h)]]
    r = Fraction(rate).limit_denominator(1_000_000)
    t0 = int(stream.t[0])
    span = int(stream.t[-1]) - t0
    n = max(1, math.ceil(span * r / 1_000_000))
    grid = [[[0] * w for _ in range(h)] for _ in range(n)]
    for ev in stream:
        k = min(n - 1, math.floor((ev.t - t0) * r / 1_000_000))
        grid[k][ev.y][ev.x] += 1 if mode == "count" else ev.polarity
    out = []
    for frame in grid:
        vals = [[abs(v) for v in row] for row in frame]
        peak = max(max(row) for row in vals)
        out.append([[v / peak if peak else 0.0 for v in row] for row in vals])
    return out


def test_accumulate_matches_oracle_on_1000_instances():
    rng = np.random.default_rng(2024)
    rates = [30, 60, 10, 12.5, 29.97, 7]
    for i in range(1000):
        w, h = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        stream = random_stream(rng, w, h, int(rng.integers(0, 40)), max_dt=int(rng.choice([10, 5000, 60_000])))
        rate = rates[i % len(rates)]
        mode = ("count", "polarity_sum")[i % 2]
        got = accumulate_events(stream, EncoderConfig(accumulation_rate=rate, accumulation_mode=mode))
        np.testing.assert_allclose(got, accumulate_oracle(stream, rate, mode), rtol=0, atol=1e-15)


def downsample_oracle(n, length):
    return [Fraction(k * n, length).__floor__() for k in range(length)]


def test_uniform_downsample_matches_oracle_on_1000_instances():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        n = int(rng.integers(1, 80))
        length = int(rng.integers(1, 40))
        frames = rng.random((n, 2, 3))
        got = uniform_downsample(frames, length)
        expect = np.stack([frames[i] for i in downsample_oracle(n, length)])
        assert np.array_equal(got, expect)


def test_downsample_examples():
    assert downsample_indices(30, 10).tolist() == [0, 3, 6, 9, 12, 15, 18, 21, 24, 27]
    assert downsample_indices(3, 5).tolist() == [0, 0, 1, 1, 2]
    assert downsample_indices(10, 10).tolist() == list(range(10))
    with pytest.raises(InsufficientInputError):
        downsample_indices(0, 3)
    with pytest.raises(ConfigError):
        downsample_indices(3, 0)


def test_accumulate_windows_and_modes():
    events = [Event(0, 0, 0, 1), Event(10, 0, 0, -1), Event(40_000, 1, 0, 1), Event(66_667, 1, 1, 1)]
    stream = EventStream.from_events(2, 2, events)
    counts = accumulate_events(stream, EncoderConfig(accumulation_mode="count"))
    assert counts.shape == (3, 2, 2)
    np.testing.assert_array_equal(counts[0], [[1, 0], [0, 0]])
    np.testing.assert_array_equal(counts[1], [[0, 1], [0, 0]])
    np.testing.assert_array_equal(counts[2], [[0, 0], [0, 1]])
    pol = accumulate_events(stream)
    np.testing.assert_array_equal(pol[0], 0)


def test_last_event_on_window_boundary_joins_final_window():
    stream = EventStream.from_events(1, 1, [Event(0, 0, 0, 1), Event(100_000, 0, 0, 1)])
    frames = accumulate_events(stream, EncoderConfig(accumulation_rate=10, accumulation_mode="count"))
    assert frames.shape == (1, 1, 1)


def test_static_video_gives_zero_clip():
    frames = [np.full((16, 16), 90.0)] * 5
    stream = video_to_events(frames, [0, 33_333, 66_667, 100_000, 133_333])
    assert len(stream) == 0
    clip = encode_clip(stream, EncoderConfig(target_resolution=(16, 16)))
    assert clip.shape == (1, 10, 16, 16) and not clip.any()


def test_video_to_events_threshold_counts():
    a = np.full((1, 3), 100.0)
    b = a.copy()
    # log(I+1) steps of 0.45, 0.1 and -0.65 cross the 0.2 threshold 2, 0 and 3 times.
    b[0] = np.exp(np.log(101.0) + np.array([0.45, 0.1, -0.65])) - 1
    stream = video_to_events([a, b], [0, 1000])
    assert stream.x.tolist() == [0, 0, 2, 2, 2]
    assert stream.p.tolist() == [1, 1, -1, -1, -1]
    assert set(stream.t.tolist()) == {1000}


def test_video_to_events_reference_advances():
    frames = [np.array([[0.0]]), np.array([[np.exp(0.3) - 1]]), np.array([[np.exp(0.45) - 1]])]
    stream = video_to_events(frames, [0, 10, 20])
    # The first step fires once and leaves the reference at 0.2; the second is 0.25 above it.
    assert stream.t.tolist() == [10, 20]


def test_video_to_events_errors():
    with pytest.raises(InsufficientInputError):
        video_to_events([np.zeros((2, 2))], [0])
    with pytest.raises(FormatError):
        video_to_events([np.zeros((2, 2))] * 2, [5, 5])
    with pytest.raises(FormatError):
        video_to_events([np.zeros((2, 2)), np.zeros((3, 2))], [0, 1])
    with pytest.raises(FormatError):
        video_to_events([np.zeros((2, 2)), np.full((2, 2), 300.0)], [0, 1])


def test_stream_validation():
    with pytest.raises(FormatError):
        EventStream(2, 2, [5, 3], [0, 0], [0, 0], [1, 1])
    with pytest.raises(FormatError):
        EventStream(2, 2, [0], [2], [0], [1])
    with pytest.raises(FormatError):
        EventStream(2, 2, [0], [0], [0], [0])
    with pytest.raises(FormatError):
        EventStream(2, 2, [-1], [0], [0], [1])


def test_resize_pad():
    frame = np.ones((10, 20))
    out = resize_pad(frame, (16, 16))
    assert out.shape == (16, 16)
    assert not out[:4].any() and not out[-4:].any()
    np.testing.assert_allclose(out[4:12], 1.0, atol=1e-6)
    same = np.random.default_rng(0).random((8, 8))
    assert np.array_equal(resize_pad(same, (8, 8)), same)
    with pytest.raises(ConfigError):
        resize_pad(frame, (0, 4))


def test_encoder_config_validation():
    for bad in (dict(accumulation_rate=0), dict(clip_length=0), dict(dvs_threshold=0),
                dict(accumulation_mode="mean"), dict(target_resolution=(0, 5))):
        with pytest.raises(ConfigError):
            EncoderConfig(**bad)


@st.composite
def streams(draw):
    w = draw(st.integers(1, 12))
    h = draw(st.integers(1, 12))
    n = draw(st.integers(0, 60))
    dts = draw(st.lists(st.integers(0, 80_000), min_size=n, max_size=n))
    xs = draw(st.lists(st.integers(0, w - 1), min_size=n, max_size=n))
    ys = draw(st.lists(st.integers(0, h - 1), min_size=n, max_size=n))
    ps = draw(st.lists(st.sampled_from([-1, 1]), min_size=n, max_size=n))
    return EventStream(w, h, np.cumsum(dts), xs, ys, ps)


@settings(max_examples=150, deadline=None)
@given(streams(), st.integers(1, 12), st.sampled_from(["count", "polarity_sum"]))
def test_encoded_clips_are_bounded_and_deterministic(stream, length, mode):
    cfg = EncoderConfig(clip_length=length, target_resolution=(8, 8), accumulation_mode=mode)
    a = encode_clip(stream, cfg)
    b = encode_clip(stream, cfg)
    assert a.shape == (1, length, 8, 8) and a.dtype == np.float32
    assert np.all(np.isfinite(a)) and a.min() >= 0 and a.max() <= 1
    assert np.array_equal(a, b)


@settings(max_examples=100, deadline=None)
@given(streams())
def test_mirroring_flips_accumulated_frames(stream):
    a = accumulate_events(stream)
    b = accumulate_events(stream.mirrored())
    assert np.array_equal(a[..., ::-1], b)
