import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evhar.errors import FormatError
from evhar.event_codec import EventStream
from evhar.formats import (
    read_clip_dir,
    read_evs1,
    read_pgm,
    scan_dataset,
    write_clip_dir,
    write_evs1,
    write_pgm,
)


@settings(max_examples=60, deadline=None)
@given(w=st.integers(1, 300), h=st.integers(1, 300), n=st.integers(0, 200), seed=st.integers(0, 2**31))
def test_evs1_round_trip(tmp_path_factory, w, h, n, seed):
    rng = np.random.default_rng(seed)
    t = np.cumsum(rng.integers(0, 2**20, n))
    stream = EventStream(w, h, t, rng.integers(0, w, n), rng.integers(0, h, n), rng.choice([-1, 1], n))
    path = tmp_path_factory.mktemp("evs") / "s.evs1"
    write_evs1(path, stream)
    back = read_evs1(path)
    assert back == stream
    write_evs1(path.with_suffix(".b"), back)
    assert path.read_bytes() == path.with_suffix(".b").read_bytes()


def test_evs1_rejects_bad_files(tmp_path):
    (tmp_path / "a").write_bytes(b"NOPE0000" + bytes(12))
    with pytest.raises(FormatError):
        read_evs1(tmp_path / "a")
    stream = EventStream(4, 4, [1, 2], [0, 1], [0, 1], [1, -1])
    write_evs1(tmp_path / "b", stream)
    data = (tmp_path / "b").read_bytes()
    (tmp_path / "c").write_bytes(data[:-3])
    with pytest.raises(FormatError):
        read_evs1(tmp_path / "c")


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (7, 11)).astype(np.uint8)
    write_pgm(tmp_path / "x.pgm", img)
    assert np.array_equal(read_pgm(tmp_path / "x.pgm"), img)
    (tmp_path / "bad.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "bad.pgm")


def test_clip_dir_and_dataset_scan(tmp_path):
    frames = np.random.default_rng(1).random((4, 6, 5))
    for cls in ("b", "a"):
        for seq in ("s1", "s0"):
            write_clip_dir(tmp_path / cls / seq, frames, 30)
    back, meta = read_clip_dir(tmp_path / "a" / "s0")
    assert back.shape == (4, 6, 5) and meta == {"fps": "30", "frames": "4"}
    np.testing.assert_allclose(back / 255.0, frames, atol=0.5 / 255 + 1e-12)
    index = scan_dataset(tmp_path)
    assert index.classes == ["a", "b"]
    assert index.labels == [0, 0, 1, 1]
    assert [p.name for p in index.sequences] == ["s0", "s1", "s0", "s1"]
    assert index.counts() == [2, 2]
    (tmp_path / "a" / "junk").mkdir()
    with pytest.raises(FormatError):
        scan_dataset(tmp_path)


def test_clip_dir_frame_count_mismatch(tmp_path):
    write_clip_dir(tmp_path / "c", np.zeros((3, 4, 4)), 10)
    (tmp_path / "c" / "frame_0002.pgm").unlink()
    with pytest.raises(FormatError):
        read_clip_dir(tmp_path / "c")
