"""On-disk formats: EVS1 event files, PGM clip directories, dataset trees.

EVS1 (little-endian)::

    magic   8 bytes  b"EVS1\\0\\0\\0\\0"
    width   u16
    height  u16
    count   u64
    count x {t: u64 (us), x: u16, y: u16, polarity: i8, pad: i8}

A clip directory holds ``frame_0000.pgm`` ... (8-bit binary PGM) and a
``meta.txt`` with ``fps=`` and ``frames=`` lines. A dataset is
``root/<class_name>/<sequence_id>/`` clip directories; sorted class names
define the label indices.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .event_codec import EventStream

EVS1_MAGIC = b"EVS1\0\0\0\0"
_EVS1_HEADER = struct.Struct("<HHQ")
EVS1_RECORD = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "i1")])

META_FILE = "meta.txt"


def write_evs1(path: str | os.PathLike, stream: EventStream) -> None:
    if stream.width > 0xFFFF or stream.height > 0xFFFF:
        raise FormatError("EVS1 stores resolutions up to 65535")
    rec = np.zeros(len(stream), dtype=EVS1_RECORD)
    rec["t"] = stream.t
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["p"] = stream.p
    with open(path, "wb") as fh:
        fh.write(EVS1_MAGIC)
        fh.write(_EVS1_HEADER.pack(stream.width, stream.height, len(stream)))
        fh.write(rec.tobytes())


def read_evs1(path: str | os.PathLike) -> EventStream:
    data = Path(path).read_bytes()
    head = len(EVS1_MAGIC) + _EVS1_HEADER.size
    if len(data) < head or data[: len(EVS1_MAGIC)] != EVS1_MAGIC:
        raise FormatError(f"{path}: not an EVS1 file")
    width, height, count = _EVS1_HEADER.unpack_from(data, len(EVS1_MAGIC))
    body = data[head:]
    if len(body) != count * EVS1_RECORD.itemsize:
        raise FormatError(f"{path}: header announces {count} events, file holds {len(body)} payload bytes")
    rec = np.frombuffer(body, dtype=EVS1_RECORD)
    try:
        return EventStream(width, height, rec["t"].astype(np.int64), rec["x"], rec["y"], rec["p"])
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# PGM clips
# ---------------------------------------------------------------------------


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise FormatError("PGM writer expects a 2-D uint8 image")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    # Header: magic, width, height, maxval separated by whitespace; '#' starts a comment.
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: only binary PGM (P5) is supported")
    try:
        w, h, maxval = (int(tok) for tok in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM is supported")
    pixels = data[pos : pos + w * h]
    if len(pixels) != w * h:
        raise FormatError(f"{path}: truncated pixel data")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy()


def to_uint8(frames: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_clip_dir(path: str | os.PathLike, frames: np.ndarray, fps: float) -> Path:
    """Write ``(T, H, W)`` frames in [0, 1] (or uint8) as a clip directory."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    frames = np.asarray(frames)
    if frames.ndim == 4 and frames.shape[0] == 1:
        frames = frames[0]
    if frames.ndim != 3:
        raise FormatError("clip frames must be shaped (T, H, W)")
    data = frames if frames.dtype == np.uint8 else to_uint8(frames)
    for i, frame in enumerate(data):
        write_pgm(out / f"frame_{i:04d}.pgm", frame)
    (out / META_FILE).write_text(f"fps={_fmt_number(fps)}\nframes={len(data)}\n")
    return out


def _fmt_number(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def read_meta(path: str | os.PathLike) -> dict[str, str]:
    meta = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{path}: malformed line {line!r}")
        meta[key.strip()] = value.strip()
    return meta


def read_clip_dir(path: str | os.PathLike) -> tuple[np.ndarray, dict[str, str]]:
    """Return ``(frames uint8 (T, H, W), meta)`` for a clip directory."""
    root = Path(path)
    meta_path = root / META_FILE
    if not meta_path.is_file():
        raise FormatError(f"{root}: missing {META_FILE}")
    meta = read_meta(meta_path)
    frame_files = sorted(root.glob("frame_*.pgm"))
    if not frame_files:
        raise FormatError(f"{root}: no frame_*.pgm files")
    if "frames" in meta and int(meta["frames"]) != len(frame_files):
        raise FormatError(f"{root}: meta.txt lists {meta['frames']} frames, found {len(frame_files)}")
    frames = [read_pgm(f) for f in frame_files]
    if len({f.shape for f in frames}) != 1:
        raise FormatError(f"{root}: frames have different resolutions")
    return np.stack(frames), meta


# ---------------------------------------------------------------------------
# Dataset trees
# ---------------------------------------------------------------------------


@dataclass
class DatasetIndex:
    root: Path
    classes: list[str]
    sequences: list[Path] = field(default_factory=list)
    labels: list[int] = field(default_factory=list)

    def counts(self) -> list[int]:
        return [self.labels.count(k) for k in range(len(self.classes))]


def scan_dataset(root: str | os.PathLike) -> DatasetIndex:
    """List ``root/<class>/<sequence>/`` clip directories in sorted order."""
    root = Path(root)
    if not root.is_dir():
        raise FormatError(f"{root}: dataset root is not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    index = DatasetIndex(root, classes)
    for label, name in enumerate(classes):
        for seq in sorted(p for p in (root / name).iterdir() if p.is_dir()):
            if not (seq / META_FILE).is_file():
                raise FormatError(f"{seq}: not a clip directory (missing {META_FILE})")
            index.sequences.append(seq)
            index.labels.append(label)
    return index
