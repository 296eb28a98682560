"""Intensity video -> event stream -> fixed-length event-frame clips.

The pipeline is

1. :func:`video_to_events` emulates a DVS sensor with per-pixel
   log-intensity threshold crossings,
2. :func:`accumulate_events` bins events into frames at a fixed rate,
3. :func:`uniform_downsample` keeps ``T`` evenly spaced frames,
4. :func:`resize_pad` fits each frame into the network resolution.

:func:`encode_clip` chains steps 2-4 into a ``(1, T, H, W)`` clip.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, FormatError, InsufficientInputError

LOG_EPS = 1.0
ACCUMULATION_MODES = ("count", "polarity_sum")


class Event(NamedTuple):
    t: int
    x: int
    y: int
    polarity: int


@dataclass(frozen=True)
class EncoderConfig:
    accumulation_rate: float = 30.0
    clip_length: int = 10
    target_resolution: tuple[int, int] = (128, 128)
    dvs_threshold: float = 0.2
    accumulation_mode: str = "polarity_sum"

    def __post_init__(self):
        if not self.accumulation_rate > 0:
            raise ConfigError("accumulation_rate must be positive")
        if self.clip_length < 1:
            raise ConfigError("clip_length must be >= 1")
        if not self.dvs_threshold > 0:
            raise ConfigError("dvs_threshold must be positive")
        if self.accumulation_mode not in ACCUMULATION_MODES:
            raise ConfigError(f"accumulation_mode must be one of {ACCUMULATION_MODES}")
        h, w = self.target_resolution
        if h < 1 or w < 1:
            raise ConfigError("target_resolution must have positive area")


class EventStream:
    """Events from a ``width`` x ``height`` sensor, stored column-wise.

    ``t`` is in microseconds (int64), ``x``/``y`` are pixel coordinates and
    ``p`` holds polarities in {-1, +1}.
    """

    def __init__(self, width: int, height: int, t=(), x=(), y=(), p=(), validate: bool = True):
        self.width = int(width)
        self.height = int(height)
        self.t = np.asarray(t, dtype=np.int64).reshape(-1)
        self.x = np.asarray(x, dtype=np.int64).reshape(-1)
        self.y = np.asarray(y, dtype=np.int64).reshape(-1)
        self.p = np.asarray(p, dtype=np.int8).reshape(-1)
        if validate:
            self.validate()

    @classmethod
    def from_events(cls, width: int, height: int, events: Sequence[Event]) -> "EventStream":
        if not events:
            return cls(width, height)
        t, x, y, p = zip(*events)
        return cls(width, height, t, x, y, p)

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for row in zip(self.t.tolist(), self.x.tolist(), self.y.tolist(), self.p.tolist()):
            yield Event(*row)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and all(np.array_equal(a, b) for a, b in zip(self._columns(), other._columns()))
        )

    def __repr__(self) -> str:
        return f"EventStream({self.width}x{self.height}, {len(self)} events)"

    def _columns(self):
        return self.t, self.x, self.y, self.p

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise FormatError("sensor resolution must be positive")
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise FormatError("event columns have different lengths")
        if n == 0:
            return
        if self.t.min() < 0:
            raise FormatError("negative timestamp")
        if np.any(np.diff(self.t) < 0):
            raise FormatError("events are not sorted by timestamp")
        if self.x.min() < 0 or self.x.max() >= self.width or self.y.min() < 0 or self.y.max() >= self.height:
            raise FormatError("event coordinates outside the sensor")
        if not np.all(np.abs(self.p) == 1):
            raise FormatError("polarity must be -1 or +1")

    def mirrored(self) -> "EventStream":
        """Horizontal flip of the sensor plane."""
        return EventStream(self.width, self.height, self.t, self.width - 1 - self.x, self.y, self.p, validate=False)


# ---------------------------------------------------------------------------
# DVS emulation
# ---------------------------------------------------------------------------


def video_to_events(
    frames: Sequence[np.ndarray], timestamps: Sequence[int], config: EncoderConfig = EncoderConfig()
) -> EventStream:
    """Emit threshold-crossing events between consecutive grayscale frames.

    A pixel fires one event per multiple of ``config.dvs_threshold`` its
    log intensity has moved since its reference level; the reference then
    advances by the crossed amount. Events carry the timestamp of the frame
    that triggered them and are ordered row-major within a timestamp.
    """
    if len(frames) < 2:
        raise InsufficientInputError("video_to_events needs at least two frames")
    if len(timestamps) != len(frames):
        raise FormatError("one timestamp per frame required")
    ts = np.asarray(timestamps, dtype=np.int64)
    if ts[0] < 0 or np.any(np.diff(ts) <= 0):
        raise FormatError("timestamps must be non-negative and strictly increasing")
    shape = np.shape(frames[0])
    if len(shape) != 2:
        raise FormatError("frames must be 2-D grayscale images")
    height, width = shape
    threshold = config.dvs_threshold

    def log_frame(img) -> np.ndarray:
        arr = np.asarray(img, dtype=np.float64)
        if arr.shape != shape:
            raise FormatError(f"frame resolution {arr.shape} differs from {shape}")
        if arr.min() < 0 or arr.max() > 255:
            raise FormatError("pixel values must lie in [0, 255]")
        return np.log(arr + LOG_EPS)

    ref = log_frame(frames[0]).ravel()
    cols_t, cols_idx, cols_p = [], [], []
    for img, t in zip(frames[1:], ts[1:]):
        diff = log_frame(img).ravel() - ref
        counts = np.floor(np.abs(diff) / threshold).astype(np.int64)
        fired = np.flatnonzero(counts)
        if fired.size == 0:
            continue
        sign = np.sign(diff[fired]).astype(np.int8)
        ref[fired] += sign * counts[fired] * threshold
        reps = counts[fired]
        cols_idx.append(np.repeat(fired, reps))
        cols_p.append(np.repeat(sign, reps))
        cols_t.append(np.full(int(reps.sum()), t, dtype=np.int64))
    if not cols_t:
        return EventStream(width, height)
    idx = np.concatenate(cols_idx)
    return EventStream(
        width,
        height,
        np.concatenate(cols_t),
        idx % width,
        idx // width,
        np.concatenate(cols_p),
        validate=False,
    )


# ---------------------------------------------------------------------------
# Event frames
# ---------------------------------------------------------------------------


def _rate_fraction(rate: float) -> tuple[int, int]:
    # Exact integer arithmetic keeps window boundaries from drifting with
    # float rounding; 29.97 is treated as 2997/100.
    frac = Fraction(rate).limit_denominator(1_000_000)
    return frac.numerator, frac.denominator


def window_index(t: np.ndarray, t0: int, rate: float) -> np.ndarray:
    """Index of the ``1/rate`` second window holding each timestamp."""
    num, den = _rate_fraction(rate)
    rel = np.asarray(t, dtype=np.int64) - t0
    return rel * num // (den * 1_000_000)


def frame_count(span_us: int, rate: float) -> int:
    num, den = _rate_fraction(rate)
    return max(1, -(-int(span_us) * num // (den * 1_000_000)))


def accumulate_events(stream: EventStream, config: EncoderConfig = EncoderConfig()) -> np.ndarray:
    """Bin events into ``(N, H, W)`` frames normalized per frame to [0, 1].

    Windows are ``1/accumulation_rate`` seconds long and start at the first
    event. An empty stream gives a single all-zero frame.
    """
    h, w = stream.height, stream.width
    if len(stream) == 0:
        return np.zeros((1, h, w))
    t0 = int(stream.t[0])
    n = frame_count(int(stream.t[-1]) - t0, config.accumulation_rate)
    # A span that is an exact multiple of the window puts the last events on
    # the closing boundary; they belong to the final window.
    k = np.minimum(window_index(stream.t, t0, config.accumulation_rate), n - 1)
    flat = (k * h + stream.y) * w + stream.x
    if config.accumulation_mode == "count":
        acc = np.bincount(flat, minlength=n * h * w).astype(np.float64)
    else:
        acc = np.abs(np.bincount(flat, weights=stream.p.astype(np.float64), minlength=n * h * w))
    frames = acc.reshape(n, h, w)
    peak = frames.reshape(n, -1).max(axis=1)
    nonzero = peak > 0
    frames[nonzero] /= peak[nonzero][:, None, None]
    return frames


def downsample_indices(n: int, length: int) -> np.ndarray:
    """``floor(k * n / length)`` for ``k = 0 .. length-1``."""
    if n < 1:
        raise InsufficientInputError("cannot downsample an empty frame sequence")
    if length < 1:
        raise ConfigError("clip length must be >= 1")
    return np.arange(length, dtype=np.int64) * n // length


def uniform_downsample(frames: np.ndarray, length: int) -> np.ndarray:
    """Keep ``length`` evenly spaced frames; short sequences repeat frames."""
    frames = np.asarray(frames)
    return frames[downsample_indices(len(frames), length)]


def resize_pad(frame: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear aspect-preserving resize into ``target`` plus symmetric zero padding."""
    th, tw = target
    if th < 1 or tw < 1:
        raise ConfigError("target resolution must have positive area")
    frame = np.asarray(frame, dtype=np.float64)
    h, w = frame.shape
    if h < 1 or w < 1:
        raise FormatError("source frame must be non-empty")
    if (h, w) == (th, tw):
        return frame.copy()
    scale = min(th / h, tw / w)
    nh = min(th, max(1, round(h * scale)))
    nw = min(tw, max(1, round(w * scale)))
    if (nh, nw) == (h, w):
        content = frame
    else:
        # PIL widens the bilinear support when shrinking, so sparse event
        # pixels are averaged in rather than skipped.
        img = Image.fromarray(frame.astype(np.float32))
        content = np.asarray(img.resize((nw, nh), Image.BILINEAR), dtype=np.float64)
    out = np.zeros((th, tw))
    top = (th - nh) // 2
    left = (tw - nw) // 2
    out[top : top + nh, left : left + nw] = np.clip(content, 0.0, 1.0)
    return out


def encode_clip(stream: EventStream, config: EncoderConfig = EncoderConfig()) -> np.ndarray:
    """Accumulate, downsample and resize into a float32 ``(1, T, H, W)`` clip."""
    frames = uniform_downsample(accumulate_events(stream, config), config.clip_length)
    clip = np.stack([resize_pad(f, config.target_resolution) for f in frames])
    return clip[None].astype(np.float32)
