"""Synthetic six-class moving-blob dataset rendered through the DVS emulator.

Each sample is a soft-edged bright disc on a dim background that either
translates (left, right, up, down) or changes radius (expand, contract).
The intensity video goes through :func:`video_to_events`, receives
uniformly scattered noise events, and is encoded into a clip directory.

Positions, radii and speeds are quantized to multiples of 1/64 pixel so
that a mirrored trajectory renders the exact mirror image.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .event_codec import EncoderConfig, EventStream, encode_clip, video_to_events
from .formats import read_clip_dir, read_meta, scan_dataset, write_clip_dir, write_evs1

log = logging.getLogger(__name__)

GENERATOR_VERSION = "1"
CLASSES = ("contract", "expand", "translate-down", "translate-left", "translate-right", "translate-up")
VIDEO_FPS = 30
BACKGROUND = 40.0
FOREGROUND = 200.0
EDGE_WIDTH = 1.5
# Pixels per video frame at resolution 128 and speed scale 1.
TRANSLATE_SPEED = 1.5
RADIAL_SPEED = 0.8
SPEED_JITTER = 0.3
RADIUS_RANGE = (8.0, 14.0)
MANIFEST = "manifest.txt"
_Q = 64.0


@dataclass(frozen=True)
class SynthConfig:
    samples_per_class: int = 200
    resolution: tuple[int, int] = (128, 128)
    duration: float = 1.0
    speed_scale: float = 1.0
    noise_events_per_frame: int = 20
    seed: int = 0
    clip_length: int = 10
    save_events: bool = False

    def __post_init__(self):
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if self.noise_events_per_frame < 0:
            raise ConfigError("noise_events_per_frame must be >= 0")
        if not self.duration > 0:
            raise ConfigError("duration must be positive")
        if not self.speed_scale > 0:
            raise ConfigError("speed_scale must be positive")
        h, w = self.resolution
        if min(h, w) < 32:
            raise ConfigError("resolution must be at least 32x32")

    @property
    def video_frames(self) -> int:
        return max(2, int(round(self.duration * VIDEO_FPS)) + 1)

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(clip_length=self.clip_length, target_resolution=tuple(self.resolution))


@dataclass(frozen=True)
class Trajectory:
    """Disc centre ``(cx, cy)`` and ``radius`` at video frame ``i`` are ``start + i * velocity``."""

    cx: float
    cy: float
    radius: float
    vx: float = 0.0
    vy: float = 0.0
    vr: float = 0.0

    def at(self, i: int) -> tuple[float, float, float]:
        return self.cx + i * self.vx, self.cy + i * self.vy, self.radius + i * self.vr

    def mirrored(self, width: int) -> "Trajectory":
        return Trajectory(width - 1 - self.cx, self.cy, self.radius, -self.vx, self.vy, self.vr)


def _q(v: float) -> float:
    return round(v * _Q) / _Q


def sample_rng(seed: int, class_idx: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, class_idx, index])


def sample_trajectory(name: str, config: SynthConfig, rng: np.random.Generator) -> Trajectory:
    """Draw a random start, size and speed for class ``name`` that stays in frame."""
    if name not in CLASSES:
        raise ConfigError(f"unknown class {name!r}")
    h, w = config.resolution
    unit = min(h, w) / 128.0
    steps = config.video_frames - 1
    radius = rng.uniform(*RADIUS_RANGE) * unit
    jitter = rng.uniform(1 - SPEED_JITTER, 1 + SPEED_JITTER)
    margin = 2 * EDGE_WIDTH + 2
    if name.startswith("translate"):
        speed = TRANSLATE_SPEED * unit * config.speed_scale * jitter
        travel = min(speed * steps, min(h, w) - 2 * (radius + margin) - 1)
        speed = travel / steps
        dx, dy = {"left": (-1, 0), "right": (1, 0), "up": (0, -1), "down": (0, 1)}[name.split("-")[1]]
        lo_x, hi_x = radius + margin, w - 1 - radius - margin
        lo_y, hi_y = radius + margin, h - 1 - radius - margin
        # The start is drawn so the end point also fits.
        cx = rng.uniform(lo_x + max(0, -dx) * travel, hi_x - max(0, dx) * travel)
        cy = rng.uniform(lo_y + max(0, -dy) * travel, hi_y - max(0, dy) * travel)
        return Trajectory(_q(cx), _q(cy), _q(radius), _q(dx * speed), _q(dy * speed), 0.0)
    speed = RADIAL_SPEED * unit * config.speed_scale * jitter
    grow = min(speed * steps, min(h, w) / 2 - radius - margin - 1)
    speed = grow / steps
    big = radius + grow
    cx = rng.uniform(big + margin, w - 1 - big - margin)
    cy = rng.uniform(big + margin, h - 1 - big - margin)
    if name == "expand":
        return Trajectory(_q(cx), _q(cy), _q(radius), vr=_q(speed))
    return Trajectory(_q(cx), _q(cy), _q(radius) + steps * _q(speed), vr=-_q(speed))


def render_video(traj: Trajectory, config: SynthConfig) -> np.ndarray:
    """Float64 intensity frames ``(F, H, W)`` in [0, 255] for a trajectory."""
    h, w = config.resolution
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    frames = np.empty((config.video_frames, h, w))
    for i in range(config.video_frames):
        cx, cy, r = traj.at(i)
        dist = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
        inside = 0.5 * (1.0 + np.tanh((r - dist) / EDGE_WIDTH))
        frames[i] = BACKGROUND + (FOREGROUND - BACKGROUND) * inside
    return frames


def video_timestamps(n: int) -> np.ndarray:
    """Microsecond stamps of ``n`` frames at 30 fps, rounded to the nearest integer."""
    i = np.arange(n, dtype=np.int64)
    return (2 * i * 1_000_000 + VIDEO_FPS) // (2 * VIDEO_FPS)


def add_noise(stream: EventStream, timestamps: np.ndarray, per_frame: int, rng: np.random.Generator) -> EventStream:
    """Scatter ``per_frame`` random events at each frame timestamp after the first."""
    if per_frame == 0:
        return stream
    ts = np.repeat(timestamps[1:], per_frame)
    nx = rng.integers(0, stream.width, size=ts.size)
    ny = rng.integers(0, stream.height, size=ts.size)
    npol = rng.choice(np.array([-1, 1], dtype=np.int8), size=ts.size)
    t = np.concatenate([stream.t, ts])
    x = np.concatenate([stream.x, nx])
    y = np.concatenate([stream.y, ny])
    p = np.concatenate([stream.p, npol])
    order = np.lexsort((x, y, t))
    return EventStream(stream.width, stream.height, t[order], x[order], y[order], p[order])


def render_events(traj: Trajectory, config: SynthConfig, rng: np.random.Generator | None = None) -> EventStream:
    frames = render_video(traj, config)
    ts = video_timestamps(len(frames))
    stream = video_to_events(list(frames), ts, config.encoder())
    if rng is not None:
        stream = add_noise(stream, ts, config.noise_events_per_frame, rng)
    return stream


def make_sample(name: str, index: int, config: SynthConfig) -> tuple[EventStream, np.ndarray]:
    """Event stream and encoded ``(1, T, H, W)`` clip for one sample."""
    rng = sample_rng(config.seed, CLASSES.index(name), index)
    traj = sample_trajectory(name, config, rng)
    stream = render_events(traj, config, rng)
    return stream, encode_clip(stream, config.encoder())


def generate(out: str | os.PathLike, config: SynthConfig = SynthConfig()) -> Path:
    """Write ``out/<class>/<NNNN>/`` clip directories plus ``manifest.txt``."""
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    fps = config.clip_length / config.duration
    for name in CLASSES:
        for i in range(config.samples_per_class):
            stream, clip = make_sample(name, i, config)
            seq = write_clip_dir(root / name / f"{i:04d}", clip[0], fps)
            if config.save_events:
                write_evs1(seq / "events.evs1", stream)
    lines = [
        f"generator_version={GENERATOR_VERSION}",
        f"seed={config.seed}",
        f"classes={','.join(CLASSES)}",
        f"counts={','.join(str(config.samples_per_class) for _ in CLASSES)}",
        f"samples_per_class={config.samples_per_class}",
        f"resolution={config.resolution[0]}x{config.resolution[1]}",
        f"duration={config.duration!r}",
        f"speed_scale={config.speed_scale!r}",
        f"noise_events_per_frame={config.noise_events_per_frame}",
        f"clip_length={config.clip_length}",
    ]
    (root / MANIFEST).write_text("\n".join(lines) + "\n")
    return root


@dataclass
class DatasetSummary:
    classes: list[str]
    counts: list[int]
    # Mean fraction of non-zero pixels per event frame, per class.
    density: list[float]
    min_frames: int
    max_frames: int
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.warnings

    def format(self) -> str:
        lines = [f"{'class':<18} {'count':>6} {'density':>9}"]
        for name, n, d in zip(self.classes, self.counts, self.density):
            lines.append(f"{name:<18} {n:>6} {d:>9.5f}")
        lines.append(f"frames per sequence: min {self.min_frames} max {self.max_frames}")
        lines.extend(f"warning: {w}" for w in self.warnings)
        return "\n".join(lines)


def describe(root: str | os.PathLike) -> DatasetSummary:
    """Per-class counts, mean event-frame density and frame-count range."""
    index = scan_dataset(root)
    if not index.classes or not index.sequences:
        return DatasetSummary([], [], [], 0, 0, [f"{root}: no classes found"])
    density = np.zeros(len(index.classes))
    lengths = []
    for seq, label in zip(index.sequences, index.labels):
        frames, _ = read_clip_dir(seq)
        lengths.append(len(frames))
        density[label] += float(np.count_nonzero(frames)) / frames.size
    counts = index.counts()
    warnings = [f"class {c!r} has no sequences" for c, n in zip(index.classes, counts) if n == 0]
    density = [float(d / n) if n else 0.0 for d, n in zip(density, counts)]
    manifest = Path(root) / MANIFEST
    if manifest.is_file():
        try:
            read_meta(manifest)
        except FormatError as exc:
            warnings.append(str(exc))
    return DatasetSummary(index.classes, counts, density, min(lengths), max(lengths), warnings)
