"""In-memory clip dataset, loading from the directory layout, and splitting."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, FormatError
from ..event_codec import downsample_indices, resize_pad
from ..formats import read_clip_dir, scan_dataset


@dataclass
class ClipDataset:
    """Clips stored as uint8 ``(N, T, H, W)`` with integer labels.

    Every read through :meth:`batch` is appended to ``access_log`` as
    ``(phase, index)`` so tests can audit which split was touched when.
    """

    clips: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    sequence_ids: list[str] = field(default_factory=list)
    access_log: list[tuple[str, int]] = field(default_factory=list)
    log_access: bool = False

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.clips.ndim != 4 or len(self.clips) != len(self.labels):
            raise FormatError("clips must be (N, T, H, W) with one label each")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def frames(self) -> int:
        return self.clips.shape[1]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.clips.shape[2], self.clips.shape[3]

    def batch(self, indices, phase: str = "train") -> np.ndarray:
        """Float32 ``(B, 1, T, H, W)`` clips in [0, 1]."""
        indices = np.asarray(indices, dtype=np.int64)
        if self.log_access:
            self.access_log.extend((phase, int(i)) for i in indices)
        return (self.clips[indices].astype(np.float32) / np.float32(255.0))[:, None]

    def counts(self, indices=None) -> np.ndarray:
        labels = self.labels if indices is None else self.labels[np.asarray(indices, dtype=np.int64)]
        return np.bincount(labels, minlength=self.num_classes)


def conform_frames(frames: np.ndarray, length: int | None, resolution: tuple[int, int] | None) -> np.ndarray:
    """Re-sample a uint8 ``(T, H, W)`` clip to ``length`` frames and ``resolution``."""
    if length is not None and len(frames) != length:
        frames = frames[downsample_indices(len(frames), length)]
    if resolution is not None and frames.shape[1:] != tuple(resolution):
        frames = np.stack(
            [np.round(resize_pad(f / 255.0, resolution) * 255.0).astype(np.uint8) for f in frames]
        )
    return frames


def load_dataset(
    root: str | os.PathLike, frames: int | None = None, resolution: tuple[int, int] | None = None
) -> ClipDataset:
    """Load ``root/<class>/<sequence>/`` clip directories.

    ``frames`` re-downsamples every clip with the floor-index rule;
    ``resolution`` resizes and pads. Without them all clips must already
    share one shape.
    """
    index = scan_dataset(root)
    if not index.sequences:
        raise FormatError(f"{root}: no sequences found")
    clips = []
    for seq in index.sequences:
        data, _ = read_clip_dir(seq)
        clips.append(conform_frames(data, frames, resolution))
    shapes = {c.shape for c in clips}
    if len(shapes) != 1:
        raise FormatError(f"{root}: clips differ in shape {sorted(shapes)}; pass frames/resolution to conform them")
    ids = [str(Path(s).relative_to(index.root)) for s in index.sequences]
    return ClipDataset(np.stack(clips), np.asarray(index.labels), index.classes, ids)


def split_indices(labels, fractions=(0.7, 0.15, 0.15), seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded per-class shuffle split into train/validation/test index arrays."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[], [], []]
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(len(members))]
        n = len(members)
        n_train = int(round(fractions[0] * n))
        n_val = min(n - n_train, int(round(fractions[1] * n)))
        parts[0].extend(members[:n_train])
        parts[1].extend(members[n_train : n_train + n_val])
        parts[2].extend(members[n_train + n_val :])
    out = tuple(np.sort(np.asarray(p, dtype=np.int64)) for p in parts)
    for name, part in zip(("train", "validation", "test"), out):
        if part.size == 0:
            raise ConfigError(f"{name} split is empty")
    return out
