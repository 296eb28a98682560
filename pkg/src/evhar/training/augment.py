"""Clip-consistent augmentation for under-represented classes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

DEFAULT_AUGMENT_NAMES = ("eating", "washing up")


@dataclass(frozen=True)
class AugmentConfig:
    probability: float = 0.5
    max_rotation_deg: float = 15.0
    max_shift_fraction: float = 0.1
    blur_sigma: tuple[float, float] = (0.1, 1.0)


def resolve_augment_classes(class_names, requested=None) -> frozenset[int]:
    """Map class names (case-insensitive) or indices to label indices.

    With ``requested=None`` the defaults are the classes named "Eating" and
    "Washing up"; datasets without those names get no heavy augmentation.
    """
    lookup = {name.lower().replace("_", " ").replace("-", " "): i for i, name in enumerate(class_names)}
    wanted = DEFAULT_AUGMENT_NAMES if requested is None else requested
    out = set()
    for item in wanted:
        if isinstance(item, (int, np.integer)):
            if not 0 <= item < len(class_names):
                raise ValueError(f"augmentation class index {item} out of range")
            out.add(int(item))
            continue
        key = str(item).lower().replace("_", " ").replace("-", " ")
        if key in lookup:
            out.add(lookup[key])
        elif requested is not None:
            raise ValueError(f"unknown augmentation class {item!r}")
    return frozenset(out)


def hflip(clip: np.ndarray) -> np.ndarray:
    return clip[..., ::-1].copy()


def rotate_translate(clip: np.ndarray, angle_deg: float, shift: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Rotate every frame by ``angle_deg`` about its centre, then shift by ``(dy, dx)`` pixels."""
    h, w = clip.shape[-2:]
    theta = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - rot @ (centre + np.asarray(shift, dtype=np.float64))
    frames = clip.reshape(-1, h, w)
    out = np.empty_like(frames)
    for i, frame in enumerate(frames):
        out[i] = ndimage.affine_transform(frame, rot, offset=offset, order=1, mode="constant", cval=0.0)
    return out.reshape(clip.shape)


def gaussian_blur(clip: np.ndarray, sigma: float) -> np.ndarray:
    sigmas = (0.0,) * (clip.ndim - 2) + (sigma, sigma)
    return ndimage.gaussian_filter(clip, sigma=sigmas, mode="constant", cval=0.0)


def augment(
    clip: np.ndarray,
    class_idx: int,
    augment_classes=frozenset(),
    rng: np.random.Generator | None = None,
    config: AugmentConfig = AugmentConfig(),
) -> np.ndarray:
    """Randomly flip, rotate, translate and blur a clip of a targeted class.

    Each transform fires independently with ``config.probability`` and uses
    one parameter draw for every frame of the clip. Other classes pass
    through unchanged. Output is clamped to [0, 1].
    """
    if class_idx not in augment_classes:
        return clip.copy()
    if rng is None:
        rng = np.random.default_rng()
    coins = [rng.random() < config.probability for _ in range(4)]
    angle = rng.uniform(-config.max_rotation_deg, config.max_rotation_deg)
    h, w = clip.shape[-2:]
    dy = rng.uniform(-config.max_shift_fraction, config.max_shift_fraction) * h
    dx = rng.uniform(-config.max_shift_fraction, config.max_shift_fraction) * w
    sigma = rng.uniform(*config.blur_sigma)
    out = clip
    if coins[0]:
        out = hflip(out)
    if coins[1] or coins[2]:
        out = rotate_translate(out, angle if coins[1] else 0.0, (dy, dx) if coins[2] else (0.0, 0.0))
    if coins[3]:
        out = gaussian_blur(out, sigma)
    return np.clip(out, 0.0, 1.0).astype(clip.dtype, copy=False)
