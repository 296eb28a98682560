"""Dense numpy layers with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects; precision follows the input
dtype (``float32`` for training, ``float64`` for gradient checks). Every
forward function returns ``(output, cache)`` and the matching backward
consumes that cache exactly once.

Layouts follow the usual video convention ``(B, C, T, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import _kernels
from .errors import ConfigError, ContractError, ShapeError

# Upper bound on im2col buffer size (elements) per chunk of samples.
_COL_BUDGET = 1 << 23


@dataclass
class LayerCache:
    """Saved state from one forward call, valid for one backward call."""

    kind: str
    data: dict[str, Any] = field(default_factory=dict)
    used: bool = False

    def consume(self, kind: str) -> dict[str, Any]:
        if self.kind != kind:
            raise ContractError(f"cache from {self.kind!r} passed to {kind!r} backward")
        if self.used:
            raise ContractError(f"stale {kind} cache: backward already ran for this forward call")
        self.used = True
        data = self.data
        self.data = {}
        return data


def _check_grad_shape(grad: np.ndarray, shape: tuple[int, ...], kind: str) -> None:
    if grad.shape != tuple(shape):
        raise ShapeError(f"{kind} backward: grad shape {grad.shape} != forward output {tuple(shape)}")


# ---------------------------------------------------------------------------
# 3x3x3 same-padded convolution
# ---------------------------------------------------------------------------


class _Grid:
    """Flattened zero-padded layout for a chunk of ``(B, C, T, H, W)`` volumes.

    Each sample is stored as ``(T+1, H+1, W+1)`` with the data in the leading
    corner and zeros in the last frame, row and column. Neighbouring frames,
    rows and samples share that single zero slot, so any tap that leaves the
    volume lands on a zero. A kernel tap ``(dt, dh, dw)`` is then a constant
    shift along the flattened axis and every tap is a contiguous slice.
    """

    def __init__(self, bc: int, t: int, h: int, w: int):
        self.bc, self.t, self.h, self.w = bc, t, h, w
        self.row = w + 1
        self.plane = (h + 1) * self.row
        self.sample = (t + 1) * self.plane
        self.pad = self.plane + self.row + 1
        self.length = bc * self.sample
        self.offsets = [
            self.pad + dt * self.plane + dh * self.row + dw
            for dt in (-1, 0, 1)
            for dh in (-1, 0, 1)
            for dw in (-1, 0, 1)
        ]

    def scatter(self, x: np.ndarray, dtype) -> np.ndarray:
        """Lay ``x`` (``(bc, C, t, h, w)``) out as ``(C, pad + length + pad)``."""
        c = x.shape[1]
        buf = np.zeros((c, 2 * self.pad + self.length), dtype=dtype)
        body = buf[:, self.pad : self.pad + self.length].reshape(c, self.bc, self.t + 1, self.h + 1, self.w + 1)
        body[:, :, : self.t, : self.h, : self.w] = x.transpose(1, 0, 2, 3, 4)
        return buf

    def gather(self, buf: np.ndarray) -> np.ndarray:
        c = buf.shape[0]
        cols = np.empty((27 * c, self.length), dtype=buf.dtype)
        for k, off in enumerate(self.offsets):
            cols[k * c : (k + 1) * c] = buf[:, off : off + self.length]
        return cols

    def crop(self, full: np.ndarray) -> np.ndarray:
        """``(C, length)`` on the grid -> ``(bc, C, t, h, w)`` view."""
        c = full.shape[0]
        vol = full.reshape(c, self.bc, self.t + 1, self.h + 1, self.w + 1)
        return vol[:, :, : self.t, : self.h, : self.w].transpose(1, 0, 2, 3, 4)


def _chunks(batch: int, per_sample: int) -> list[slice]:
    step = max(1, min(batch, _COL_BUDGET // max(per_sample, 1)))
    return [slice(i, min(i + step, batch)) for i in range(0, batch, step)]


def _tap_major(weights: np.ndarray, dtype) -> np.ndarray:
    # (C_out, C_in, 3, 3, 3) -> (C_out, 27 * C_in) with column order (kt, kh, kw, c).
    c_out, c_in = weights.shape[:2]
    return weights.transpose(0, 2, 3, 4, 1).reshape(c_out, 27 * c_in).astype(dtype, copy=False)


def conv3d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> tuple[np.ndarray, LayerCache]:
    """Stride-1 cross-correlation with a 3x3x3 kernel and zero padding 1.

    Output spatial and temporal extents equal the input's.
    """
    if x.ndim != 5:
        raise ShapeError(f"conv3d expects (B, C, T, H, W), got shape {x.shape}")
    b, c, t, h, w = x.shape
    c_out = weights.shape[0]
    if weights.shape[1:] != (c, 3, 3, 3):
        raise ShapeError(f"conv3d weights {weights.shape} incompatible with {c} input channels")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv3d bias shape {bias.shape} != ({c_out},)")
    dtype = np.result_type(x, weights)
    wmat = _tap_major(weights, dtype)
    out = np.empty((b, c_out, t, h, w), dtype=dtype)
    per_sample = 27 * c * (t + 1) * (h + 1) * (w + 1)
    for sl in _chunks(b, per_sample):
        grid = _Grid(sl.stop - sl.start, t, h, w)
        cols = grid.gather(grid.scatter(x[sl], dtype))
        if c == 1:
            out[sl] = grid.crop(wmat @ cols)
        else:
            # The (L, C_out) product order runs faster in BLAS for narrow C_out.
            res = cols.T @ wmat.T
            vol = res.reshape(grid.bc, t + 1, h + 1, w + 1, c_out)[:, :t, :h, :w]
            out[sl] = vol.transpose(0, 4, 1, 2, 3)
    out += bias.astype(dtype, copy=False)[None, :, None, None, None]
    return out, LayerCache("conv3d", {"x": x, "weights": weights, "shape": out.shape})


def conv3d_backward(
    cache: LayerCache, grad_out: np.ndarray, input_grad: bool = True
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Return ``(grad_input, grad_weights, grad_bias)``.

    With ``input_grad=False`` the input gradient is skipped and ``None``
    is returned in its place (used for the first layer of a network).
    """
    d = cache.consume("conv3d")
    _check_grad_shape(grad_out, d["shape"], "conv3d")
    x, weights = d["x"], d["weights"]
    b, c_out, t, h, w = grad_out.shape
    c = x.shape[1]
    dtype = np.result_type(x, weights)
    wmat = _tap_major(weights, dtype)
    grad_w = np.zeros((c_out, 27 * c), dtype=dtype)
    grad_b = grad_out.sum(axis=(0, 2, 3, 4), dtype=dtype)
    grad_x = np.empty(x.shape, dtype=dtype) if input_grad else None
    per_sample = 27 * max(c, c_out) * (t + 1) * (h + 1) * (w + 1)
    for sl in _chunks(b, per_sample):
        grid = _Grid(sl.stop - sl.start, t, h, w)
        # Output gradient on the grid; junk positions stay zero so they add nothing.
        g = grid.scatter(grad_out[sl], dtype)[:, grid.pad : grid.pad + grid.length]
        grad_w += g @ grid.gather(grid.scatter(x[sl], dtype)).T
        if grad_x is not None:
            dcols = wmat.T @ g
            gbuf = np.zeros((c, 2 * grid.pad + grid.length), dtype=dtype)
            for k, off in enumerate(grid.offsets):
                gbuf[:, off : off + grid.length] += dcols[k * c : (k + 1) * c]
            grad_x[sl] = grid.crop(gbuf[:, grid.pad : grid.pad + grid.length])
    grad_w = grad_w.reshape(c_out, 3, 3, 3, c).transpose(0, 4, 1, 2, 3)
    return grad_x, np.ascontiguousarray(grad_w), grad_b


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def init(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm3d(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running: RunningStats,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> tuple[np.ndarray, LayerCache]:
    """Per-channel normalization over ``(B, T, H, W)``.

    In train mode the batch statistics are used and ``running`` is updated
    in place; eval mode normalizes with the running statistics.
    """
    if eps <= 0:
        raise ConfigError("batchnorm epsilon must be positive")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm gamma/beta must have shape ({c},)")
    dtype = x.dtype
    x3 = np.ascontiguousarray(x).reshape(x.shape[0], c, -1)
    if mode == "train":
        mean, var = _kernels.bn_stats(x3)
        running.mean[...] = (1 - momentum) * running.mean + momentum * mean
        running.var[...] = (1 - momentum) * running.var + momentum * var
    elif mode == "eval":
        mean = running.mean.astype(np.float64)
        var = running.var.astype(np.float64)
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = np.empty_like(x3)
    out = np.empty_like(x3)
    _kernels.bn_apply(
        x3, mean.astype(dtype), inv_std.astype(dtype), gamma.astype(dtype), beta.astype(dtype), x_hat, out
    )
    return out.reshape(x.shape), LayerCache(
        "batchnorm3d",
        {"x_hat": x_hat, "inv_std": inv_std, "gamma": gamma, "mode": mode, "shape": x.shape},
    )


def batchnorm3d_backward(cache: LayerCache, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(grad_input, grad_gamma, grad_beta)``."""
    d = cache.consume("batchnorm3d")
    _check_grad_shape(grad_out, d["shape"], "batchnorm3d")
    x_hat, inv_std, gamma = d["x_hat"], d["inv_std"], d["gamma"]
    dtype = x_hat.dtype
    b, c, n = x_hat.shape
    g3 = np.ascontiguousarray(grad_out, dtype=dtype).reshape(b, c, n)
    sum_g, sum_gx = _kernels.bn_grad_sums(g3, x_hat)
    scale = gamma.astype(np.float64) * inv_std
    grad_x = np.empty_like(g3)
    if d["mode"] == "eval":
        zeros = np.zeros(c, dtype=dtype)
        _kernels.bn_grad_input(g3, x_hat, scale.astype(dtype), zeros, zeros, grad_x)
    else:
        m = b * n
        _kernels.bn_grad_input(
            g3, x_hat, scale.astype(dtype), (sum_g / m).astype(dtype), (sum_gx / m).astype(dtype), grad_x
        )
    return grad_x.reshape(d["shape"]), sum_gx.astype(dtype), sum_g.astype(dtype)


# ---------------------------------------------------------------------------
# Elementwise and pooling
# ---------------------------------------------------------------------------


def relu(x: np.ndarray) -> tuple[np.ndarray, LayerCache]:
    mask = x > 0
    return np.maximum(x, 0), LayerCache("relu", {"mask": mask})


def relu_backward(cache: LayerCache, grad_out: np.ndarray) -> np.ndarray:
    mask = cache.consume("relu")["mask"]
    _check_grad_shape(grad_out, mask.shape, "relu")
    return grad_out * mask


def maxpool3d(
    x: np.ndarray,
    kernel: tuple[int, int, int] = (1, 2, 2),
    stride: tuple[int, int, int] | None = None,
) -> tuple[np.ndarray, LayerCache]:
    """Non-overlapping max pooling; ties go to the first window position.

    Window positions are enumerated in row-major ``(kt, kh, kw)`` order.
    """
    stride = tuple(kernel) if stride is None else tuple(stride)
    if stride != tuple(kernel):
        raise ConfigError("maxpool3d supports only stride == kernel")
    kt, kh, kw = kernel
    b, c, t, h, w = x.shape
    if t % kt or h % kh or w % kw:
        raise ShapeError(f"maxpool3d: input {x.shape} not divisible by kernel {kernel}")
    out = np.empty((b, c, t // kt, h // kh, w // kw), dtype=x.dtype)
    argmax = np.empty(out.shape, dtype=np.uint8)
    _kernels.maxpool_forward(np.ascontiguousarray(x), kt, kh, kw, out, argmax)
    return out, LayerCache("maxpool3d", {"argmax": argmax, "kernel": (kt, kh, kw), "in_shape": x.shape})


def maxpool3d_backward(cache: LayerCache, grad_out: np.ndarray) -> np.ndarray:
    d = cache.consume("maxpool3d")
    argmax = d["argmax"]
    _check_grad_shape(grad_out, argmax.shape, "maxpool3d")
    kt, kh, kw = d["kernel"]
    grad_x = np.zeros(d["in_shape"], dtype=grad_out.dtype)
    _kernels.maxpool_backward(np.ascontiguousarray(grad_out), argmax, kt, kh, kw, grad_x)
    return grad_x


def global_avg_pool(x: np.ndarray) -> tuple[np.ndarray, LayerCache]:
    """Mean over every axis after the channel axis: ``(B, C, ...) -> (B, C)``."""
    axes = tuple(range(2, x.ndim))
    return x.mean(axis=axes), LayerCache("global_avg_pool", {"in_shape": x.shape})


def global_avg_pool_backward(cache: LayerCache, grad_out: np.ndarray) -> np.ndarray:
    shape = cache.consume("global_avg_pool")["in_shape"]
    _check_grad_shape(grad_out, shape[:2], "global_avg_pool")
    cells = int(np.prod(shape[2:]))
    expand = grad_out.reshape(grad_out.shape + (1,) * (len(shape) - 2)) / cells
    return np.broadcast_to(expand, shape).copy()


def linear(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> tuple[np.ndarray, LayerCache]:
    """Affine map ``x @ weights.T + bias`` with ``weights`` shaped ``(K, F)``."""
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weights {weights.shape}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weights.shape[0]},)")
    out = x @ weights.T + bias
    return out, LayerCache("linear", {"x": x, "weights": weights, "shape": out.shape})


def linear_backward(cache: LayerCache, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(grad_input, grad_weights, grad_bias)``."""
    d = cache.consume("linear")
    _check_grad_shape(grad_out, d["shape"], "linear")
    x, weights = d["x"], d["weights"]
    return grad_out @ weights, grad_out.T @ x, grad_out.sum(axis=0)


def dropout(
    x: np.ndarray, rate: float, mode: str, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, LayerCache]:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` at train time."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x, LayerCache("dropout", {"mask": None, "shape": x.shape})
    if mode != "train":
        raise ConfigError(f"unknown mode {mode!r}")
    if rng is None:
        raise ConfigError("train-mode dropout needs a seeded generator")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, LayerCache("dropout", {"mask": mask, "shape": x.shape})


def dropout_backward(cache: LayerCache, grad_out: np.ndarray) -> np.ndarray:
    d = cache.consume("dropout")
    _check_grad_shape(grad_out, d["shape"], "dropout")
    return grad_out if d["mask"] is None else grad_out * d["mask"]


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
