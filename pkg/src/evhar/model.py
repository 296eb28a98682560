"""Lightweight 3D-CNN for event-frame clips.

Five blocks of ``conv3d(3x3x3) -> batchnorm -> relu -> maxpool(1, 2, 2)``
widen the features from 1 to 256 channels while halving the spatial extent
each time and keeping every frame. An optional squeeze-excitation gate
reweights the channels of the last block. The head is global average
pooling, dropout and a linear classifier.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import tensor_engine as te
from .errors import ConfigError, CorruptCheckpointError, ShapeError

DEFAULT_CHANNELS = (16, 32, 64, 128, 256)
ATTENTION_REDUCTION = 8


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    input_channels: int = 1
    num_classes: int = 6
    clip_length: int = 10
    input_resolution: tuple[int, int] = (128, 128)
    dropout_rate: float = 0.5
    attention_enabled: bool = False
    channel_multiplier: float = 1.0
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "input_resolution", tuple(int(v) for v in self.input_resolution))
        if len(self.channels) != 5 or min(self.channels) < 1:
            raise ConfigError("channels must list five positive block widths")
        if not self.channel_multiplier > 0:
            raise ConfigError("channel_multiplier must be positive")
        h, w = self.input_resolution
        if h < 32 or w < 32 or h % 32 or w % 32:
            raise ConfigError(f"input resolution {self.input_resolution} must be a positive multiple of 32")
        if self.num_classes < 1 or self.clip_length < 1 or self.input_channels < 1:
            raise ConfigError("num_classes, clip_length and input_channels must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(max(1, round(c * self.channel_multiplier)) for c in self.channels)

    def to_lines(self) -> list[str]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                text = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                text = "1" if v else "0"
            else:
                text = repr(v)
            out.append(f"{f.name}={text}")
        return out

    @classmethod
    def from_lines(cls, lines: list[str]) -> "ModelConfig":
        kwargs: dict[str, Any] = {}
        types = {f.name: f.type for f in fields(cls)}
        for line in lines:
            key, _, text = line.partition("=")
            if key not in types:
                raise CorruptCheckpointError(f"unknown config key {key!r}")
            kind = types[key]
            if "tuple" in str(kind):
                kwargs[key] = tuple(int(x) for x in text.split(","))
            elif kind in (bool, "bool"):
                kwargs[key] = text == "1"
            elif kind in (int, "int"):
                kwargs[key] = int(text)
            else:
                kwargs[key] = float(text)
        return cls(**kwargs)


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    decay: bool

    @classmethod
    def of(cls, value: np.ndarray, decay: bool) -> "Param":
        return cls(value, np.zeros_like(value), decay)


@dataclass
class ModelParams:
    """Learnable tensors (with gradient slots) and batch-norm running statistics."""

    params: dict[str, Param] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name].value

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad[...] = 0

    def count(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: Param(p.value.copy(), p.grad.copy(), p.decay) for k, p in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            {k: Param(p.value.astype(dtype), p.grad.astype(dtype), p.decay) for k, p in self.params.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        """Parameters then buffers, in declaration order."""
        return [(k, p.value) for k, p in self.params.items()] + list(self.buffers.items())

    @property
    def dtype(self):
        return next(iter(self.params.values())).value.dtype


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build(config: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32) -> ModelParams:
    """Initialize parameters: Kaiming-uniform weights, zero biases, unit norm scales."""
    rng = np.random.default_rng(seed)
    mp = ModelParams()
    c_in = config.input_channels
    for i, c_out in enumerate(config.widths, start=1):
        pre = f"block{i}"
        mp.params[f"{pre}.conv.weight"] = Param.of(
            _kaiming_uniform(rng, (c_out, c_in, 3, 3, 3), c_in * 27, dtype), decay=True
        )
        mp.params[f"{pre}.conv.bias"] = Param.of(np.zeros(c_out, dtype=dtype), decay=False)
        mp.params[f"{pre}.bn.gamma"] = Param.of(np.ones(c_out, dtype=dtype), decay=False)
        mp.params[f"{pre}.bn.beta"] = Param.of(np.zeros(c_out, dtype=dtype), decay=False)
        mp.buffers[f"{pre}.bn.running_mean"] = np.zeros(c_out, dtype=dtype)
        mp.buffers[f"{pre}.bn.running_var"] = np.ones(c_out, dtype=dtype)
        c_in = c_out
    if config.attention_enabled:
        hidden = max(1, c_in // ATTENTION_REDUCTION)
        mp.params["attn.fc1.weight"] = Param.of(_kaiming_uniform(rng, (hidden, c_in), c_in, dtype), decay=True)
        mp.params["attn.fc1.bias"] = Param.of(np.zeros(hidden, dtype=dtype), decay=False)
        mp.params["attn.fc2.weight"] = Param.of(_kaiming_uniform(rng, (c_in, hidden), hidden, dtype), decay=True)
        mp.params["attn.fc2.bias"] = Param.of(np.zeros(c_in, dtype=dtype), decay=False)
    mp.params["head.weight"] = Param.of(
        _kaiming_uniform(rng, (config.num_classes, c_in), c_in, dtype), decay=True
    )
    mp.params["head.bias"] = Param.of(np.zeros(config.num_classes, dtype=dtype), decay=False)
    return mp


# ---------------------------------------------------------------------------
# Channel attention
# ---------------------------------------------------------------------------


def self_attention(x: np.ndarray, params: ModelParams) -> tuple[np.ndarray, list]:
    """Squeeze-excitation gate: pool, bottleneck MLP, sigmoid, channel rescale."""
    pooled, c_pool = te.global_avg_pool(x)
    h, c_fc1 = te.linear(pooled, params["attn.fc1.weight"], params["attn.fc1.bias"])
    h, c_relu = te.relu(h)
    s, c_fc2 = te.linear(h, params["attn.fc2.weight"], params["attn.fc2.bias"])
    gate = te.sigmoid(s)
    out = x * gate[:, :, None, None, None]
    return out, [x, gate, c_pool, c_fc1, c_relu, c_fc2]


def self_attention_backward(cache: list, grad_out: np.ndarray, params: ModelParams) -> np.ndarray:
    """Accumulate attention parameter gradients; return the input gradient."""
    x, gate, c_pool, c_fc1, c_relu, c_fc2 = cache
    grad_x = grad_out * gate[:, :, None, None, None]
    grad_gate = (grad_out * x).sum(axis=(2, 3, 4))
    grad_s = grad_gate * gate * (1.0 - gate)
    grad_h, gw2, gb2 = te.linear_backward(c_fc2, grad_s)
    grad_h = te.relu_backward(c_relu, grad_h)
    grad_pooled, gw1, gb1 = te.linear_backward(c_fc1, grad_h)
    grad_x += te.global_avg_pool_backward(c_pool, grad_pooled)
    for name, g in (("fc1.weight", gw1), ("fc1.bias", gb1), ("fc2.weight", gw2), ("fc2.bias", gb2)):
        params.params[f"attn.{name}"].grad += g
    return grad_x


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def expected_input_shape(config: ModelConfig) -> tuple[int, int, int, int]:
    return (config.input_channels, config.clip_length, *config.input_resolution)


def forward(
    params: ModelParams,
    config: ModelConfig,
    clip: np.ndarray,
    mode: str = "eval",
    seed: int | None = 0,
    keep_features: bool = False,
) -> tuple[np.ndarray, dict]:
    """Run the network on a ``(B, 1, T, H, W)`` batch and return ``(logits, caches)``.

    ``seed`` drives the dropout mask in train mode. With
    ``keep_features=True`` the pre-pooling feature map is stored in
    ``caches["features"]``.
    """
    if clip.ndim != 5 or clip.shape[1:] != expected_input_shape(config):
        raise ShapeError(f"clip shape {clip.shape} does not match (B, *{expected_input_shape(config)})")
    if mode not in ("train", "eval"):
        raise ConfigError(f"unknown mode {mode!r}")
    train = mode == "train"
    dtype = params.dtype
    h = clip.astype(dtype, copy=False)
    blocks = []
    for i in range(1, 6):
        pre = f"block{i}"
        h, c_conv = te.conv3d(h, params[f"{pre}.conv.weight"], params[f"{pre}.conv.bias"])
        running = te.RunningStats(params.buffers[f"{pre}.bn.running_mean"], params.buffers[f"{pre}.bn.running_var"])
        h, c_bn = te.batchnorm3d(
            h, params[f"{pre}.bn.gamma"], params[f"{pre}.bn.beta"], running, mode, config.bn_momentum, config.bn_eps
        )
        h, c_relu = te.relu(h)
        h, c_pool = te.maxpool3d(h, (1, 2, 2))
        # Backward needs only the caches; drop references to large activations early.
        blocks.append((c_conv, c_bn, c_relu, c_pool) if train or keep_features else None)
    caches: dict[str, Any] = {"blocks": blocks, "mode": mode}
    if config.attention_enabled:
        h, caches["attention"] = self_attention(h, params)
    if keep_features:
        caches["features"] = h
    pooled, caches["gap"] = te.global_avg_pool(h)
    rng = np.random.default_rng(seed) if train else None
    dropped, caches["dropout"] = te.dropout(pooled, config.dropout_rate, mode, rng)
    logits, caches["head"] = te.linear(dropped, params["head.weight"], params["head.bias"])
    return logits, caches


def backward(
    params: ModelParams, config: ModelConfig, caches: dict, grad_logits: np.ndarray, input_grad: bool = False
) -> np.ndarray | None:
    """Overwrite every parameter gradient with d(loss)/d(param).

    Returns the gradient with respect to the input clip when
    ``input_grad`` is set, else ``None``.
    """
    if any(b is None for b in caches["blocks"]):
        raise ShapeError("forward was run without keeping caches")
    params.zero_grad()
    g, gw, gb = te.linear_backward(caches["head"], grad_logits)
    params.params["head.weight"].grad += gw
    params.params["head.bias"].grad += gb
    g = te.dropout_backward(caches["dropout"], g)
    g = te.global_avg_pool_backward(caches["gap"], g)
    if config.attention_enabled:
        g = self_attention_backward(caches["attention"], g, params)
    for i in range(5, 0, -1):
        pre = f"block{i}"
        c_conv, c_bn, c_relu, c_pool = caches["blocks"][i - 1]
        g = te.maxpool3d_backward(c_pool, g)
        g = te.relu_backward(c_relu, g)
        g, gg, gbeta = te.batchnorm3d_backward(c_bn, g)
        params.params[f"{pre}.bn.gamma"].grad += gg
        params.params[f"{pre}.bn.beta"].grad += gbeta
        g, gw, gb = te.conv3d_backward(c_conv, g, input_grad=input_grad or i > 1)
        params.params[f"{pre}.conv.weight"].grad += gw
        params.params[f"{pre}.conv.bias"].grad += gb
    return g


def predict_proba(params: ModelParams, config: ModelConfig, clips: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Eval-mode class probabilities for a stack of clips."""
    out = []
    for s in range(0, len(clips), batch_size):
        logits, _ = forward(params, config, clips[s : s + batch_size], mode="eval")
        out.append(te.softmax(logits.astype(np.float64)))
    return np.concatenate(out) if out else np.zeros((0, config.num_classes))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"EVHARCKPT"
CHECKPOINT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


def _pack_text(lines: list[str]) -> bytes:
    raw = "".join(line + "\n" for line in lines).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _metric_lines(metrics: dict[str, Any]) -> list[str]:
    lines = []
    for key, value in metrics.items():
        if "=" in key or "\n" in key or ":" in key:
            raise ValueError(f"invalid metric key {key!r}")
        if isinstance(value, bool) or isinstance(value, (int, np.integer)):
            lines.append(f"{key}:i={int(value)}")
        elif isinstance(value, (float, np.floating)):
            lines.append(f"{key}:f={float(value)!r}")
        else:
            text = str(value)
            if "\n" in text:
                raise ValueError(f"metric {key!r} contains a newline")
            lines.append(f"{key}:s={text}")
    return lines


def _parse_metrics(lines: list[str]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for line in lines:
        head, _, text = line.partition("=")
        key, _, kind = head.rpartition(":")
        out[key] = {"i": int, "f": float}.get(kind, str)(text)
    return out


def checkpoint_bytes(params: ModelParams, config: ModelConfig, metrics: dict[str, Any] | None = None) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    parts.append(_pack_text(config.to_lines()))
    parts.append(_pack_text(_metric_lines(metrics or {})))
    tensors = params.tensors()
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise ValueError(f"unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, params: ModelParams, config: ModelConfig, metrics: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    data = checkpoint_bytes(params, config, metrics)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError("checkpoint truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def text_lines(self) -> list[str]:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8").splitlines()


def parse_checkpoint(data: bytes) -> tuple[ModelParams, ModelConfig, dict[str, Any]]:
    if len(data) < len(CHECKPOINT_MAGIC) + 8 or not data.startswith(CHECKPOINT_MAGIC):
        raise CorruptCheckpointError("bad checkpoint magic")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpointError("checkpoint checksum mismatch")
    r = _Reader(body)
    r.take(len(CHECKPOINT_MAGIC))
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpointError(f"unknown checkpoint version {version}")
    try:
        config = ModelConfig.from_lines(r.text_lines())
    except (ValueError, TypeError) as exc:
        raise CorruptCheckpointError(f"bad config section: {exc}") from None
    metrics = _parse_metrics(r.text_lines())
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CorruptCheckpointError(f"unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        dt = _DTYPES[code]
        size = int(np.prod(shape)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(size), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(body):
        raise CorruptCheckpointError("trailing bytes after tensor section")
    template = build(config, seed=0, dtype=next(iter(tensors.values())).dtype if tensors else np.float32)
    _assign(template, tensors)
    return template, config, metrics


def _assign(target: ModelParams, tensors: dict[str, np.ndarray]) -> None:
    expected = dict(target.tensors())
    if set(expected) != set(tensors):
        missing = sorted(set(expected) ^ set(tensors))
        raise ShapeError(f"checkpoint tensors do not match the model: {missing[:4]}")
    for name, arr in tensors.items():
        if expected[name].shape != arr.shape:
            raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {expected[name].shape}")
    for name, arr in tensors.items():
        if name in target.params:
            target.params[name].value = arr
            target.params[name].grad = np.zeros_like(arr)
        else:
            target.buffers[name] = arr


def load_checkpoint(path, expect: ModelConfig | None = None) -> tuple[ModelParams, ModelConfig, dict[str, Any]]:
    """Read a checkpoint; with ``expect`` set, refuse one whose tensors differ in shape."""
    params, config, metrics = parse_checkpoint(Path(path).read_bytes())
    if expect is not None:
        _assign(build(expect, seed=0, dtype=params.dtype), dict(params.tensors()))
    return params, config, metrics
