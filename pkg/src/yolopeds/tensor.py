"""Dense NCHW tensors and the forward layer operations of the detector.

Tensors are plain ``numpy.ndarray`` objects of rank 4 laid out as
(batch, channels, height, width).  The engine runs in float32; every op is
dtype-preserving so the gradient checker can recompute in float64.

Convolutions are cross-correlations with TF-style "same" zero padding: the
output extent is ``ceil(extent / stride)`` and any odd amount of padding goes
to the bottom/right edge.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


DTYPE = np.float32

_PTEN_MAGIC = b"PTEN"
_PTEN_HEADER = struct.Struct("<4sBBB4I")


def check_tensor(x: np.ndarray, name: str = "input") -> np.ndarray:
    if not isinstance(x, np.ndarray):
        raise TypeError(f"{name} must be a numpy array, got {type(x).__name__}")
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (n, c, h, w), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty extent: {x.shape}")
    return x


def zeros(n: int, c: int, h: int, w: int, dtype=DTYPE) -> np.ndarray:
    return np.zeros((n, c, h, w), dtype=dtype)


def same_padding(extent: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Return (output extent, pad before, pad after) for "same" padding."""
    out = -(-extent // stride)
    total = max((out - 1) * stride + kernel - extent, 0)
    return out, total // 2, total - total // 2


def _pad_same(x: np.ndarray, k: int, stride: int):
    _, _, h, w = x.shape
    oh, pt, pb = same_padding(h, k, stride)
    ow, pl, pr = same_padding(w, k, stride)
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    return x, oh, ow, pt, pl


def _window(xp: np.ndarray, dy: int, dx: int, oh: int, ow: int, stride: int) -> np.ndarray:
    return xp[:, :, dy:dy + (oh - 1) * stride + 1:stride, dx:dx + (ow - 1) * stride + 1:stride]


def depthwise_conv(x: np.ndarray, kernels: np.ndarray, stride: int = 1) -> np.ndarray:
    """Filter every input channel with its own k x k kernel.

    ``kernels`` has shape (c, k, k) with c equal to the input channel count.
    """
    check_tensor(x)
    if kernels.ndim != 3 or kernels.shape[1] != kernels.shape[2]:
        raise ShapeError(f"depthwise kernels must be (c, k, k), got {kernels.shape}")
    if kernels.shape[0] != x.shape[1]:
        raise ShapeError(
            f"depthwise kernels have {kernels.shape[0]} channels, input has {x.shape[1]}"
        )
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    k = kernels.shape[1]
    xp, oh, ow, _, _ = _pad_same(x, k, stride)
    kernels = kernels.astype(x.dtype, copy=False)
    out = np.zeros((x.shape[0], x.shape[1], oh, ow), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            out += _window(xp, dy, dx, oh, ow, stride) * kernels[:, dy, dx][None, :, None, None]
    return out


def pointwise_conv(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """1x1 convolution: per pixel ``weights @ channels + bias``."""
    check_tensor(x)
    if weights.ndim != 2 or weights.shape[1] != x.shape[1]:
        raise ShapeError(
            f"pointwise weights {weights.shape} do not match {x.shape[1]} input channels"
        )
    n, c, h, w = x.shape
    out = np.matmul(weights.astype(x.dtype, copy=False), x.reshape(n, c, h * w))
    if bias is not None:
        if bias.shape != (weights.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} != ({weights.shape[0]},)")
        out += bias.astype(x.dtype, copy=False)[None, :, None]
    return out.reshape(n, weights.shape[0], h, w)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; pick the branch by sign.
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(
        np.result_type(x, np.float32), copy=False
    )


ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "linear": lambda x: x}


def separable_conv(
    x: np.ndarray,
    depthwise: np.ndarray,
    pointwise: np.ndarray,
    bias: np.ndarray,
    stride: int = 1,
    activation: str = "relu",
) -> np.ndarray:
    if depthwise.shape[1] not in (1, 3, 5):
        raise ValueError(f"kernel size must be 1, 3 or 5, got {depthwise.shape[1]}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    try:
        act = ACTIVATIONS[activation]
    except KeyError:
        raise ValueError(f"unknown activation {activation!r}") from None
    return act(pointwise_conv(depthwise_conv(x, depthwise, stride), pointwise, bias))


def avg_pool(x: np.ndarray, window: int = 2, stride: int = 2) -> np.ndarray:
    check_tensor(x)
    n, c, h, w = x.shape
    if h % stride or w % stride:
        raise ShapeError(f"spatial extents {h}x{w} are not divisible by pooling stride {stride}")
    oh, ow = h // stride, w // stride
    if (oh - 1) * stride + window > h or (ow - 1) * stride + window > w:
        raise ShapeError(f"pooling window {window} overruns a {h}x{w} input")
    if window == stride:
        return x.reshape(n, c, oh, stride, ow, stride).mean(axis=(3, 5))
    out = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for dy in range(window):
        for dx in range(window):
            out += _window(x, dy, dx, oh, ow, stride)
    return out / (window * window)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_tensor(a, "a")
    check_tensor(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)


def write_pten(path: str | Path, x: np.ndarray) -> None:
    """Write a 4-D tensor in the PTEN v1 container (little-endian f32)."""
    check_tensor(x)
    header = _PTEN_HEADER.pack(_PTEN_MAGIC, 1, 0, 4, *x.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(x, dtype="<f4").tobytes())


def read_pten(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _PTEN_HEADER.size:
        raise ValueError(f"{path}: truncated PTEN header")
    magic, version, dtype, ndim, *shape = _PTEN_HEADER.unpack_from(raw)
    if magic != _PTEN_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != 1 or dtype != 0 or ndim != 4:
        raise ValueError(f"{path}: unsupported PTEN version={version} dtype={dtype} ndim={ndim}")
    count = math.prod(shape)
    body = raw[_PTEN_HEADER.size:]
    if len(body) != 4 * count:
        raise ValueError(f"{path}: expected {4 * count} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").astype(DTYPE).reshape(shape)
