"""Hand-written reverse-mode gradients, SGD with momentum, and a gradient checker.

Each ``*_backward`` mirrors the forward op of the same name in
:mod:`yolopeds.tensor` and returns gradients with respect to the op's inputs
and parameters given the upstream gradient of its output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from yolopeds.tensor import DTYPE, ShapeError, _pad_same, _window, check_tensor, sigmoid


def _check_upstream(gout: np.ndarray, shape: tuple) -> None:
    if gout.shape != tuple(shape):
        raise ShapeError(f"upstream gradient {gout.shape} does not match output {tuple(shape)}")


def depthwise_conv_backward(x: np.ndarray, kernels: np.ndarray, stride: int, gout: np.ndarray):
    """Return (grad_input, grad_kernels)."""
    check_tensor(x)
    k = kernels.shape[1]
    xp, oh, ow, pt, pl = _pad_same(x, k, stride)
    _check_upstream(gout, (x.shape[0], x.shape[1], oh, ow))
    kernels = kernels.astype(x.dtype, copy=False)
    gxp = np.zeros_like(xp)
    gk = np.empty(kernels.shape, dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            _window(gxp, dy, dx, oh, ow, stride)[...] += gout * kernels[:, dy, dx][None, :, None, None]
            gk[:, dy, dx] = np.einsum("nchw,nchw->c", gout, _window(xp, dy, dx, oh, ow, stride))
    h, w = x.shape[2:]
    return gxp[:, :, pt:pt + h, pl:pl + w], gk


def pointwise_conv_backward(x: np.ndarray, weights: np.ndarray, gout: np.ndarray):
    """Return (grad_input, grad_weights, grad_bias)."""
    check_tensor(x)
    n, c, h, w = x.shape
    _check_upstream(gout, (n, weights.shape[0], h, w))
    g = gout.reshape(n, weights.shape[0], h * w)
    xf = x.reshape(n, c, h * w)
    gw = np.matmul(g, xf.transpose(0, 2, 1)).sum(axis=0)
    gx = np.matmul(weights.astype(x.dtype, copy=False).T, g).reshape(x.shape)
    return gx, gw, g.sum(axis=(0, 2))


def avg_pool_backward(x_shape: tuple, gout: np.ndarray, window: int = 2, stride: int = 2) -> np.ndarray:
    n, c, h, w = x_shape
    oh, ow = h // stride, w // stride
    _check_upstream(gout, (n, c, oh, ow))
    share = gout / (window * window)
    if window == stride:
        g = np.broadcast_to(share[:, :, :, None, :, None], (n, c, oh, stride, ow, stride))
        return g.reshape(n, c, h, w).copy()
    gx = np.zeros(x_shape, dtype=gout.dtype)
    for dy in range(window):
        for dx in range(window):
            _window(gx, dy, dx, oh, ow, stride)[...] += share
    return gx


def concat_backward(gout: np.ndarray, channels_a: int):
    """Split the upstream gradient back onto the two concatenated sources."""
    if not 0 < channels_a < gout.shape[1]:
        raise ShapeError(f"cannot split {gout.shape[1]} channels at {channels_a}")
    return gout[:, :channels_a], gout[:, channels_a:]


def relu_backward(x: np.ndarray, gout: np.ndarray) -> np.ndarray:
    _check_upstream(gout, x.shape)
    return np.where(x > 0, gout, 0).astype(gout.dtype, copy=False)


def sigmoid_backward(x: np.ndarray, gout: np.ndarray) -> np.ndarray:
    _check_upstream(gout, np.shape(x))
    s = sigmoid(x)
    return gout * s * (1 - s)


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    velocity: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)
        self.velocity = np.zeros_like(self.value)

    @property
    def decays(self) -> bool:
        # L2 regularisation applies to convolution kernels only, never biases.
        return not self.name.endswith(".b")

    def zero_grad(self) -> None:
        self.grad[...] = 0


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 16
    clip_norm: float | None = None  # rescale the whole gradient to at most this L2 norm

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be non-negative, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be positive, got {self.batch_size}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip norm must be positive, got {self.clip_norm}")


def sgd_step(params: Mapping[str, Parameter], config: OptimizerConfig) -> None:
    """In-place momentum update; gradients are zeroed afterwards."""
    scale = 1.0
    if config.clip_norm is not None:
        norm = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params.values()))
        if norm > config.clip_norm:
            scale = config.clip_norm / norm
    for p in params.values():
        g = scale * p.grad
        if p.decays:
            g = g + config.weight_decay * p.value
        p.velocity *= config.momentum
        p.velocity -= config.lr * g
        p.value += p.velocity
        p.zero_grad()


def init_weights(graph, seed: int = 0, std: float = 0.2, scheme: str = "normal") -> dict[str, Parameter]:
    """Seeded weights with zero biases.

    ``normal`` draws every kernel from N(0, std^2).  ``fan-in`` scales each
    kernel's deviation to its fan-in instead (1/k for depthwise kernels,
    sqrt(2/c_in) for pointwise ones), which keeps activations from vanishing
    in narrow graphs.
    """
    if scheme not in ("normal", "fan-in"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in graph.param_shapes().items():
        if name.endswith(".b"):
            value = np.zeros(shape, dtype=DTYPE)
        else:
            sd = std
            if scheme == "fan-in":
                sd = 1.0 / shape[1] if name.endswith(".dw") else float(np.sqrt(2.0 / shape[1]))
            value = rng.normal(0.0, sd, size=shape).astype(DTYPE)
        params[name] = Parameter(name, value)
    return params


def relative_error(analytic: float, numeric: float, atol: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), atol)


@dataclass(frozen=True)
class GradCheck:
    max_error: float
    checked: int
    skipped: int  # coordinates whose +-epsilon interval straddles a kink

    def passed(self, tol: float = 1e-3) -> bool:
        return self.checked > 0 and self.max_error < tol


def gradient_check(
    loss_fn: Callable,
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    epsilon: float = 1e-4,
    n_samples: int = 200,
    seed: int = 0,
    atol: float = 1e-6,
    include: tuple[tuple[str, tuple], ...] = (),
) -> GradCheck:
    """Compare ``grads`` to central differences of ``loss_fn`` in float64.

    ``loss_fn(params)`` returns the loss, or ``(loss, signature)`` where the
    signature records every branch taken (ReLU masks, loss-case selections).
    A coordinate whose two evaluations disagree in signature straddles a
    non-differentiable point; it is skipped and the next coordinate of a
    seeded permutation takes its place, until ``n_samples`` coordinates have
    been checked.  One coordinate of every tensor, plus ``include``, comes
    first.  Relative error is ``|a - n| / max(|a|, |n|, atol)``.
    """
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    names = list(work)
    sizes = np.array([work[k].size for k in names])
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    bounds = np.cumsum(sizes)
    rng = np.random.default_rng(seed)
    first = [int(s + rng.integers(0, n)) for s, n in zip(starts, sizes)]
    first += [int(starts[names.index(n)] + np.ravel_multi_index(i, work[n].shape)) for n, i in include]
    seen = set(first)
    order = first + [int(f) for f in rng.permutation(int(bounds[-1])) if int(f) not in seen]

    def evaluate():
        out = loss_fn(work)
        return out if isinstance(out, tuple) else (out, None)

    worst, checked, skipped = 0.0, 0, 0
    for f in order:
        if checked >= n_samples:
            break
        t = int(np.searchsorted(bounds, f, side="right"))
        name = names[t]
        idx = np.unravel_index(f - int(starts[t]), work[name].shape)
        arr = work[name]
        orig = arr[idx]
        arr[idx] = orig + epsilon
        up, sig_up = evaluate()
        arr[idx] = orig - epsilon
        down, sig_down = evaluate()
        arr[idx] = orig
        numeric = (float(up) - float(down)) / (2 * epsilon)
        analytic = float(grads[name][idx])
        if not (np.isfinite(numeric) and np.isfinite(analytic)):
            return GradCheck(float("inf"), checked + 1, skipped)
        if sig_up is not None and not _same_signature(sig_up, sig_down):
            skipped += 1
            continue
        checked += 1
        worst = max(worst, relative_error(analytic, numeric, atol))
    return GradCheck(worst, checked, skipped)


def _same_signature(a, b) -> bool:
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_same_signature(x, y) for x, y in zip(a, b))
    return bool(np.array_equal(a, b))


def finite_diff_check(loss_fn: Callable, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                      epsilon: float = 1e-4, n_samples: int = 200, seed: int = 0) -> float:
    """Maximum relative error of :func:`gradient_check`; ``inf`` on a non-finite loss."""
    return gradient_check(loss_fn, params, grads, epsilon, n_samples, seed).max_error
