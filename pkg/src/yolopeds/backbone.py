"""Data-driven backbone + head graph: config parsing, execution and weights I/O.

Config grammar (``net.cfg``), one layer per line::

    <id> <kind> [key=value ...] [inputs=a,b,...]

``#`` starts a comment.  Kinds and their keys:

    input     width, height, channels            (exactly one, first line)
    sepconv   filters, kernel (1|3|5), stride (1|2, default 1),
              activation (relu|linear|sigmoid, default relu)
    avgpool   window (default 2), stride (default 2)
    fuse-tap  factor (power of two); repeated 2x2 average pooling
    concat    two or more inputs, concatenated along channels in order
    head      grids (k); a pointwise conv emitting 6*k raw channels

Every input must name an earlier layer, so file order is a topological order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np

from yolopeds import autograd as ag
from yolopeds.tensor import (
    ACTIVATIONS,
    avg_pool,
    check_tensor,
    depthwise_conv,
    pointwise_conv,
    same_padding,
)

KINDS = ("input", "sepconv", "avgpool", "concat", "fuse-tap", "head")
VALUES_PER_PREDICTOR = 6  # x, y, w, h, objectness, class

_INT_KEYS = {"width", "height", "channels", "filters", "kernel", "stride", "window", "factor", "grids"}
_ALLOWED = {
    "input": {"width", "height", "channels"},
    "sepconv": {"filters", "kernel", "stride", "activation"},
    "avgpool": {"window", "stride"},
    "fuse-tap": {"factor"},
    "concat": set(),
    "head": {"grids"},
}


class ConfigError(ValueError):
    """A config line could not be parsed."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class GraphError(ValueError):
    """The parsed graph violates a structural invariant."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    inputs: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)
    lineno: int = field(default=0, compare=False)

    def get(self, key, default=None):
        return self.attrs.get(key, default)


@dataclass(frozen=True)
class ModelGraph:
    layers: tuple[LayerSpec, ...]
    shapes: dict  # layer id -> (channels, height, width)

    @property
    def input_layer(self) -> LayerSpec:
        return self.layers[0]

    @property
    def input_size(self) -> tuple[int, int]:
        return self.input_layer.attrs["width"], self.input_layer.attrs["height"]

    @property
    def input_channels(self) -> int:
        return self.input_layer.attrs["channels"]

    @property
    def head(self) -> LayerSpec:
        return next(l for l in self.layers if l.kind == "head")

    @property
    def grid_count(self) -> int:
        return self.head.attrs["grids"]

    @property
    def grid_size(self) -> int:
        _, h, w = self.shapes[self.head.id]
        if h != w:
            raise GraphError([f"head grid is not square: {h}x{w}"])
        return h

    def layer(self, layer_id: str) -> LayerSpec:
        for l in self.layers:
            if l.id == layer_id:
                return l
        raise KeyError(layer_id)

    def live_layers(self) -> list[LayerSpec]:
        """Layers the head depends on, in execution order."""
        needed = {self.head.id}
        for l in reversed(self.layers):
            if l.id in needed:
                needed.update(l.inputs)
        return [l for l in self.layers if l.id in needed]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for l in self.layers:
            if l.kind == "sepconv":
                c_in = self.shapes[l.inputs[0]][0]
                k = l.attrs["kernel"]
                shapes[f"{l.id}.dw"] = (c_in, k, k)
                shapes[f"{l.id}.pw"] = (l.attrs["filters"], c_in)
                shapes[f"{l.id}.b"] = (l.attrs["filters"],)
            elif l.kind == "head":
                c_in = self.shapes[l.inputs[0]][0]
                c_out = VALUES_PER_PREDICTOR * l.attrs["grids"]
                shapes[f"{l.id}.pw"] = (c_out, c_in)
                shapes[f"{l.id}.b"] = (c_out,)
        return shapes


def param_count(graph: ModelGraph) -> int:
    return sum(math.prod(s) for s in graph.param_shapes().values())


def _parse_value(key: str, raw: str, lineno: int):
    if key in _INT_KEYS:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(lineno, f"{key} must be an integer, got {raw!r}") from None
    return raw


def parse_config(text: str) -> ModelGraph:
    layers = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) < 2:
            raise ConfigError(lineno, f"expected '<id> <kind> ...', got {line!r}")
        layer_id, kind, *rest = tokens
        if kind not in KINDS:
            raise ConfigError(lineno, f"unknown layer kind {kind!r}")
        attrs, inputs = {}, ()
        for tok in rest:
            if "=" not in tok:
                raise ConfigError(lineno, f"expected key=value, got {tok!r}")
            key, raw = tok.split("=", 1)
            if key == "inputs":
                inputs = tuple(s for s in raw.split(",") if s)
            elif key in _ALLOWED[kind]:
                attrs[key] = _parse_value(key, raw, lineno)
            else:
                raise ConfigError(lineno, f"{kind} layer does not accept key {key!r}")
        layers.append(LayerSpec(layer_id, kind, inputs, attrs, lineno))
    return build_graph(layers)


def load_config(path: str | Path) -> ModelGraph:
    return parse_config(Path(path).read_text())


def builtin_config(name: str) -> str:
    """Text of a shipped config: ``yolopeds``, ``yolopeds-toy`` or ``mini``."""
    return resources.files("yolopeds.configs").joinpath(f"{name}.cfg").read_text()


def _with_defaults(l: LayerSpec) -> LayerSpec:
    defaults = {
        "sepconv": {"stride": 1, "activation": "relu"},
        "avgpool": {"window": 2, "stride": 2},
        "input": {"channels": 3},
    }.get(l.kind, {})
    return replace(l, attrs={**defaults, **l.attrs})


def _layer_shape(l: LayerSpec, shapes: dict) -> tuple[int, int, int]:
    a = l.attrs
    if l.kind == "input":
        for key in ("width", "height"):
            if key not in a:
                raise ValueError(f"missing {key}")
        return a["channels"], a["height"], a["width"]

    srcs = [shapes[i] for i in l.inputs]
    if l.kind == "concat":
        if len(srcs) < 2:
            raise ValueError("concat needs at least two inputs")
        if len({s[1:] for s in srcs}) != 1:
            raise ValueError(f"spatial mismatch between concat inputs {list(l.inputs)}: {srcs}")
        return sum(s[0] for s in srcs), srcs[0][1], srcs[0][2]
    if len(srcs) != 1:
        raise ValueError(f"{l.kind} takes exactly one input, got {len(srcs)}")
    c, h, w = srcs[0]

    if l.kind == "sepconv":
        if "filters" not in a or "kernel" not in a:
            raise ValueError("sepconv needs filters and kernel")
        if a["kernel"] not in (1, 3, 5):
            raise ValueError(f"kernel must be 1, 3 or 5, got {a['kernel']}")
        if a["stride"] not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {a['stride']}")
        if a["activation"] not in ACTIVATIONS:
            raise ValueError(f"unknown activation {a['activation']!r}")
        if a["filters"] < 1:
            raise ValueError("filters must be positive")
        s = a["stride"]
        return a["filters"], same_padding(h, a["kernel"], s)[0], same_padding(w, a["kernel"], s)[0]
    if l.kind == "avgpool":
        s, win = a["stride"], a["window"]
        if s < 1 or win < 1 or h % s or w % s or (h // s - 1) * s + win > h or (w // s - 1) * s + win > w:
            raise ValueError(f"pooling window={win} stride={s} does not tile a {h}x{w} input")
        return c, h // s, w // s
    if l.kind == "fuse-tap":
        f = a.get("factor")
        if not f or f & (f - 1):
            raise ValueError(f"factor must be a power of two, got {f}")
        if h % f or w % f:
            raise ValueError(f"factor {f} does not divide a {h}x{w} input")
        return c, h // f, w // f
    if l.kind == "head":
        if a.get("grids", 0) < 1:
            raise ValueError("head needs grids >= 1")
        return VALUES_PER_PREDICTOR * a["grids"], h, w
    raise ValueError(f"unknown kind {l.kind}")


def build_graph(layers) -> ModelGraph:
    """Validate layer specs and infer every layer's output shape."""
    layers = [_with_defaults(l) for l in layers]
    errors = []
    if not any(l.kind == "head" for l in layers):
        errors.append("no head layer")
    heads = [l.id for l in layers if l.kind == "head"]
    if len(heads) > 1:
        errors.append(f"exactly one head layer allowed, found {heads}")
    if not layers or layers[0].kind != "input":
        errors.append("first layer must be the input layer")
    if sum(l.kind == "input" for l in layers) > 1:
        errors.append("more than one input layer")
    if errors:
        raise GraphError(errors)

    shapes: dict = {}
    for l in layers:
        if l.id in shapes:
            errors.append(f"layer {l.id}: duplicate id")
            continue
        missing = [i for i in l.inputs if i not in shapes]
        if missing:
            errors.append(f"layer {l.id}: input(s) {missing} not defined by an earlier layer")
            continue
        try:
            shapes[l.id] = _layer_shape(l, shapes)
        except ValueError as exc:
            errors.append(f"layer {l.id}: {exc}")
    if errors:
        raise GraphError(errors)
    graph = ModelGraph(tuple(layers), shapes)
    _, h, w = shapes[graph.head.id]
    if h != w:
        raise GraphError([f"layer {graph.head.id}: head grid must be square, got {h}x{w}"])
    return graph


def format_config(graph: ModelGraph) -> str:
    lines = []
    for l in graph.layers:
        parts = [l.id, l.kind] + [f"{k}={v}" for k, v in l.attrs.items()]
        if l.inputs:
            parts.append("inputs=" + ",".join(l.inputs))
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def scale_widths(graph: ModelGraph, divisor: int) -> ModelGraph:
    """Divide every sepconv filter count by ``divisor`` (head untouched)."""
    layers = [
        replace(l, attrs={**l.attrs, "filters": max(1, l.attrs["filters"] // divisor)})
        if l.kind == "sepconv" else l
        for l in graph.layers
    ]
    return build_graph(layers)


def adapt_graph(graph: ModelGraph, grid_size: int | None = None, grid_count: int | None = None) -> ModelGraph:
    """Change the head's grid count and/or pool its input down to ``grid_size``."""
    layers = list(graph.layers)
    head_idx = next(i for i, l in enumerate(layers) if l.kind == "head")
    head = layers[head_idx]
    if grid_count is not None:
        head = replace(head, attrs={**head.attrs, "grids": grid_count})
    if grid_size is not None and grid_size != graph.grid_size:
        natural = graph.grid_size
        factor = natural // grid_size if grid_size > 0 else 0
        if grid_size < 1 or natural % grid_size or factor & (factor - 1):
            raise GraphError([
                f"grid size {grid_size} is not reachable from the {natural}x{natural} head input "
                "by 2x2 average pooling"
            ])
        tap = LayerSpec(f"{head.id}_pool", "fuse-tap", head.inputs, {"factor": factor})
        layers.insert(head_idx, tap)
        head_idx += 1
        head = replace(head, inputs=(tap.id,))
    layers[head_idx] = head
    return build_graph(layers)


def _values(params: Mapping) -> dict[str, np.ndarray]:
    return {k: (v.value if isinstance(v, ag.Parameter) else v) for k, v in params.items()}


def check_params(graph: ModelGraph, params: Mapping) -> None:
    values = _values(params)
    for name, shape in graph.param_shapes().items():
        layer = name.rsplit(".", 1)[0]
        if name not in values:
            raise GraphError([f"layer {layer}: missing parameter {name}"])
        if tuple(values[name].shape) != tuple(shape):
            raise GraphError([
                f"layer {layer}: parameter {name} has shape {tuple(values[name].shape)}, "
                f"graph expects {tuple(shape)}"
            ])


def forward(graph: ModelGraph, params: Mapping, image: np.ndarray, cache: dict | None = None) -> np.ndarray:
    """Run the graph on a batch of images and return the raw head tensor.

    Pass a dict as ``cache`` to keep the activations needed by :func:`backward`.
    """
    check_tensor(image, "image")
    w, h = graph.input_size
    if image.shape[1:] != (graph.input_channels, h, w):
        raise ValueError(
            f"image shape {image.shape[1:]} does not match graph input "
            f"{(graph.input_channels, h, w)}"
        )
    check_params(graph, params)
    p = _values(params)
    dtype = image.dtype
    acts: dict = {}
    for l in graph.live_layers():
        a = l.attrs
        if l.kind == "input":
            out = image
        elif l.kind == "sepconv":
            x = acts[l.inputs[0]]
            d = depthwise_conv(x, p[f"{l.id}.dw"].astype(dtype, copy=False), a["stride"])
            z = pointwise_conv(d, p[f"{l.id}.pw"].astype(dtype, copy=False), p[f"{l.id}.b"].astype(dtype, copy=False))
            out = ACTIVATIONS[a["activation"]](z)
            if cache is not None:
                cache[l.id + ":dw"] = d
        elif l.kind == "avgpool":
            out = avg_pool(acts[l.inputs[0]], a["window"], a["stride"])
        elif l.kind == "fuse-tap":
            out = acts[l.inputs[0]]
            for _ in range(int(math.log2(a["factor"]))):
                out = avg_pool(out, 2, 2)
        elif l.kind == "concat":
            out = np.concatenate([acts[i] for i in l.inputs], axis=1)
        else:  # head
            x = acts[l.inputs[0]]
            out = pointwise_conv(x, p[f"{l.id}.pw"].astype(dtype, copy=False), p[f"{l.id}.b"].astype(dtype, copy=False))
        acts[l.id] = out
    if cache is not None:
        cache.update(acts)
    return acts[graph.head.id]


def relu_masks(graph: ModelGraph, cache: dict) -> list[np.ndarray]:
    """Which units of each ReLU layer were active in the cached forward pass."""
    return [cache[l.id] > 0 for l in graph.live_layers()
            if l.kind == "sepconv" and l.attrs["activation"] == "relu"]


def backward(graph: ModelGraph, params: Mapping, cache: dict, grad_head: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given d loss / d head."""
    p = _values(params)
    grads: dict[str, np.ndarray] = {}
    upstream: dict[str, np.ndarray] = {graph.head.id: grad_head}

    def send(layer_id, g):
        if layer_id in upstream:
            upstream[layer_id] = upstream[layer_id] + g
        else:
            upstream[layer_id] = g

    for l in reversed(graph.live_layers()):
        g = upstream.pop(l.id, None)
        if g is None or l.kind == "input":
            continue
        a = l.attrs
        if l.kind == "head":
            x = cache[l.inputs[0]]
            gx, grads[f"{l.id}.pw"], grads[f"{l.id}.b"] = ag.pointwise_conv_backward(
                x, p[f"{l.id}.pw"], g)
            send(l.inputs[0], gx)
        elif l.kind == "sepconv":
            y = cache[l.id]
            if a["activation"] == "relu":
                g = np.where(y > 0, g, 0).astype(g.dtype, copy=False)
            elif a["activation"] == "sigmoid":
                g = g * y * (1 - y)
            d = cache[l.id + ":dw"]
            gd, grads[f"{l.id}.pw"], grads[f"{l.id}.b"] = ag.pointwise_conv_backward(
                d, p[f"{l.id}.pw"], g)
            x = cache[l.inputs[0]]
            gx, grads[f"{l.id}.dw"] = ag.depthwise_conv_backward(x, p[f"{l.id}.dw"], a["stride"], gd)
            send(l.inputs[0], gx)
        elif l.kind == "avgpool":
            x = cache[l.inputs[0]]
            send(l.inputs[0], ag.avg_pool_backward(x.shape, g, a["window"], a["stride"]))
        elif l.kind == "fuse-tap":
            n, c, h, w = cache[l.inputs[0]].shape
            for level in reversed(range(int(math.log2(a["factor"])))):
                s = 2 ** level
                g = ag.avg_pool_backward((n, c, h // s, w // s), g)
            send(l.inputs[0], g)
        elif l.kind == "concat":
            start = 0
            for i in l.inputs:
                c = cache[i].shape[1]
                send(i, g[:, start:start + c])
                start += c
    for name, shape in graph.param_shapes().items():
        if name not in grads:
            grads[name] = np.zeros(shape, dtype=grad_head.dtype)
    return grads


_PWTS_MAGIC = b"PWTS"


def write_weights(path: str | Path, params: Mapping) -> None:
    """Serialise named tensors to a PWTS v1 file (little-endian)."""
    values = _values(params)
    chunks = [_PWTS_MAGIC, struct.pack("<BI", 1, len(values))]
    for name, arr in values.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_weights(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != _PWTS_MAGIC:
        raise ValueError(f"{path}: not a PWTS file (magic {raw[:4]!r})")
    try:
        version, count = struct.unpack_from("<BI", raw, 4)
        if version != 1:
            raise ValueError(f"{path}: unsupported PWTS version {version}")
        pos = 9
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 1)
            pos += 1 + 4 * ndim
            nbytes = 4 * math.prod(shape)
            if pos + nbytes > len(raw):
                raise ValueError(f"{path}: tensor {name!r} is truncated")
            out[name] = np.frombuffer(raw, dtype="<f4", count=math.prod(shape), offset=pos).astype(
                np.float32).reshape(shape)
            pos += nbytes
    except struct.error as exc:
        raise ValueError(f"{path}: truncated PWTS file ({exc})") from None
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return out
