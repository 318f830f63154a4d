"""Encoder-decoder convolutional networks with hand-written backpropagation.

A network is an ordered list of weighted layers, each followed by its own
activation. Convolutional and transposed-convolutional layers carry no bias
(their biases are stored as fixed zeros); dense layers have a trainable bias.
Every layer reshapes its input to the shape it expects, so a dense layer can
follow a convolution and vice versa as long as the sizes agree.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linop import (ConvGeometry, ShapeError, conv2d_direct, conv2d_kernel_grad,
                    tconv2d_direct)

LAYER_KINDS = ("conv", "tconv", "dense")
ACTIVATIONS = ("identity", "relu", "leaky_relu")


@dataclass(frozen=True)
class DenseGeometry:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    geometry: ConvGeometry | DenseGeometry
    activation: str = "identity"
    slope: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unsupported layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.activation!r}")
        dense = isinstance(self.geometry, DenseGeometry)
        if dense != (self.kind == "dense"):
            raise ValueError(f"{self.kind} layer cannot use {type(self.geometry).__name__}")

    @property
    def activation_lipschitz(self) -> float:
        if self.activation == "leaky_relu":
            return max(1.0, abs(self.slope))
        return 1.0

    @property
    def in_shape(self) -> tuple[int, ...]:
        g = self.geometry
        if self.kind == "dense":
            return (g.in_features,)
        return g.input_shape if self.kind == "conv" else g.output_shape

    @property
    def out_shape(self) -> tuple[int, ...]:
        g = self.geometry
        if self.kind == "dense":
            return (g.out_features,)
        return g.output_shape if self.kind == "conv" else g.input_shape

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "dense":
            return (self.geometry.out_features, self.geometry.in_features)
        return self.geometry.kernel_shape

    @property
    def bias_shape(self) -> tuple[int, ...]:
        return (self.out_shape[0],)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        size = int(np.prod(self.input_shape))
        for i, layer in enumerate(self.layers):
            need = int(np.prod(layer.in_shape))
            if need != size:
                raise ShapeError(f"layer {i} expects {need} inputs, previous stage gives {size}")
            size = int(np.prod(layer.out_shape))
        if size != int(np.prod(self.output_shape)):
            raise ShapeError(f"last layer gives {size} outputs, output_shape is {self.output_shape}")

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def output_size(self) -> int:
        return int(np.prod(self.output_shape))


@dataclass
class NetworkParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "NetworkParams":
        return NetworkParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    batch: int
    single: bool
    token: tuple = field(repr=False, default=())


def reference_spec(input_shape=(3, 64, 32), output_shape=(32, 32),
                   widths=(4, 8, 16, 32), slope=0.1) -> NetworkSpec:
    """Desk-scale InversionNet-like encoder-decoder.

    Three stride-2 3x3 convolutions halve the (time, receiver) plane, a fourth
    convolution with a kernel spanning what is left collapses it to 1x1, then
    four transposed convolutions grow a ``H/8 x W/8`` seed up to the velocity
    map. All hidden layers use leaky ReLU; the output layer is linear.
    """
    c_in, t, r = input_shape
    h, w = output_shape
    if h % 8 or w % 8:
        raise ValueError(f"output shape {output_shape} must be divisible by 8")
    w1, w2, w3, w4 = widths
    layers = []
    chans = (c_in, w1, w2, w3)
    for i in range(3):
        g = ConvGeometry(t, r, chans[i], chans[i + 1], 3, 3, stride=2, padding=1)
        layers.append(LayerSpec("conv", g, "leaky_relu", slope))
        t, r = g.output_height, g.output_width
    layers.append(LayerSpec("conv", ConvGeometry(t, r, w3, w4, t, r, 1, 0), "leaky_relu", slope))
    hs, ws = h // 8, w // 8
    dec = (w3, w2, w1, 1)
    layers.append(LayerSpec("tconv", ConvGeometry(hs, ws, dec[0], w4, hs, ws, 1, 0),
                            "leaky_relu", slope))
    for i in range(3):
        hs, ws = hs * 2, ws * 2
        act = "identity" if i == 2 else "leaky_relu"
        g = ConvGeometry(hs, ws, dec[i + 1], dec[i], 4, 4, stride=2, padding=1)
        layers.append(LayerSpec("tconv", g, act, slope if act == "leaky_relu" else 0.0))
    return NetworkSpec(tuple(layers), tuple(input_shape), tuple(output_shape))


def _fan_in(layer: LayerSpec) -> float:
    g = layer.geometry
    if layer.kind == "dense":
        return g.in_features
    if layer.kind == "conv":
        return g.input_channels * g.kernel_height * g.kernel_width
    # each transposed-conv output receives about k*k/s^2 taps per input channel
    return max(1.0, g.output_channels * g.kernel_height * g.kernel_width / g.stride ** 2)


def init_params(spec: NetworkSpec, seed: int) -> NetworkParams:
    """Uniform(-b, b) weights with ``b = sqrt(6 / fan_in)``; zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for layer in spec.layers:
        bound = np.sqrt(6.0 / _fan_in(layer))
        weights.append(rng.uniform(-bound, bound, size=layer.weight_shape))
        biases.append(np.zeros(layer.bias_shape))
    return NetworkParams(weights, biases)


def check_params(spec: NetworkSpec, params: NetworkParams):
    if len(params.weights) != spec.depth or len(params.biases) != spec.depth:
        raise ShapeError(f"expected {spec.depth} weight/bias tensors")
    for i, layer in enumerate(spec.layers):
        if params.weights[i].shape != layer.weight_shape:
            raise ShapeError(f"layer {i}: weight shape {params.weights[i].shape} != {layer.weight_shape}")
        if params.biases[i].shape != layer.bias_shape:
            raise ShapeError(f"layer {i}: bias shape {params.biases[i].shape} != {layer.bias_shape}")


def _activate(z, layer):
    if layer.activation == "relu":
        return np.maximum(z, 0.0)
    if layer.activation == "leaky_relu":
        return np.where(z > 0, z, layer.slope * z)
    return z


def _activation_grad(z, g, layer):
    if layer.activation == "relu":
        return np.where(z > 0, g, 0.0)
    if layer.activation == "leaky_relu":
        return np.where(z > 0, g, layer.slope * g)
    return g


def _linear(layer, w, b, x):
    if layer.kind == "conv":
        return conv2d_direct(x, w, layer.geometry)
    if layer.kind == "tconv":
        return tconv2d_direct(x, w, layer.geometry)
    return x @ w.T + b


def _token(params):
    return tuple(id(w) for w in params.weights) + tuple(id(b) for b in params.biases)


def forward(params: NetworkParams, spec: NetworkSpec, x):
    """Run the network; accepts one input or a batch with a leading axis.

    Returns ``(output, cache)``; the cache feeds :func:`backward`.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape == spec.input_shape:
        single, batch = True, 1
    elif x.ndim == len(spec.input_shape) + 1 and x.shape[1:] == spec.input_shape:
        single, batch = False, x.shape[0]
    else:
        raise ShapeError(f"input shape {x.shape} does not match {spec.input_shape}")
    check_params(spec, params)
    a = x.reshape(batch, -1)
    inputs, pre = [], []
    for layer, w, b in zip(spec.layers, params.weights, params.biases):
        a = a.reshape((batch,) + layer.in_shape)
        inputs.append(a)
        z = _linear(layer, w, b, a)
        pre.append(z)
        a = _activate(z, layer)
    out = a.reshape((batch,) + spec.output_shape)
    cache = ForwardCache(inputs, pre, batch, single, _token(params))
    return (out[0] if single else out), cache


def predict(params, spec, x, batch_size=256):
    """Forward pass without keeping a cache, chunked over the batch axis."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape == spec.input_shape:
        return forward(params, spec, x)[0]
    outs = [forward(params, spec, x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0,) + spec.output_shape)


def backward(params: NetworkParams, spec: NetworkSpec, cache: ForwardCache, grad_output):
    """Gradients of ``sum(grad_output * forward(x))``.

    Returns ``(grads, input_grad)`` where ``grads`` is a NetworkParams holding
    weight and bias gradients summed over the batch. Conv-type bias gradients
    are zero because those biases are not trainable.
    """
    if cache.token != _token(params) or len(cache.pre) != spec.depth:
        raise ValueError("cache does not belong to these parameters; rerun forward")
    g = np.asarray(grad_output, dtype=np.float64)
    expect = spec.output_shape if cache.single else (cache.batch,) + spec.output_shape
    if g.shape != expect:
        raise ShapeError(f"grad_output shape {g.shape} != {expect}")
    g = g.reshape((cache.batch,) + spec.layers[-1].out_shape)
    wgrads = [None] * spec.depth
    bgrads = [None] * spec.depth
    for i in range(spec.depth - 1, -1, -1):
        layer, w = spec.layers[i], params.weights[i]
        g = _activation_grad(cache.pre[i], g.reshape(cache.pre[i].shape), layer)
        x = cache.inputs[i]
        if layer.kind == "conv":
            wgrads[i] = conv2d_kernel_grad(x, g, layer.geometry)
            bgrads[i] = np.zeros(layer.bias_shape)
            g = tconv2d_direct(g, w, layer.geometry)
        elif layer.kind == "tconv":
            wgrads[i] = conv2d_kernel_grad(g, x, layer.geometry)
            bgrads[i] = np.zeros(layer.bias_shape)
            g = conv2d_direct(g, w, layer.geometry)
        else:
            wgrads[i] = g.T @ x
            bgrads[i] = g.sum(axis=0)
            g = g @ w
        if i > 0:
            g = g.reshape((cache.batch,) + spec.layers[i - 1].out_shape)
    input_grad = g.reshape((cache.batch,) + spec.input_shape)
    if cache.single:
        input_grad = input_grad[0]
    return NetworkParams(wgrads, bgrads), input_grad


# ---------------------------------------------------------------------------
# FWB1 model files

MAGIC = b"FWB1"
VERSION = 1
_KIND_TAGS = {"conv": 0, "tconv": 1, "dense": 2}
_ACT_TAGS = {"identity": 0, "relu": 1, "leaky_relu": 2}


class ModelFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ModelVersionError(ValueError):
    pass


def _pack_shape(shape):
    return struct.pack(f"<I{len(shape)}I", len(shape), *shape)


def _pack_tensor(a):
    a = np.ascontiguousarray(a, dtype="<f8")
    return _pack_shape(a.shape) + a.tobytes()


def model_bytes(spec: NetworkSpec, params: NetworkParams) -> bytes:
    check_params(spec, params)
    out = [MAGIC, struct.pack("<II", VERSION, spec.depth),
           _pack_shape(spec.input_shape), _pack_shape(spec.output_shape)]
    for layer, w, b in zip(spec.layers, params.weights, params.biases):
        g = layer.geometry
        if layer.kind == "dense":
            fields = (g.in_features, g.out_features, 0, 0, 0, 0, 0, 0)
        else:
            fields = (g.input_height, g.input_width, g.input_channels, g.output_channels,
                      g.kernel_height, g.kernel_width, g.stride, g.padding)
        out.append(struct.pack("<B8IBd", _KIND_TAGS[layer.kind], *fields,
                               _ACT_TAGS[layer.activation], layer.slope))
        out.append(_pack_tensor(w))
        out.append(_pack_tensor(b))
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def save_model(spec: NetworkSpec, params: NetworkParams, path) -> None:
    Path(path).write_bytes(model_bytes(spec, params))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ModelFormatError("unexpected end of file", self.pos)
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def shape(self):
        (rank,) = self.take("<I")
        if rank > 8:
            raise ModelFormatError(f"implausible tensor rank {rank}", self.pos - 4)
        return self.take(f"<{rank}I")

    def tensor(self):
        shape = self.shape()
        n = int(np.prod(shape))
        if self.pos + 8 * n > len(self.data):
            raise ModelFormatError("tensor data truncated", self.pos)
        a = np.frombuffer(self.data, dtype="<f8", count=n, offset=self.pos)
        self.pos += 8 * n
        return a.astype(np.float64).reshape(shape)


def load_model(path):
    """Read an FWB1 file; returns ``(spec, params)``."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise ModelFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", 0)
    if len(data) < 16:
        raise ModelFormatError("file too short", len(data))
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.pos = 4
    version, depth = r.take("<II")
    if version != VERSION:
        raise ModelVersionError(f"model file version {version}, this build reads {VERSION}")
    if zlib.crc32(body) != crc:
        raise ModelFormatError("CRC32 mismatch", len(body))
    in_shape, out_shape = r.shape(), r.shape()
    kinds = {v: k for k, v in _KIND_TAGS.items()}
    acts = {v: k for k, v in _ACT_TAGS.items()}
    layers, weights, biases = [], [], []
    for _ in range(depth):
        start = r.pos
        tag, *fields, act, slope = r.take("<B8IBd")
        if tag not in kinds or act not in acts:
            raise ModelFormatError(f"unknown layer tag {tag} / activation {act}", start)
        kind = kinds[tag]
        try:
            geom = DenseGeometry(*fields[:2]) if kind == "dense" else ConvGeometry(*fields)
            layers.append(LayerSpec(kind, geom, acts[act], slope))
        except ValueError as exc:
            raise ModelFormatError(f"invalid layer record: {exc}", start) from exc
        weights.append(r.tensor())
        biases.append(r.tensor())
    if r.pos != len(body):
        raise ModelFormatError("trailing bytes after last layer", r.pos)
    try:
        spec = NetworkSpec(tuple(layers), tuple(in_shape), tuple(out_shape))
        params = NetworkParams(weights, biases)
        check_params(spec, params)
    except ValueError as exc:
        raise ModelFormatError(f"inconsistent model: {exc}", r.pos) from exc
    return spec, params
