"""Densely connected classifier networks.

A network is an ordered list of layers evaluated as a pure fold; the backward
pass is the reverse fold, with each layer caching what it needs from its last
forward. Dense blocks concatenate the block input with every preceding
layer's output along the channel axis, so the backward pass splits the
incoming gradient into channel bands and sums the contribution each band
receives from every downstream consumer.

Checkpoint format: the magic bytes ``RDNS1``, a uint64 length, the canonical
key-sorted JSON config, then a tensor block (uint64 count + records) holding
every state array in layer order. Arrays with fewer than four axes are stored
left-padded with unit extents.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .errors import ConfigError, ParseError, ShapeError
from .rng import RandomSource
from .tensor import (Shape, Tensor, concat_channels, read_tensor_block,
                     write_tensor_block)

CHECKPOINT_MAGIC = b"RDNS1"


@dataclass(frozen=True)
class DenseNetConfig:
    """One architecture row: growth rate, per-block layer counts, compression."""
    growth_rate: int = 32
    block_layers: tuple[int, ...] = (6, 12, 24, 16)
    compression: float = 0.5
    init_channels: int | None = None
    num_classes: int = 1000
    input_size: tuple[int, int] = (224, 224)
    in_channels: int = 3
    bottleneck_width: int = 4

    def __post_init__(self):
        if self.growth_rate < 1 or self.bottleneck_width < 1:
            raise ConfigError(f"growth/bottleneck must be positive: {self}")
        if not self.block_layers or any(l < 1 for l in self.block_layers):
            raise ConfigError(f"block_layers must be positive: {self.block_layers}")
        if not 0.0 < self.compression <= 1.0:
            raise ConfigError(f"compression must be in (0, 1]: {self.compression}")
        if self.num_classes < 1 or self.in_channels < 1:
            raise ConfigError(f"class/channel counts must be positive: {self}")
        object.__setattr__(self, "block_layers", tuple(self.block_layers))
        object.__setattr__(self, "input_size", tuple(self.input_size))

    @property
    def stem_channels(self) -> int:
        return self.init_channels if self.init_channels else 2 * self.growth_rate


def densenet121(**overrides) -> DenseNetConfig:
    return DenseNetConfig(block_layers=(6, 12, 24, 16), **overrides)


def densenet169(**overrides) -> DenseNetConfig:
    return DenseNetConfig(block_layers=(6, 12, 32, 32), **overrides)


def densenet201(**overrides) -> DenseNetConfig:
    return DenseNetConfig(block_layers=(6, 12, 48, 32), **overrides)


def densenet264(**overrides) -> DenseNetConfig:
    return DenseNetConfig(block_layers=(6, 12, 64, 48), **overrides)


def micro_config(**overrides) -> DenseNetConfig:
    """Desk-scale configuration trainable on one CPU core."""
    defaults = dict(growth_rate=8, block_layers=(2, 2), num_classes=2,
                    input_size=(64, 64), in_channels=1)
    defaults.update(overrides)
    return DenseNetConfig(**defaults)


class Param:
    """A named trainable array with its gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Param({self.name}, shape={self.value.shape})"


class Layer:
    """Common layer interface: forward caches, backward consumes the cache."""

    name: str

    def forward(self, x: Tensor, mode: str = "infer") -> Tensor:
        raise NotImplementedError

    def backward(self, grad: Tensor) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> list[Param]:
        return []

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        """Non-trainable state that still belongs in a checkpoint."""
        return []

    def load_buffers(self, arrays: list[np.ndarray]) -> None:
        if arrays:
            raise ShapeError(f"layer {self.name} takes no buffers")

    def output_shape(self, s: Shape) -> Shape:
        raise NotImplementedError


class Conv(Layer):
    def __init__(self, name: str, in_channels: int, out_channels: int,
                 kernel: int, stride: int, padding: int, rng: RandomSource):
        self.name = name
        fan_in = in_channels * kernel * kernel
        scale = np.sqrt(2.0 / fan_in)
        weights = rng.normals(out_channels * fan_in, std=scale)
        self.weight = Param(f"{name}.weight",
                            weights.reshape(out_channels, in_channels, kernel, kernel))
        self.bias = Param(f"{name}.bias", np.zeros(out_channels))
        self.stride = stride
        self.padding = padding
        self._x: Tensor | None = None

    def _params_view(self) -> nn.ConvParams:
        return nn.ConvParams(Tensor(self.weight.value), self.bias.value,
                             stride=self.stride, padding=self.padding)

    def forward(self, x: Tensor, mode: str = "infer") -> Tensor:
        self._x = x
        return nn.conv2d(x, self._params_view())

    def backward(self, grad: Tensor) -> Tensor:
        gx, gw, gb = nn.conv2d_backward(self._x, self._params_view(), grad)
        self.weight.grad += gw.data
        self.bias.grad += gb
        return gx

    def parameters(self) -> list[Param]:
        return [self.weight, self.bias]

    def output_shape(self, s: Shape) -> Shape:
        k = self.weight.value.shape[2]
        oh = nn.conv_output_extent(s.h, k, self.stride, self.padding)
        ow = nn.conv_output_extent(s.w, k, self.stride, self.padding)
        if s.c != self.weight.value.shape[1] or oh < 1 or ow < 1:
            raise ConfigError(
                f"layer {self.name}: cannot map shape {tuple(s)} "
                f"(kernel {self.weight.value.shape}, stride {self.stride}, "
                f"pad {self.padding})")
        return Shape(s.n, self.weight.value.shape[0], oh, ow)


class BatchNorm(Layer):
    def __init__(self, name: str, channels: int,
                 epsilon: float = 1e-5, momentum: float = 0.9):
        self.name = name
        self.gamma = Param(f"{name}.gamma", np.ones(channels))
        self.beta = Param(f"{name}.beta", np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.epsilon = epsilon
        self.momentum = momentum
        self._x: Tensor | None = None
        self._mode = "infer"

    def _params_view(self) -> nn.BatchNormParams:
        return nn.BatchNormParams(self.gamma.value, self.beta.value,
                                  self.running_mean, self.running_var,
                                  epsilon=self.epsilon, momentum=self.momentum)

    def forward(self, x: Tensor, mode: str = "infer") -> Tensor:
        self._x = x
        self._mode = mode
        p = self._params_view()
        out = nn.batch_norm(x, p, mode)
        if mode in ("train", "calibrate"):
            self.running_mean = p.running_mean
            self.running_var = p.running_var
        return out

    def backward(self, grad: Tensor) -> Tensor:
        if self._mode in ("train", "calibrate"):
            gx, gg, gb = nn.batch_norm_backward(self._x, self._params_view(), grad)
        else:
            inv = 1.0 / np.sqrt(self.running_var + self.epsilon)
            xhat = (self._x.data - self.running_mean[None, :, None, None]) \
                * inv[None, :, None, None]
            gb = grad.data.sum(axis=(0, 2, 3))
            gg = (grad.data * xhat).sum(axis=(0, 2, 3))
            gx = Tensor(grad.data * (self.gamma.value * inv)[None, :, None, None])
        self.gamma.grad += gg
        self.beta.grad += gb
        return gx

    def parameters(self) -> list[Param]:
        return [self.gamma, self.beta]

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{self.name}.running_mean", self.running_mean),
                (f"{self.name}.running_var", self.running_var)]

    def load_buffers(self, arrays: list[np.ndarray]) -> None:
        mean, var = arrays
        self.running_mean = mean.reshape(self.running_mean.shape).copy()
        self.running_var = var.reshape(self.running_var.shape).copy()

    def output_shape(self, s: Shape) -> Shape:
        if s.c != self.gamma.value.size:
            raise ConfigError(f"layer {self.name}: {s.c} channels, "
                              f"expected {self.gamma.value.size}")
        return s


class ReLU(Layer):
    def __init__(self, name: str):
        self.name = name
        self._x: Tensor | None = None

    def forward(self, x: Tensor, mode: str = "infer") -> Tensor:
        self._x = x
        return nn.relu(x)

    def backward(self, grad: Tensor) -> Tensor:
        return nn.relu_backward(self._x, grad)

    def output_shape(self, s: Shape) -> Shape:
        return s


class MaxPool(Layer):
    def __init__(self, name: str, window: int, stride: int, padding: int = 0):
        self.name = name
        self.window = (window, window)
        self.stride = stride
        self.padding = padding
        self._x: Tensor | None = None
        self._argmax: np.ndarray | None = None

    def forward(self, x: Tensor, mode: str = "infer") -> Tensor:
        self._x = x
        out, self._argmax = nn.max_pool2d(x, self.window, self.stride, self.padding)
        return out

    def backward(self, grad: Tensor) -> Tensor:
        return nn.max_pool2d_backward(self._x, self.window, self.stride,
                                      self._argmax, grad, self.padding)

    def output_shape(self, s: Shape) -> Shape:
        oh = nn.conv_output_extent(s.h, self.window[0], self.stride, self.padding)
        ow = nn.conv_output_extent(s.w, self.window[1], self.stride, self.padding)
        if oh < 1 or ow < 1:
            raise ConfigError(f"layer {self.name}: pooled extent underflow "
                              f"from {tuple(s)}")
        return Shape(s.n, s.c, oh, ow)


class AvgPool(Layer):
    def __init__(self, name: str, window: int, stride: int):
        self.name = name
        self.window = (window, window)
        self.stride = stride
        self._x: Tensor | None = None

    def forward(self, x: Tensor, mode: str = "infer") -> Tensor:
        self._x = x
        return nn.avg_pool2d(x, self.window, self.stride)

    def backward(self, grad: Tensor) -> Tensor:
        return nn.avg_pool2d_backward(self._x, self.window, self.stride, grad)

    def output_shape(self, s: Shape) -> Shape:
        oh = nn.conv_output_extent(s.h, self.window[0], self.stride, 0)
        ow = nn.conv_output_extent(s.w, self.window[1], self.stride, 0)
        if oh < 1 or ow < 1:
            raise ConfigError(f"layer {self.name}: pooled extent underflow "
                              f"from {tuple(s)}")
        return Shape(s.n, s.c, oh, ow)


class GlobalAvgPool(Layer):
    def __init__(self, name: str):
        self.name = name
        self._x: Tensor | None = None

    def forward(self, x: Tensor, mode: str = "infer") -> Tensor:
        self._x = x
        return nn.global_avg_pool(x)

    def backward(self, grad: Tensor) -> Tensor:
        return nn.global_avg_pool_backward(self._x, grad)

    def output_shape(self, s: Shape) -> Shape:
        return Shape(s.n, s.c, 1, 1)


class Linear(Layer):
    def __init__(self, name: str, in_features: int, out_features: int,
                 rng: RandomSource):
        self.name = name
        scale = np.sqrt(2.0 / in_features)
        self.weight = Param(f"{name}.weight",
                            rng.normals(out_features * in_features, std=scale)
                            .reshape(out_features, in_features))
        self.bias = Param(f"{name}.bias", np.zeros(out_features))
        self._x: Tensor | None = None

    def _params_view(self) -> nn.LinearParams:
        return nn.LinearParams(self.weight.value, self.bias.value)

    def forward(self, x: Tensor, mode: str = "infer") -> Tensor:
        self._x = x
        return nn.linear(x, self._params_view())

    def backward(self, grad: Tensor) -> Tensor:
        gx, gw, gb = nn.linear_backward(self._x, self._params_view(), grad)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx

    def parameters(self) -> list[Param]:
        return [self.weight, self.bias]

    def output_shape(self, s: Shape) -> Shape:
        if (s.h, s.w) != (1, 1) or s.c != self.weight.value.shape[1]:
            raise ConfigError(
                f"layer {self.name}: expected (N, {self.weight.value.shape[1]}, "
                f"1, 1), got {tuple(s)}")
        return Shape(s.n, self.weight.value.shape[0], 1, 1)


class Sequential(Layer):
    """A chain of layers treated as one composite layer."""

    def __init__(self, name: str, layers: Sequence[Layer]):
        self.name = name
        self.layers = list(layers)

    def forward(self, x: Tensor, mode: str = "infer") -> Tensor:
        for layer in self.layers:
            x = layer.forward(x, mode)
        return x

    def backward(self, grad: Tensor) -> Tensor:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def parameters(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return [b for layer in self.layers for b in layer.buffers()]

    def load_buffers(self, arrays: list[np.ndarray]) -> None:
        i = 0
        for layer in self.layers:
            n = len(layer.buffers())
            layer.load_buffers(arrays[i:i + n])
            i += n

    def output_shape(self, s: Shape) -> Shape:
        for layer in self.layers:
            s = layer.output_shape(s)
        return s


def make_dense_unit(name: str, in_channels: int, growth_rate: int,
                    bottleneck_width: int, rng: RandomSource) -> Sequential:
    """One dense layer: BN-ReLU-Conv1x1 (bottleneck) then BN-ReLU-Conv3x3."""
    mid = bottleneck_width * growth_rate
    return Sequential(name, [
        BatchNorm(f"{name}.bn1", in_channels),
        ReLU(f"{name}.relu1"),
        Conv(f"{name}.conv1", in_channels, mid, kernel=1, stride=1, padding=0,
             rng=rng),
        BatchNorm(f"{name}.bn2", mid),
        ReLU(f"{name}.relu2"),
        Conv(f"{name}.conv2", mid, growth_rate, kernel=3, stride=1, padding=1,
             rng=rng),
    ])


class DenseBlock(Layer):
    """L dense units; unit i consumes the concat of the block input and all
    previous unit outputs, and the block output is the full concatenation."""

    def __init__(self, name: str, in_channels: int, num_units: int,
                 growth_rate: int, bottleneck_width: int, rng: RandomSource):
        self.name = name
        self.in_channels = in_channels
        self.growth_rate = growth_rate
        self.units = [
            make_dense_unit(f"{name}.unit{i + 1}",
                            in_channels + i * growth_rate,
                            growth_rate, bottleneck_width, rng)
            for i in range(num_units)
        ]

    def forward(self, x: Tensor, mode: str = "infer") -> Tensor:
        feats = x
        for unit in self.units:
            out = unit.forward(feats, mode)
            feats = concat_channels([feats, out])
        return feats

    def backward(self, grad: Tensor) -> Tensor:
        k = self.growth_rate
        for i in reversed(range(len(self.units))):
            prefix = self.in_channels + i * k
            g_prefix = Tensor(grad.data[:, :prefix].copy())
            g_unit = Tensor(grad.data[:, prefix:prefix + k].copy())
            g_in = self.units[i].backward(g_unit)
            grad = Tensor(g_prefix.data + g_in.data)
        return grad

    def parameters(self) -> list[Param]:
        return [p for unit in self.units for p in unit.parameters()]

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return [b for unit in self.units for b in unit.buffers()]

    def load_buffers(self, arrays: list[np.ndarray]) -> None:
        i = 0
        for unit in self.units:
            n = len(unit.buffers())
            unit.load_buffers(arrays[i:i + n])
            i += n

    def output_shape(self, s: Shape) -> Shape:
        if s.c != self.in_channels:
            raise ConfigError(f"layer {self.name}: {s.c} channels, "
                              f"expected {self.in_channels}")
        for i, unit in enumerate(self.units):
            unit_out = unit.output_shape(Shape(s.n, s.c + i * self.growth_rate,
                                               s.h, s.w))
            if (unit_out.h, unit_out.w) != (s.h, s.w):
                raise ConfigError(f"layer {self.name}: unit {i} changed the "
                                  f"spatial extents")
        return Shape(s.n, s.c + len(self.units) * self.growth_rate, s.h, s.w)


def make_transition(name: str, in_channels: int, compression: float,
                    rng: RandomSource) -> Sequential:
    """Channel compression (BN-ReLU-Conv1x1 to floor(theta*C)) + 2x2 avg pool."""
    out_channels = int(np.floor(compression * in_channels))
    if out_channels < 1:
        raise ConfigError(
            f"transition {name}: compression {compression} of {in_channels} "
            f"channels leaves none")
    return Sequential(name, [
        BatchNorm(f"{name}.bn", in_channels),
        ReLU(f"{name}.relu"),
        Conv(f"{name}.conv", in_channels, out_channels, kernel=1, stride=1,
             padding=0, rng=rng),
        AvgPool(f"{name}.pool", window=2, stride=2),
    ])


class Network:
    """An ordered layer list plus the config it was built from."""

    def __init__(self, config: DenseNetConfig, layers: Sequence[Layer]):
        self.config = config
        self.layers = list(layers)

    def forward(self, x: Tensor, mode: str = "infer") -> Tensor:
        for layer in self.layers:
            x = layer.forward(x, mode)
        return x

    def backward(self, grad: Tensor) -> Tensor:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def parameters(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.parameters()]

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.grad[...] = 0.0

    def shape_trace(self, batch: int = 1) -> list[tuple[str, Shape]]:
        """Per-layer output shapes, recomputed from the config alone."""
        h, w = self.config.input_size
        s = Shape(batch, self.config.in_channels, h, w)
        trace = []
        for layer in self.layers:
            s = layer.output_shape(s)
            trace.append((layer.name, s))
        return trace

    def state(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for layer in self.layers:
            out.extend((p.name, p.value) for p in layer.parameters())
            out.extend(layer.buffers())
        return out

    def load_state(self, arrays: Sequence[np.ndarray]) -> None:
        arrays = list(arrays)
        entries = self.state()
        if len(arrays) != len(entries):
            raise ShapeError(f"checkpoint holds {len(arrays)} arrays, "
                             f"network has {len(entries)}")
        for layer in self.layers:
            params = layer.parameters()
            nb = len(layer.buffers())
            take = len(params) + nb
            chunk, arrays = list(arrays[:take]), arrays[take:]
            for p, arr in zip(params, chunk[:len(params)]):
                if arr.size != p.value.size:
                    raise ShapeError(f"array for {p.name} has {arr.size} "
                                     f"values, expected {p.value.size}")
                p.value[...] = arr.reshape(p.value.shape)
            layer.load_buffers([a for a in chunk[len(params):]])


def build_densenet(cfg: DenseNetConfig, seed: int = 0) -> Network:
    """Stem, alternating dense blocks and transitions, then the classifier."""
    rng = RandomSource(seed)
    stem_c = cfg.stem_channels
    layers: list[Layer] = [
        Conv("stem_conv", cfg.in_channels, stem_c, kernel=7, stride=2,
             padding=3, rng=rng),
        BatchNorm("stem_bn", stem_c),
        ReLU("stem_relu"),
        MaxPool("stem_pool", window=3, stride=2, padding=1),
    ]
    channels = stem_c
    for b, num_units in enumerate(cfg.block_layers, start=1):
        block = DenseBlock(f"block{b}", channels, num_units, cfg.growth_rate,
                           cfg.bottleneck_width, rng)
        layers.append(block)
        channels += num_units * cfg.growth_rate
        if b < len(cfg.block_layers):
            layers.append(make_transition(f"trans{b}", channels,
                                          cfg.compression, rng))
            channels = int(np.floor(cfg.compression * channels))
    layers.extend([
        BatchNorm("final_bn", channels),
        ReLU("final_relu"),
        GlobalAvgPool("global_pool"),
        Linear("classifier", channels, cfg.num_classes, rng),
    ])
    net = Network(cfg, layers)
    net.shape_trace()  # raises ConfigError naming the layer on underflow
    return net


def network_forward(net: Network, x: Tensor, mode: str = "infer") -> Tensor:
    return net.forward(x, mode)


def network_backward(net: Network, grad_logits: Tensor) -> Tensor:
    """Accumulate parameter gradients; returns the gradient at the input."""
    return net.backward(grad_logits)


def count_parameters(net: Network) -> int:
    return sum(p.value.size for p in net.parameters())


# ---------------------------------------------------------------------------
# Checkpoints


def _pad_to_4d(arr: np.ndarray) -> Tensor:
    shape = arr.shape
    if len(shape) > 4:
        raise ShapeError(f"cannot store a {len(shape)}-axis array")
    padded = (1,) * (4 - len(shape)) + shape
    return Tensor(arr.reshape(padded))


def write_checkpoint(path: str | Path, meta: dict,
                     arrays: Sequence[np.ndarray]) -> None:
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(np.asarray([len(blob)], dtype="<u8").tobytes())
        fh.write(blob)
        write_tensor_block(fh, [_pad_to_4d(a) for a in arrays])


def read_checkpoint(path: str | Path) -> tuple[dict, list[np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ParseError(f"bad checkpoint magic {magic!r}", offset=0)
        header = fh.read(8)
        if len(header) < 8:
            raise ParseError("truncated checkpoint header",
                             offset=len(CHECKPOINT_MAGIC) + len(header))
        size = int(np.frombuffer(header, dtype="<u8")[0])
        blob = fh.read(size)
        if len(blob) < size:
            raise ParseError("truncated checkpoint config",
                             offset=len(CHECKPOINT_MAGIC) + 8 + len(blob))
        meta = json.loads(blob.decode())
        tensors = read_tensor_block(fh)
    return meta, [t.data for t in tensors]


def save_network(path: str | Path, net: Network) -> None:
    meta = {"kind": "classifier", "config": asdict(net.config)}
    write_checkpoint(path, meta, [arr for _, arr in net.state()])


def load_network(path: str | Path) -> Network:
    meta, arrays = read_checkpoint(path)
    if meta.get("kind") != "classifier":
        raise ParseError(f"checkpoint kind {meta.get('kind')!r} is not a "
                         f"classifier")
    cfg = DenseNetConfig(**meta["config"])
    net = build_densenet(cfg, seed=0)
    net.load_state(arrays)
    return net
