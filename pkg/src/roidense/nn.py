"""Feedforward primitives and their backward passes.

Forward operations are pure functions of their inputs; the one exception is
``batch_norm`` in train mode, which updates the running statistics held by its
parameter block. Backward functions take the same inputs as the forward plus
the upstream gradient and return gradients for the input and every parameter,
so a network can be trained by folding backwards over its layer list.

The convolution primitive computes cross-correlation (the modern convention).
Flipping a kernel along both spatial axes turns it into the classical
signed-index convolution sum; the test suite asserts that equivalence
element-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .tensor import Tensor


@dataclass
class ConvParams:
    """Kernel stack (K, D, m, n), per-kernel bias, stride and zero padding."""
    kernels: Tensor
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        k = self.kernels.shape.n
        if k < 1:
            raise ShapeError("conv needs at least one kernel")
        if self.bias.size != k:
            raise ShapeError(
                f"bias has {self.bias.size} entries for {k} kernels")
        if self.stride < 1:
            raise DomainError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise DomainError(f"padding must be >= 0, got {self.padding}")


@dataclass
class BatchNormParams:
    """Per-channel affine parameters plus running statistics."""
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    epsilon: float = 1e-5
    momentum: float = 0.9

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64).reshape(-1)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        c = self.gamma.size
        if self.running_mean is None:
            self.running_mean = np.zeros(c)
        if self.running_var is None:
            self.running_var = np.ones(c)
        self.running_mean = np.asarray(self.running_mean, dtype=np.float64).reshape(-1)
        self.running_var = np.asarray(self.running_var, dtype=np.float64).reshape(-1)
        sizes = {self.beta.size, self.running_mean.size, self.running_var.size}
        if sizes != {c}:
            raise ShapeError("batch-norm vectors must share one channel count")
        if self.epsilon <= 0:
            raise DomainError(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 < self.momentum < 1.0:
            raise DomainError(f"momentum must be in (0, 1), got {self.momentum}")


@dataclass
class LinearParams:
    """Fully connected weight matrix (out_features, in_features) and bias."""
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2:
            raise ShapeError(f"weight must be 2-D, got {self.weight.ndim}-D")
        if self.bias.size != self.weight.shape[0]:
            raise ShapeError(
                f"bias has {self.bias.size} entries for "
                f"{self.weight.shape[0]} output features")


def conv_output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def _check_conv_geometry(x: Tensor, p: ConvParams) -> tuple[int, int]:
    _, c, h, w = x.shape
    k, d, m, n = p.kernels.shape
    if c != d:
        raise ShapeError(f"input has {c} channels, kernels expect {d}")
    oh = conv_output_extent(h, m, p.stride, p.padding)
    ow = conv_output_extent(w, n, p.stride, p.padding)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv output extent ({oh}, {ow}) not positive for input "
            f"({h}, {w}), kernel ({m}, {n}), stride {p.stride}, pad {p.padding}")
    return oh, ow


def _pad_input(data: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return data
    return np.pad(data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                  constant_values=value)


def _tap_stack(padded: np.ndarray, kh: int, kw: int, stride: int,
               oh: int, ow: int) -> np.ndarray:
    """Gather the (kh, kw) shifted views: result[i, j] = padded window tap (i, j).

    Shape (kh, kw, N, C, oh, ow); each tap is a strided copy, so downstream
    contractions are plain dense einsums.
    """
    n, c = padded.shape[:2]
    taps = np.empty((kh, kw, n, c, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            taps[i, j] = padded[:, :,
                                i:i + (oh - 1) * stride + 1:stride,
                                j:j + (ow - 1) * stride + 1:stride]
    return taps


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlate each kernel with the zero-padded input, plus bias."""
    oh, ow = _check_conv_geometry(x, p)
    _, _, m, n = p.kernels.shape
    taps = _tap_stack(_pad_input(x.data, p.padding), m, n, p.stride, oh, ow)
    # contract (K,D,m,n) x (m,n,N,D,oh,ow) over D, m, n
    out = np.tensordot(p.kernels.data, taps, axes=((1, 2, 3), (3, 0, 1)))
    out = out.transpose(1, 0, 2, 3) + p.bias[None, :, None, None]
    return Tensor(out)


def conv2d_backward(x: Tensor, p: ConvParams,
                    grad_out: Tensor) -> tuple[Tensor, Tensor, np.ndarray]:
    """Gradients of sum(grad_out * conv2d(x, p)) w.r.t. input, kernels, bias."""
    oh, ow = _check_conv_geometry(x, p)
    if grad_out.shape != (x.shape.n, p.kernels.shape.n, oh, ow):
        raise ShapeError(
            f"grad_out shape {tuple(grad_out.shape)} does not match conv "
            f"output {(x.shape.n, p.kernels.shape.n, oh, ow)}")
    _, _, m, n = p.kernels.shape
    s = p.stride
    g = grad_out.data
    padded = _pad_input(x.data, p.padding)
    taps = _tap_stack(padded, m, n, s, oh, ow)

    grad_bias = g.sum(axis=(0, 2, 3))
    # contract (N,K,oh,ow) x (m,n,N,D,oh,ow) over N, oh, ow
    grad_kernels = np.tensordot(g, taps, axes=((0, 2, 3), (2, 4, 5)))
    grad_kernels = grad_kernels.transpose(0, 3, 1, 2)

    grad_padded = np.zeros_like(padded)
    # scatter per kernel tap: each tap sees a strided slice of the padded input
    spread = np.tensordot(g, p.kernels.data, axes=((1,), (0,)))
    spread = spread.transpose(4, 5, 0, 3, 1, 2)
    for i in range(m):
        for j in range(n):
            grad_padded[:, :,
                        i:i + (oh - 1) * s + 1:s,
                        j:j + (ow - 1) * s + 1:s] += spread[i, j]
    if p.padding:
        grad_padded = grad_padded[:, :, p.padding:-p.padding, p.padding:-p.padding]
    return Tensor(grad_padded), Tensor(grad_kernels), grad_bias


def batch_norm(x: Tensor, p: BatchNormParams, mode: str = "train") -> Tensor:
    """Normalize per channel over (N, H, W); train mode updates running stats.

    ``calibrate`` mode normalizes by batch statistics like train mode but
    overwrites the running statistics with them outright; feeding a large
    representative batch through a frozen network in this mode removes the
    moving-average lag before an inference pass.
    """
    if x.shape.c != p.gamma.size:
        raise ShapeError(
            f"input has {x.shape.c} channels, parameters have {p.gamma.size}")
    if mode not in ("train", "infer", "calibrate"):
        raise DomainError(
            f"mode must be 'train', 'infer' or 'calibrate', got {mode!r}")
    if mode == "infer":
        mean = p.running_mean
        var = p.running_var
    else:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if mode == "train":
            p.running_mean = p.momentum * p.running_mean + (1 - p.momentum) * mean
            p.running_var = p.momentum * p.running_var + (1 - p.momentum) * var
        else:
            p.running_mean = mean.copy()
            p.running_var = var.copy()
    inv = 1.0 / np.sqrt(var + p.epsilon)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = p.gamma[None, :, None, None] * xhat + p.beta[None, :, None, None]
    return Tensor(out)


def batch_norm_backward(x: Tensor, p: BatchNormParams,
                        grad_out: Tensor) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Train-mode gradients (input, gamma, beta); batch stats are recomputed."""
    if grad_out.shape != x.shape:
        raise ShapeError(
            f"grad_out shape {tuple(grad_out.shape)} != input {tuple(x.shape)}")
    n, c, h, w = x.shape
    m = n * h * w
    g = grad_out.data
    mean = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + p.epsilon)
    centered = x.data - mean[None, :, None, None]
    xhat = centered * inv[None, :, None, None]

    grad_beta = g.sum(axis=(0, 2, 3))
    grad_gamma = (g * xhat).sum(axis=(0, 2, 3))
    gxhat = g * p.gamma[None, :, None, None]
    sum_gxhat = gxhat.sum(axis=(0, 2, 3))
    sum_gxhat_xhat = (gxhat * xhat).sum(axis=(0, 2, 3))
    grad_x = (inv[None, :, None, None] / m) * (
        m * gxhat
        - sum_gxhat[None, :, None, None]
        - xhat * sum_gxhat_xhat[None, :, None, None])
    return Tensor(grad_x), grad_gamma, grad_beta


def relu(x: Tensor) -> Tensor:
    return Tensor(np.maximum(x.data, 0.0))


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    """Pass gradient where x > 0; the subgradient at exactly 0 is 0."""
    if grad_out.shape != x.shape:
        raise ShapeError("relu grad_out shape mismatch")
    return Tensor(grad_out.data * (x.data > 0.0))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return Tensor(out)


def sigmoid_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    s = sigmoid(x).data
    return Tensor(grad_out.data * s * (1.0 - s))


def _check_pool_geometry(x: Tensor, window: tuple[int, int], stride: int,
                         padding: int) -> tuple[int, int]:
    _, _, h, w = x.shape
    wh, ww = window
    if wh < 1 or ww < 1 or stride < 1:
        raise DomainError("pool window and stride must be positive")
    if padding < 0 or (padding > 0 and padding >= min(wh, ww)):
        raise DomainError(
            f"pool padding {padding} must be smaller than the window")
    if wh > h + 2 * padding or ww > w + 2 * padding:
        raise ShapeError(
            f"pool window ({wh}, {ww}) larger than padded input ({h}, {w})")
    oh = conv_output_extent(h, wh, stride, padding)
    ow = conv_output_extent(w, ww, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError("pool output extent not positive")
    return oh, ow


def max_pool2d(x: Tensor, window: tuple[int, int], stride: int,
               padding: int = 0) -> tuple[Tensor, np.ndarray]:
    """Window max with recorded argmax (flat h*W + w index per (n, c) plane).

    Ties go to the lowest flat index. Padded cells never win (treated as -inf).
    """
    oh, ow = _check_pool_geometry(x, window, stride, padding)
    wh, ww = window
    _, _, h, w = x.shape
    taps = _tap_stack(_pad_input(x.data, padding, value=-np.inf),
                      wh, ww, stride, oh, ow)
    flat = taps.reshape(wh * ww, *taps.shape[2:])
    tap_idx = flat.argmax(axis=0)
    values = np.take_along_axis(flat, tap_idx[None], axis=0)[0]
    # tap (i, j) at output (oh, ow) reads input row oh*stride - pad + i
    ti, tj = np.divmod(tap_idx, ww)
    rows = np.arange(oh)[None, None, :, None] * stride - padding + ti
    cols = np.arange(ow)[None, None, None, :] * stride - padding + tj
    argmax = rows * w + cols
    return Tensor(values), argmax


def max_pool2d_backward(x: Tensor, window: tuple[int, int], stride: int,
                        argmax: np.ndarray, grad_out: Tensor,
                        padding: int = 0) -> Tensor:
    oh, ow = _check_pool_geometry(x, window, stride, padding)
    n, c, h, w = x.shape
    if grad_out.shape != (n, c, oh, ow):
        raise ShapeError("max_pool2d grad_out shape mismatch")
    grad = np.zeros((n * c, h * w))
    planes = np.repeat(np.arange(n * c), oh * ow)
    np.add.at(grad, (planes, argmax.reshape(-1)), grad_out.data.reshape(-1))
    return Tensor(grad.reshape(n, c, h, w))


def avg_pool2d(x: Tensor, window: tuple[int, int], stride: int) -> Tensor:
    oh, ow = _check_pool_geometry(x, window, stride, 0)
    wh, ww = window
    taps = _tap_stack(x.data, wh, ww, stride, oh, ow)
    return Tensor(taps.mean(axis=(0, 1)))


def avg_pool2d_backward(x: Tensor, window: tuple[int, int], stride: int,
                        grad_out: Tensor) -> Tensor:
    oh, ow = _check_pool_geometry(x, window, stride, 0)
    n, c, h, w = x.shape
    if grad_out.shape != (n, c, oh, ow):
        raise ShapeError("avg_pool2d grad_out shape mismatch")
    wh, ww = window
    share = grad_out.data / (wh * ww)
    grad = np.zeros_like(x.data)
    for i in range(wh):
        for j in range(ww):
            grad[:, :,
                 i:i + (oh - 1) * stride + 1:stride,
                 j:j + (ow - 1) * stride + 1:stride] += share
    return Tensor(grad)


def global_avg_pool(x: Tensor) -> Tensor:
    _, _, h, w = x.shape
    if h * w == 0:
        raise DomainError("global average pool over an empty spatial extent")
    return Tensor(x.data.mean(axis=(2, 3), keepdims=True))


def global_avg_pool_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if grad_out.shape != (n, c, 1, 1):
        raise ShapeError("global_avg_pool grad_out shape mismatch")
    return Tensor(np.broadcast_to(grad_out.data / (h * w), x.data.shape).copy())


def _as_rows(x: Tensor, what: str) -> np.ndarray:
    n, f, h, w = x.shape
    if (h, w) != (1, 1):
        raise ShapeError(f"{what} expects an (N, F, 1, 1) tensor, got "
                         f"{tuple(x.shape)}")
    return x.data.reshape(n, f)


def linear(x: Tensor, p: LinearParams) -> Tensor:
    """Row-wise affine map of an (N, F, 1, 1) tensor."""
    rows = _as_rows(x, "linear")
    if rows.shape[1] != p.weight.shape[1]:
        raise ShapeError(
            f"input has {rows.shape[1]} features, weight expects "
            f"{p.weight.shape[1]}")
    out = rows @ p.weight.T + p.bias
    return Tensor(out[:, :, None, None])


def linear_backward(x: Tensor, p: LinearParams,
                    grad_out: Tensor) -> tuple[Tensor, np.ndarray, np.ndarray]:
    rows = _as_rows(x, "linear")
    g = _as_rows(grad_out, "linear grad")
    if g.shape != (rows.shape[0], p.weight.shape[0]):
        raise ShapeError("linear grad_out shape mismatch")
    grad_in = g @ p.weight
    grad_weight = g.T @ rows
    grad_bias = g.sum(axis=0)
    return Tensor(grad_in[:, :, None, None]), grad_weight, grad_bias


def softmax(logits: Tensor) -> Tensor:
    """Per-sample softmax over channels of an (N, C, 1, 1) tensor.

    Max-subtraction keeps the exponentials bounded, so the outputs are exact
    under any constant shift of the logits.
    """
    z = _as_rows(logits, "softmax")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return Tensor(p[:, :, None, None])


def softmax_backward(logits: Tensor, grad_out: Tensor) -> Tensor:
    p = _as_rows(softmax(logits), "softmax")
    g = _as_rows(grad_out, "softmax grad")
    dot = (g * p).sum(axis=1, keepdims=True)
    return Tensor((p * (g - dot))[:, :, None, None])
