"""Dense 4-axis tensor type, its binary record format, and a finite-difference
gradient checker.

Every value flowing between modules is a ``Tensor``: a (batch, channel,
height, width) array of doubles in row-major order. Tensors are treated as
immutable values; operations return new tensors and never alias their inputs'
storage unless documented.

Binary record format (little endian): four uint64 extents (N, C, H, W)
followed by N*C*H*W float64 payload values. ``write_tensor_block`` prefixes a
uint64 record count; checkpoints and dataset files are built from these
blocks.
"""

from __future__ import annotations

import math
from typing import BinaryIO, Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DomainError, NumericError, ParseError, ShapeError

_AXIS_INDEX = {"n": 0, "c": 1, "h": 2, "w": 3}


class Shape(NamedTuple):
    n: int
    c: int
    h: int
    w: int

    @property
    def size(self) -> int:
        return self.n * self.c * self.h * self.w


class Tensor:
    """Immutable-by-convention dense array of shape (N, C, H, W), float64."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"tensor needs 4 axes (N, C, H, W), got {arr.ndim}")
        self.data = np.ascontiguousarray(arr)

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "Tensor":
        return cls(np.zeros(tuple(shape), dtype=np.float64))

    @classmethod
    def full(cls, shape: Sequence[int], value: float) -> "Tensor":
        return cls(np.full(tuple(shape), float(value), dtype=np.float64))

    @classmethod
    def from_flat(cls, shape: Sequence[int], flat: Sequence[float]) -> "Tensor":
        n, c, h, w = (int(v) for v in shape)
        data = np.asarray(flat, dtype=np.float64)
        if data.size != n * c * h * w:
            raise ShapeError(
                f"flat data has {data.size} elements, shape {(n, c, h, w)} "
                f"needs {n * c * h * w}")
        return cls(data.reshape(n, c, h, w))

    @property
    def shape(self) -> Shape:
        return Shape(*self.data.shape)

    @property
    def size(self) -> int:
        return self.data.size

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def __repr__(self) -> str:
        return f"Tensor(shape={tuple(self.data.shape)})"


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis; parts must agree on N, H, W."""
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    n, _, h, w = parts[0].shape
    for i, p in enumerate(parts[1:], start=1):
        pn, _, ph, pw = p.shape
        if (pn, ph, pw) != (n, h, w):
            raise ShapeError(
                f"part {i} has (N, H, W)=({pn}, {ph}, {pw}), "
                f"expected ({n}, {h}, {w})")
    return Tensor(np.concatenate([p.data for p in parts], axis=1))


def split_channels(t: Tensor, band_sizes: Sequence[int]) -> list[Tensor]:
    """Inverse of concat_channels; band sizes must sum to the channel count."""
    bands = [int(b) for b in band_sizes]
    if any(b <= 0 for b in bands):
        raise ShapeError(f"band sizes must be positive, got {bands}")
    if sum(bands) != t.shape.c:
        raise ShapeError(
            f"band sizes sum to {sum(bands)}, tensor has {t.shape.c} channels")
    out = []
    start = 0
    for b in bands:
        out.append(Tensor(t.data[:, start:start + b].copy()))
        start += b
    return out


def reduce(t: Tensor, kind: str, axes: Iterable[str]) -> Tensor:
    """Reduce over a subset of the axes {n, c, h, w}; reduced extents become 1."""
    letters = [a.lower() for a in axes]
    if not letters:
        raise DomainError("reduce needs at least one axis")
    bad = [a for a in letters if a not in _AXIS_INDEX]
    if bad:
        raise DomainError(f"unknown axes {bad}; valid axes are n, c, h, w")
    idx = tuple(sorted({_AXIS_INDEX[a] for a in letters}))
    count = 1
    for ax in idx:
        count *= t.data.shape[ax]
    if kind == "sum":
        out = t.data.sum(axis=idx, keepdims=True)
    elif kind == "mean":
        if count == 0:
            raise DomainError("mean over an empty reduction window")
        out = t.data.mean(axis=idx, keepdims=True)
    elif kind == "max":
        if count == 0:
            raise DomainError("max over an empty reduction window")
        out = t.data.max(axis=idx, keepdims=True)
    else:
        raise DomainError(f"unknown reduction kind {kind!r}")
    return Tensor(out)


def finite_difference_gradient(f: Callable[[Tensor], float], x: Tensor,
                               eps: float = 1e-4) -> Tensor:
    """Central-difference gradient of a scalar function, element by element.

    Element i of the result is (f(x + eps*e_i) - f(x - eps*e_i)) / (2 eps).
    This is the verification oracle every analytic backward pass is compared
    against; it must stay independent of those implementations.
    """
    if eps <= 0:
        raise DomainError(f"eps must be positive, got {eps}")
    base = x.data
    grad = np.empty_like(base)
    flat = grad.reshape(-1)
    work = base.copy()
    wflat = work.reshape(-1)
    for i in range(wflat.size):
        orig = wflat[i]
        wflat[i] = orig + eps
        hi = float(f(Tensor(work.reshape(base.shape))))
        wflat[i] = orig - eps
        lo = float(f(Tensor(work.reshape(base.shape))))
        wflat[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise NumericError(
                f"non-finite function value near element {i} (f+={hi}, f-={lo})")
        flat[i] = (hi - lo) / (2.0 * eps)
    return Tensor(grad)


def max_relative_error(analytic: np.ndarray | Tensor,
                       reference: np.ndarray | Tensor) -> float:
    """max_i |a_i - r_i| / max(1, |r_i|); the gradcheck comparison metric."""
    a = analytic.data if isinstance(analytic, Tensor) else np.asarray(analytic)
    r = reference.data if isinstance(reference, Tensor) else np.asarray(reference)
    if a.shape != r.shape:
        raise ShapeError(f"comparing arrays of shapes {a.shape} and {r.shape}")
    denom = np.maximum(1.0, np.abs(r))
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - r) / denom))


# ---------------------------------------------------------------------------
# Binary records


def tensor_to_bytes(t: Tensor) -> bytes:
    header = np.asarray(t.data.shape, dtype="<u8").tobytes()
    return header + t.data.astype("<f8", copy=False).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one record starting at ``offset``; returns (tensor, next offset)."""
    if len(buf) - offset < 32:
        raise ParseError("truncated tensor header", offset=len(buf))
    shape = np.frombuffer(buf, dtype="<u8", count=4, offset=offset)
    offset += 32
    count = int(shape.prod())
    nbytes = count * 8
    if len(buf) - offset < nbytes:
        raise ParseError(
            f"truncated tensor payload, needed {nbytes} bytes", offset=len(buf))
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    offset += nbytes
    return Tensor(data.reshape(tuple(int(s) for s in shape)).copy()), offset


def write_tensor(fh: BinaryIO, t: Tensor) -> None:
    fh.write(tensor_to_bytes(t))


def read_tensor(fh: BinaryIO) -> Tensor:
    start = fh.tell()
    header = fh.read(32)
    if len(header) < 32:
        raise ParseError("truncated tensor header", offset=start + len(header))
    shape = np.frombuffer(header, dtype="<u8")
    count = int(shape.prod())
    payload = fh.read(count * 8)
    if len(payload) < count * 8:
        raise ParseError(
            f"truncated tensor payload, needed {count * 8} bytes",
            offset=start + 32 + len(payload))
    data = np.frombuffer(payload, dtype="<f8").reshape(
        tuple(int(s) for s in shape))
    return Tensor(data.copy())


def write_tensor_block(fh: BinaryIO, tensors: Sequence[Tensor]) -> None:
    """uint64 record count followed by that many tensor records."""
    fh.write(np.asarray([len(tensors)], dtype="<u8").tobytes())
    for t in tensors:
        write_tensor(fh, t)


def read_tensor_block(fh: BinaryIO) -> list[Tensor]:
    start = fh.tell()
    header = fh.read(8)
    if len(header) < 8:
        raise ParseError("truncated block header", offset=start + len(header))
    count = int(np.frombuffer(header, dtype="<u8")[0])
    return [read_tensor(fh) for _ in range(count)]
