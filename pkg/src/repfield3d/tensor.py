"""Dense float64 tensor primitives, seeded RNG and the RT3D file format.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Every primitive
here returns a fresh array and refuses to hand back NaN/Inf.
"""

from __future__ import annotations

import os
import struct
from typing import Iterable, Sequence

import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2/pi)
GELU_A = 0.044715
LN_EPS = 1e-6

RNG_ALGORITHM = "philox4x64-10"

_ELEMENTWISE = ("add", "sub", "mul", "scale")


class NonFiniteError(FloatingPointError):
    """Raised when a primitive would produce NaN or Inf."""


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def check_finite(x: np.ndarray, what: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def elementwise(op: str, a, b) -> np.ndarray:
    """Pointwise ``add``/``sub``/``mul`` or ``scale`` by a scalar.

    ``b`` may be a tensor of the same shape or a scalar; no other broadcasting
    is allowed.
    """
    if op not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op!r}")
    a = as_tensor(a)
    b = as_tensor(b)
    if b.ndim != 0 and b.shape != a.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if op == "scale" and b.ndim != 0:
        raise ValueError("scale expects a scalar factor")
    with np.errstate(all="ignore"):
        if op == "add":
            out = a + b
        elif op == "sub":
            out = a - b
        else:
            out = a * b
    return check_finite(out, op)


def _norm_axes(ndim: int, axes: Sequence[int] | None) -> tuple[int, ...]:
    if axes is None:
        axes = tuple(range(2, ndim))
    axes = tuple(sorted(a % ndim for a in axes))
    if not axes:
        raise ValueError("layer_norm needs at least one normalization axis")
    return axes


def layer_norm_stats(x: np.ndarray, axes: tuple[int, ...], eps: float):
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    # the mean of a constant group can be off by an ulp; make it exactly zero
    flat = np.max(x, axis=axes, keepdims=True) == np.min(x, axis=axes, keepdims=True)
    xc = np.where(flat, 0.0, xc)
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def _channel_view(p: np.ndarray, ndim: int) -> np.ndarray:
    # per-channel affine parameters live on axis 1
    shape = [1] * ndim
    shape[1] = -1
    return np.asarray(p, dtype=np.float64).reshape(shape)


def layer_norm(
    x,
    gain=None,
    bias=None,
    axes: Sequence[int] | None = None,
    eps: float = LN_EPS,
) -> np.ndarray:
    """Normalize ``x`` over ``axes`` (default: every axis after the channel axis).

    ``gain`` and ``bias`` are per-channel vectors applied after normalization.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = as_tensor(x)
    axes = _norm_axes(x.ndim, axes)
    xhat, _ = layer_norm_stats(x, axes, eps)
    out = xhat
    if gain is not None:
        out = out * _channel_view(gain, x.ndim)
    if bias is not None:
        out = out + _channel_view(bias, x.ndim)
    return check_finite(out, "layer_norm")


def sigmoid(x) -> np.ndarray:
    x = as_tensor(x)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gelu(x) -> np.ndarray:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = as_tensor(x)
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x**3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    u = GELU_C * (x + GELU_A * x**3)
    t = np.tanh(u)
    du = GELU_C * (1.0 + 3.0 * GELU_A * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


# -- random numbers ---------------------------------------------------------


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Generator over the Philox 4x64-10 counter-based bit generator.

    Extra ``stream`` integers select independent sub-streams of one seed.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(s) & 0xFFFFFFFFFFFFFFFF for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key) if stream else key[0]))


def seeded_normal(rng: np.random.Generator | int, shape: Iterable[int]) -> np.ndarray:
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(rng)
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"invalid shape {shape}")
    return rng.standard_normal(shape, dtype=np.float64)


# -- RT3D v1 ----------------------------------------------------------------

RT3D_MAGIC = b"RT3D"
RT3D_VERSION = 1
DTYPE_F64_LE = 0


class FormatError(ValueError):
    pass


def rt3d_dumps(x) -> bytes:
    x = as_tensor(x)  # ascontiguousarray would promote rank 0 to rank 1
    head = RT3D_MAGIC + struct.pack("<BBI", RT3D_VERSION, DTYPE_F64_LE, x.ndim)
    dims = struct.pack(f"<{x.ndim}Q", *x.shape)
    return head + dims + x.astype("<f8").tobytes(order="C")


def rt3d_loads(buf: bytes) -> np.ndarray:
    if len(buf) < 10 or buf[:4] != RT3D_MAGIC:
        raise FormatError("not an RT3D file")
    version, dtype, rank = struct.unpack_from("<BBI", buf, 4)
    if version != RT3D_VERSION:
        raise FormatError(f"unsupported RT3D version {version}")
    if dtype != DTYPE_F64_LE:
        raise FormatError(f"unsupported dtype code {dtype}")
    off = 10
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) - off != 8 * n:
        raise FormatError("payload size does not match shape")
    flat = np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64)
    return np.reshape(flat, tuple(dims))


def save_rt3d(path: str | os.PathLike, x) -> None:
    with open(path, "wb") as fh:
        fh.write(rt3d_dumps(x))


def load_rt3d(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return rt3d_loads(fh.read())
