"""Depthwise 3D convolution with exact forward and adjoint rules.

"Convolution" here is cross-correlation, the deep-learning convention: the
kernel is not flipped in the forward pass.  The input gradient is therefore a
correlation of the upstream gradient with the axis-reflected kernel.

The fast paths gather every kernel window into a column matrix and contract
per channel with ``matmul``; :func:`dwconv3d_naive` is the scalar-loop reference.

Kernel banks have shape ``(C, 1, K, K, K)`` with ``K`` odd; volumes have shape
``(N, C, D, H, W)``.  Padding is zero-fill.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import as_tensor, check_finite


def _padding3(padding, k: int) -> tuple[int, int, int]:
    if padding is None or padding == "same":
        p = (k - 1) // 2
        return (p, p, p)
    if np.isscalar(padding):
        padding = (int(padding),) * 3
    pads = tuple(int(p) for p in padding)
    if len(pads) != 3 or any(p < 0 for p in pads):
        raise ValueError(f"invalid padding {padding!r}")
    return pads


def check_kernel(w: np.ndarray) -> int:
    if w.ndim != 5 or w.shape[1] != 1:
        raise ValueError(f"depthwise kernel must be (C,1,K,K,K), got {w.shape}")
    k = w.shape[2]
    if w.shape[3] != k or w.shape[4] != k:
        raise ValueError(f"kernel must be cubic, got {w.shape[2:]}")
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    return k


def _check(x: np.ndarray, w: np.ndarray) -> int:
    if x.ndim != 5:
        raise ValueError(f"volume batch must be (N,C,D,H,W), got {x.shape}")
    k = check_kernel(w)
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"channel mismatch: volume has {x.shape[1]}, kernel has {w.shape[0]}")
    return k


def _out_shape(x_shape, k, pads):
    out = tuple(s + 2 * p - k + 1 for s, p in zip(x_shape[2:], pads))
    if any(s <= 0 for s in out):
        raise ValueError("kernel larger than padded volume")
    return out


def _pad(x: np.ndarray, pads) -> np.ndarray:
    if not any(pads):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pads))


def _columns(xp: np.ndarray, k: int, out_shape) -> np.ndarray:
    """Gather every ``k^3`` window: ``(C, N*D*H*W, k^3)``."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    return win.transpose(1, 0, 2, 3, 4, 5, 6, 7).reshape(c, n * int(np.prod(out_shape)), k**3)


def _correlate(xp: np.ndarray, taps: np.ndarray, k: int) -> np.ndarray:
    n, c = xp.shape[:2]
    out_shape = tuple(s - k + 1 for s in xp.shape[2:])
    y = np.matmul(_columns(xp, k, out_shape), taps.reshape(c, k**3, 1))
    return np.ascontiguousarray(y.reshape((c, n) + out_shape).transpose(1, 0, 2, 3, 4))


def dwconv3d(x, w, padding=None) -> np.ndarray:
    """Per-channel 3D cross-correlation; ``padding=None`` keeps the spatial size."""
    x, w = as_tensor(x), as_tensor(w)
    k = _check(x, w)
    pads = _padding3(padding, k)
    _out_shape(x.shape, k, pads)
    return check_finite(_correlate(_pad(x, pads), w[:, 0], k), "dwconv3d")


def dwconv3d_with_columns(x, w, padding=None) -> tuple[np.ndarray, np.ndarray]:
    """Forward pass that also returns the gathered input windows for reuse in
    :func:`dwconv3d_backward`."""
    x, w = as_tensor(x), as_tensor(w)
    k = _check(x, w)
    pads = _padding3(padding, k)
    out = _out_shape(x.shape, k, pads)
    cols = _columns(_pad(x, pads), k, out)
    c, n = x.shape[1], x.shape[0]
    y = np.matmul(cols, w[:, 0].reshape(c, k**3, 1)).reshape((c, n) + out).transpose(1, 0, 2, 3, 4)
    return check_finite(np.ascontiguousarray(y), "dwconv3d"), cols


def dwconv3d_backward(x, w, upstream, padding=None, columns=None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(dX, dW)`` for ``dwconv3d(x, w, padding)`` given ``upstream``.

    ``dW[c, i, j, l]`` sums upstream times the input shifted by the offset;
    ``dX`` correlates the upstream gradient with the reflected kernel.
    """
    x, w, up = as_tensor(x), as_tensor(w), as_tensor(upstream)
    k = _check(x, w)
    pads = _padding3(padding, k)
    out = _out_shape(x.shape, k, pads)
    if up.shape != x.shape[:2] + out:
        raise ValueError(f"upstream shape {up.shape} does not match output shape")
    if any(p > k - 1 for p in pads):
        raise ValueError("padding larger than K-1 is not supported")
    c = x.shape[1]
    up_rows = up.transpose(1, 0, 2, 3, 4).reshape(c, 1, -1)
    if columns is None:
        columns = _columns(_pad(x, pads), k, out)
    dw = np.matmul(up_rows, columns).reshape(w.shape)
    flipped = w[:, 0, ::-1, ::-1, ::-1]
    dx = _correlate(_pad(up, tuple(k - 1 - p for p in pads)), flipped, k)
    return check_finite(dx, "dX"), check_finite(dw, "dW")


def dwconv3d_naive(x, w, padding=None) -> np.ndarray:
    """Seven-deep scalar loop.  Slow; kept as an independent reference."""
    x, w = as_tensor(x), as_tensor(w)
    k = _check(x, w)
    pads = _padding3(padding, k)
    od, oh, ow = _out_shape(x.shape, k, pads)
    n_, c_, d_, h_, w_ = x.shape
    out = np.zeros((n_, c_, od, oh, ow))
    for n in range(n_):
        for c in range(c_):
            for a in range(od):
                for b in range(oh):
                    for e in range(ow):
                        acc = 0.0
                        for i in range(k):
                            zi = a + i - pads[0]
                            if not 0 <= zi < d_:
                                continue
                            for j in range(k):
                                yj = b + j - pads[1]
                                if not 0 <= yj < h_:
                                    continue
                                for l in range(k):
                                    xl = e + l - pads[2]
                                    if 0 <= xl < w_:
                                        acc += w[c, 0, i, j, l] * x[n, c, zi, yj, xl]
                        out[n, c, a, b, e] = acc
    return out


def delta_kernel(channels: int, k: int) -> np.ndarray:
    w = np.zeros((channels, 1, k, k, k))
    c = (k - 1) // 2
    w[:, 0, c, c, c] = 1.0
    return w


def embed_kernel(small, target_size: int) -> np.ndarray:
    """Center a ``K_S``-sized kernel bank inside a ``K_L``-sized zero field."""
    small = as_tensor(small)
    ks = check_kernel(small)
    if target_size % 2 == 0:
        raise ValueError(f"target size must be odd, got {target_size}")
    if ks > target_size:
        raise ValueError(f"cannot embed size {ks} into {target_size}")
    off = (target_size - ks) // 2
    out = np.zeros(small.shape[:2] + (target_size,) * 3)
    out[:, :, off:off + ks, off:off + ks, off:off + ks] = small
    return out


def crop_kernel(big, size: int) -> np.ndarray:
    """Adjoint of :func:`embed_kernel`: the central ``size``-cube of ``big``."""
    big = as_tensor(big)
    kb = check_kernel(big)
    if size % 2 == 0 or size > kb:
        raise ValueError(f"cannot crop size {size} out of {kb}")
    off = (kb - size) // 2
    return big[:, :, off:off + size, off:off + size, off:off + size].copy()


def support_mask(k_large: int, k_small: int) -> np.ndarray:
    """Boolean ``K_L^3`` grid, True on the central ``K_S^3`` cube."""
    m = np.zeros((k_large,) * 3, dtype=bool)
    off = (k_large - k_small) // 2
    m[off:off + k_small, off:off + k_small, off:off + k_small] = True
    return m


# -- dense strided patch convolution (encoder stem / downsampling) ----------


def patch_conv3d(x, w, b=None) -> np.ndarray:
    """Non-overlapping dense conv: kernel size == stride == ``w.shape[2]``.

    ``w`` has shape ``(C_out, C_in, s, s, s)``.
    """
    x, w = as_tensor(x), as_tensor(w)
    n, ci, d, h, wd = x.shape
    ci_w, s = w.shape[1], w.shape[2]
    if ci != ci_w:
        raise ValueError(f"channel mismatch: {ci} vs {ci_w}")
    if d % s or h % s or wd % s:
        raise ValueError(f"spatial dims {x.shape[2:]} not divisible by stride {s}")
    xr = x.reshape(n, ci, d // s, s, h // s, s, wd // s, s)
    out = np.einsum("nadxhywz,oaxyz->nodhw", xr, w, optimize=True)
    if b is not None:
        out = out + as_tensor(b).reshape(1, -1, 1, 1, 1)
    return check_finite(out, "patch_conv3d")


def patch_conv3d_backward(x, w, upstream):
    x, w, up = as_tensor(x), as_tensor(w), as_tensor(upstream)
    n, ci, d, h, wd = x.shape
    s = w.shape[2]
    xr = x.reshape(n, ci, d // s, s, h // s, s, wd // s, s)
    dw = np.einsum("nadxhywz,nodhw->oaxyz", xr, up, optimize=True)
    dx = np.einsum("nodhw,oaxyz->nadxhywz", up, w, optimize=True).reshape(x.shape)
    db = up.sum(axis=(0, 2, 3, 4))
    return dx, dw, db
