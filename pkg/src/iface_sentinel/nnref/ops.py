"""Float64 building blocks with explicit adjoints.

Tensors are ``(C, H, W)`` arrays. All spatial convolutions are
cross-correlations with zero "same" padding (odd kernels only), so every
operator preserves the spatial shape.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NNRefError(ValueError):
    pass


def check_finite(x: np.ndarray, name: str = "input") -> None:
    if not np.all(np.isfinite(x)):
        raise NNRefError(f"{name} contains non-finite values")


def sigmoid(x):
    # split form avoids overflow for large |x|
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def _pad(x, kh, kw):
    return np.pad(x, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))


def _patches(x, kh, kw):
    """(C, kh, kw, H, W) view of the padded input."""
    xp = _pad(x, kh, kw)
    v = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (C, H, W, kh, kw)
    return v.transpose(0, 3, 4, 1, 2)


def conv2d(x, w, b):
    """Dense conv, ``w`` of shape (C_out, C_in, kh, kw)."""
    _, _, kh, kw = w.shape
    return np.einsum("ocij,cijyx->oyx", w, _patches(x, kh, kw), optimize=True) + b[:, None, None]


def conv2d_backward(x, w, dout):
    _, _, kh, kw = w.shape
    H, W = x.shape[1:]
    dw = np.einsum("oyx,cijyx->ocij", dout, _patches(x, kh, kw), optimize=True)
    db = dout.sum(axis=(1, 2))
    dxp = np.zeros((x.shape[0], H + kh - 1, W + kw - 1))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + H, j:j + W] += np.einsum("oc,oyx->cyx", w[:, :, i, j], dout)
    dx = dxp[:, kh // 2:kh // 2 + H, kw // 2:kw // 2 + W]
    return dx, dw, db


def dwconv2d(x, w, b):
    """Depthwise conv, ``w`` of shape (C, kh, kw)."""
    _, kh, kw = w.shape
    return np.einsum("cij,cijyx->cyx", w, _patches(x, kh, kw)) + b[:, None, None]


def dwconv2d_backward(x, w, dout):
    _, kh, kw = w.shape
    H, W = x.shape[1:]
    dw = np.einsum("cyx,cijyx->cij", dout, _patches(x, kh, kw))
    db = dout.sum(axis=(1, 2))
    dxp = np.zeros((x.shape[0], H + kh - 1, W + kw - 1))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + H, j:j + W] += w[:, i, j][:, None, None] * dout
    dx = dxp[:, kh // 2:kh // 2 + H, kw // 2:kw // 2 + W]
    return dx, dw, db


def pointwise(x, w, b):
    """1x1 conv, ``w`` of shape (C_out, C_in)."""
    return np.einsum("oc,cyx->oyx", w, x) + b[:, None, None]


def pointwise_backward(x, w, dout):
    dw = np.einsum("oyx,cyx->oc", dout, x)
    db = dout.sum(axis=(1, 2))
    dx = np.einsum("oc,oyx->cyx", w, dout)
    return dx, dw, db
