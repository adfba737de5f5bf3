"""Directional context calibration unit with a residual output.

Row and column strip pools feed 1-D convolutions; their broadcast maps are
fused by a 1x1 conv into a context tensor that, after a small depthwise plus
pointwise stack and a sigmoid, calibrates a depthwise detail branch.
"""
from __future__ import annotations

import numpy as np

from .ops import (
    NNRefError,
    check_finite,
    dwconv2d,
    dwconv2d_backward,
    pointwise,
    pointwise_backward,
    sigmoid,
)
from .params import RcmParams


def _check(X, p: RcmParams):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise NNRefError(f"expected a (C, h, w) tensor, got shape {X.shape}")
    if X.shape[0] != p.channels:
        raise NNRefError(f"input has {X.shape[0]} channels, parameters expect {p.channels}")
    check_finite(X)
    return X


def _h_kernel(p):
    return p.h_w[:, :, None]   # (C, 7, 1): slides along height


def _v_kernel(p):
    return p.v_w[:, None, :]   # (C, 1, 7): slides along width


def directional_context(X, p: RcmParams) -> tuple[np.ndarray, np.ndarray]:
    """Broadcast horizontal and vertical context maps, each (C, h, w)."""
    X = _check(X, p)
    return _context(X, p)[:2]


def _context(X, p):
    C, h, w = X.shape
    ph = X.mean(axis=2, keepdims=True)
    pv = X.mean(axis=1, keepdims=True)
    Xh = np.broadcast_to(dwconv2d(ph, _h_kernel(p), p.h_b), (C, h, w))
    Xv = np.broadcast_to(dwconv2d(pv, _v_kernel(p), p.v_b), (C, h, w))
    return Xh, Xv, ph, pv


def rcm_forward(X, p: RcmParams, *, return_cache: bool = False):
    X = _check(X, p)
    Xh, Xv, ph, pv = _context(X, p)
    Z = np.concatenate([Xh, Xv], axis=0)
    D = pointwise(Z, p.fuse_w, p.fuse_b)
    G1 = dwconv2d(D, p.calib_dw_w, p.calib_dw_b)
    Wm = sigmoid(pointwise(G1, p.calib_pw_w, p.calib_pw_b))
    L = dwconv2d(X, p.detail_w, p.detail_b)
    M = Wm * L
    Y = pointwise(M, p.proj_w, p.proj_b) + X
    if not return_cache:
        return Y
    return Y, dict(X=X, ph=ph, pv=pv, Z=Z, D=D, G1=G1, W=Wm, L=L, M=M)


def calibration_map(X, p: RcmParams) -> np.ndarray:
    return rcm_forward(X, p, return_cache=True)[1]["W"]


def rcm_backward(X, p: RcmParams, dOut, *, cache: dict | None = None):
    """Gradients of ``sum(dOut * rcm_forward(X, p))``; returns ``(dX, dP)``."""
    if cache is None:
        _, cache = rcm_forward(X, p, return_cache=True)
    X = cache["X"]
    dOut = np.asarray(dOut, dtype=np.float64)
    if dOut.shape != X.shape:
        raise NNRefError(f"dOut shape {dOut.shape} does not match input {X.shape}")
    C, h, w = X.shape
    d = p.zeros_like()

    dX = dOut.copy()
    dM, d.proj_w, d.proj_b = pointwise_backward(cache["M"], p.proj_w, dOut)
    Wm, L = cache["W"], cache["L"]
    dL = dM * Wm
    dG2 = dM * L * Wm * (1.0 - Wm)

    dx_l, d.detail_w, d.detail_b = dwconv2d_backward(X, p.detail_w, dL)
    dX += dx_l

    dG1, d.calib_pw_w, d.calib_pw_b = pointwise_backward(cache["G1"], p.calib_pw_w, dG2)
    dD, d.calib_dw_w, d.calib_dw_b = dwconv2d_backward(cache["D"], p.calib_dw_w, dG1)
    dZ, d.fuse_w, d.fuse_b = pointwise_backward(cache["Z"], p.fuse_w, dD)

    dh_small = dZ[:C].sum(axis=2, keepdims=True)
    dph, dhw, d.h_b = dwconv2d_backward(cache["ph"], _h_kernel(p), dh_small)
    d.h_w = dhw[:, :, 0]
    dX += dph / w

    dv_small = dZ[C:].sum(axis=1, keepdims=True)
    dpv, dvw, d.v_b = dwconv2d_backward(cache["pv"], _v_kernel(p), dv_small)
    d.v_w = dvw[:, 0, :]
    dX += dpv / h
    return dX, d
