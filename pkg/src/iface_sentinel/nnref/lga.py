"""Multi-scale local/global attention block.

Three depthwise branches are mixed by softmax weights taken from the pooled
input, then two attention paths re-weight the mixture: a 3x3 conv map for
local structure and a squeeze-excitation vector for global context. A
sigmoid gate blends the two paths before a 1x1 projection.
"""
from __future__ import annotations

import numpy as np

from .ops import (
    NNRefError,
    check_finite,
    conv2d,
    conv2d_backward,
    dwconv2d,
    dwconv2d_backward,
    pointwise,
    pointwise_backward,
    sigmoid,
    softmax,
)
from .params import LgaParams


def _check(X, p: LgaParams):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise NNRefError(f"expected a (C, h, w) tensor, got shape {X.shape}")
    if X.shape[0] != p.channels:
        raise NNRefError(f"input has {X.shape[0]} channels, parameters expect {p.channels}")
    check_finite(X)
    return X


def lga_forward(X, p: LgaParams, *, gamma: float | None = None,
                freeze_attention: bool = False, return_cache: bool = False):
    """Forward pass.

    ``gamma`` overrides the learned gate (endpoints 0 and 1 allowed).
    ``freeze_attention`` pins both attention maps at 1.
    """
    X = _check(X, p)
    g = X.mean(axis=(1, 2))
    alpha = softmax(p.alpha_w @ g + p.alpha_b)
    branches = [dwconv2d(X, getattr(p, f"branch{k}_w"), getattr(p, f"branch{k}_b"))
                for k in p.KERNELS]
    Xms = sum(a * B for a, B in zip(alpha, branches))

    if freeze_attention:
        S = np.ones_like(Xms)
        e = np.ones(Xms.shape[0])
        q = z = None
    else:
        S = sigmoid(conv2d(Xms, p.local_w, p.local_b))
        q = p.se1_w @ Xms.mean(axis=(1, 2)) + p.se1_b
        z = np.maximum(q, 0.0)
        e = sigmoid(p.se2_w @ z + p.se2_b)
    Xloc = S * Xms
    Xglob = e[:, None, None] * Xms

    gam = p.gamma if gamma is None else float(gamma)
    if not 0.0 <= gam <= 1.0:
        raise NNRefError("gamma must lie in [0, 1]")
    F = gam * Xloc + (1.0 - gam) * Xglob
    out = pointwise(F, p.proj_w, p.proj_b)
    if not return_cache:
        return out
    cache = dict(X=X, g=g, alpha=alpha, branches=branches, Xms=Xms, S=S, q=q, z=z, e=e,
                 Xloc=Xloc, Xglob=Xglob, gamma=gam, F=F, fixed_gamma=gamma is not None,
                 frozen=freeze_attention)
    return out, cache


def lga_backward(X, p: LgaParams, dOut, *, cache: dict | None = None,
                 gamma: float | None = None, freeze_attention: bool = False):
    """Gradients of ``sum(dOut * lga_forward(X, p))``; returns ``(dX, dP)``."""
    if cache is None:
        _, cache = lga_forward(X, p, gamma=gamma, freeze_attention=freeze_attention,
                               return_cache=True)
    X = cache["X"]
    dOut = np.asarray(dOut, dtype=np.float64)
    if dOut.shape != X.shape:
        raise NNRefError(f"dOut shape {dOut.shape} does not match input {X.shape}")
    C, h, w = X.shape
    n = h * w
    d = p.zeros_like()

    dF, d.proj_w, d.proj_b = pointwise_backward(cache["F"], p.proj_w, dOut)
    gam = cache["gamma"]
    if not cache["fixed_gamma"]:
        dgam = float(np.sum(dF * (cache["Xloc"] - cache["Xglob"])))
        d.gate_logit = np.array(dgam * gam * (1.0 - gam))
    dXloc = gam * dF
    dXglob = (1.0 - gam) * dF

    Xms, S, e = cache["Xms"], cache["S"], cache["e"]
    dXms = dXloc * S + dXglob * e[:, None, None]
    if not cache["frozen"]:
        # local path
        dA = dXloc * Xms * S * (1.0 - S)
        dx_loc, d.local_w, d.local_b = conv2d_backward(Xms, p.local_w, dA)
        dXms += dx_loc
        # global path
        de = np.sum(dXglob * Xms, axis=(1, 2))
        du = de * e * (1.0 - e)
        d.se2_w = np.outer(du, cache["z"])
        d.se2_b = du
        dq = (p.se2_w.T @ du) * (cache["q"] > 0)
        d.se1_w = np.outer(dq, Xms.mean(axis=(1, 2)))
        d.se1_b = dq
        dXms += (p.se1_w.T @ dq)[:, None, None] / n

    # multi-scale mixture
    alpha = cache["alpha"]
    dX = np.zeros_like(X)
    dalpha = np.empty_like(alpha)
    for s, (k, B) in enumerate(zip(p.KERNELS, cache["branches"])):
        dalpha[s] = np.sum(dXms * B)
        dxb, dw, db = dwconv2d_backward(X, getattr(p, f"branch{k}_w"), alpha[s] * dXms)
        dX += dxb
        setattr(d, f"branch{k}_w", dw)
        setattr(d, f"branch{k}_b", db)
    dl = alpha * (dalpha - np.dot(alpha, dalpha))
    d.alpha_w = np.outer(dl, cache["g"])
    d.alpha_b = dl
    dX += (p.alpha_w.T @ dl)[:, None, None] / n
    return dX, d


def mixture_weights(X, p: LgaParams) -> np.ndarray:
    """Softmax branch weights for ``X``."""
    X = _check(X, p)
    return softmax(p.alpha_w @ X.mean(axis=(1, 2)) + p.alpha_b)
