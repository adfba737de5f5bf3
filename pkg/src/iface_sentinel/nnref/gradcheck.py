"""Finite-difference verification of the analytic adjoints."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .lga import lga_backward, lga_forward
from .params import LgaParams, RcmParams
from .rcm import rcm_backward, rcm_forward

MODULES = ("lga", "rcm")
FD_STEP = 1e-6
MAX_DIM = 8


def rel_error(ga, gfd) -> np.ndarray:
    ga = np.asarray(ga, dtype=float)
    gfd = np.asarray(gfd, dtype=float)
    return np.abs(ga - gfd) / np.maximum(np.maximum(np.abs(ga), np.abs(gfd)), 1e-8)


@dataclass
class GradReport:
    module: str
    shape: tuple[int, int, int]
    seed: int
    tolerance: float
    group_errors: dict[str, float] = field(default_factory=dict)
    input_error: float = 0.0
    n_input_probes: int = 0

    @property
    def max_error(self) -> float:
        return max([self.input_error, *self.group_errors.values()])

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def to_json(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        d["max_error"] = self.max_error
        d["passed"] = self.passed
        return d


def build(module: str, shape, seed: int):
    """Random ``(X, params, dOut)`` for a module; RCM gets a non-zero projection."""
    if module not in MODULES:
        raise ValueError(f"unknown module {module!r}; expected one of {MODULES}")
    C, h, w = (int(s) for s in shape)
    rng = np.random.default_rng([seed, 1])
    if module == "lga":
        p = LgaParams.init(C, seed=seed)
        p.gate_logit = np.array(rng.normal())
    else:
        p = RcmParams.init(C, seed=seed, zero_proj=False)
    X = rng.normal(size=(C, h, w))
    dOut = rng.normal(size=(C, h, w))
    return X, p, dOut


def _fns(module):
    if module == "lga":
        return lga_forward, lga_backward
    return rcm_forward, rcm_backward


def grad_check(module: str, shape=(4, 6, 6), seed: int = 0, tolerance: float = 1e-5,
               n_input_probes: int = 24, step: float = FD_STEP) -> GradReport:
    """Compare analytic gradients with central differences.

    Every parameter entry is perturbed; the input is probed at
    ``n_input_probes`` random positions.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 1 or max(shape) > MAX_DIM:
        raise ValueError(f"shape must be three dims in 1..{MAX_DIM}, got {shape}")
    fwd, bwd = _fns(module)
    X, p, dOut = build(module, shape, seed)
    dX, dP = bwd(X, p, dOut)

    def central(flat, i):
        # differencing outputs before reducing keeps untouched entries exact
        orig = flat[i]
        flat[i] = orig + step
        yp = fwd(X, p)
        flat[i] = orig - step
        ym = fwd(X, p)
        flat[i] = orig
        return float(np.sum(dOut * (yp - ym))) / (2 * step)

    report = GradReport(module, shape, int(seed), float(tolerance))
    for name, arr in p.groups().items():
        grad = dP.groups()[name]
        worst = 0.0
        flat = arr.reshape(-1)  # view into p's array
        for i in range(flat.size):
            fd = central(flat, i)
            worst = max(worst, float(rel_error(grad.reshape(-1)[i], fd)))
        report.group_errors[name] = worst

    rng = np.random.default_rng([seed, 2])
    n = min(n_input_probes, X.size)
    idx = rng.choice(X.size, size=n, replace=False)
    worst = 0.0
    xf = X.reshape(-1)
    for i in idx:
        fd = central(xf, i)
        worst = max(worst, float(rel_error(dX.reshape(-1)[i], fd)))
    report.input_error = worst
    report.n_input_probes = int(n)
    return report
