"""Parameter containers for the two attention modules."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .ops import NNRefError


class ParamGroup:
    """Mixin: ordered name -> array view of a parameter dataclass."""

    def groups(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_groups(cls, groups: dict[str, np.ndarray]):
        names = [f.name for f in fields(cls)]
        missing = set(names) - set(groups)
        extra = set(groups) - set(names)
        if missing or extra:
            raise NNRefError(f"parameter groups mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        return cls(**{n: np.asarray(groups[n], dtype=np.float64) for n in names})

    def copy(self):
        return type(self)(**{k: v.copy() for k, v in self.groups().items()})

    def zeros_like(self):
        return type(self)(**{k: np.zeros_like(v) for k, v in self.groups().items()})

    @property
    def channels(self) -> int:
        return int(self.proj_b.shape[0])

    def size(self) -> int:
        return sum(int(v.size) for v in self.groups().values())


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class LgaParams(ParamGroup):
    branch3_w: np.ndarray
    branch3_b: np.ndarray
    branch5_w: np.ndarray
    branch5_b: np.ndarray
    branch7_w: np.ndarray
    branch7_b: np.ndarray
    alpha_w: np.ndarray      # (S, C)
    alpha_b: np.ndarray
    local_w: np.ndarray      # (C, C, 3, 3)
    local_b: np.ndarray
    se1_w: np.ndarray        # (C/4, C)
    se1_b: np.ndarray
    se2_w: np.ndarray        # (C, C/4)
    se2_b: np.ndarray
    gate_logit: np.ndarray   # scalar, shape ()
    proj_w: np.ndarray       # (C, C)
    proj_b: np.ndarray

    KERNELS = (3, 5, 7)

    @property
    def gamma(self) -> float:
        return float(1.0 / (1.0 + np.exp(-float(self.gate_logit))))

    @classmethod
    def init(cls, channels: int, seed: int = 0) -> "LgaParams":
        C = int(channels)
        if C < 1:
            raise NNRefError("channels must be >= 1")
        r = max(C // 4, 1)
        rng = np.random.default_rng(seed)
        kw = {}
        for k in cls.KERNELS:
            kw[f"branch{k}_w"] = _uniform(rng, (C, k, k), k * k)
            kw[f"branch{k}_b"] = _uniform(rng, (C,), k * k)
        S = len(cls.KERNELS)
        kw["alpha_w"] = _uniform(rng, (S, C), C)
        kw["alpha_b"] = _uniform(rng, (S,), C)
        kw["local_w"] = _uniform(rng, (C, C, 3, 3), 9 * C)
        kw["local_b"] = _uniform(rng, (C,), 9 * C)
        kw["se1_w"] = _uniform(rng, (r, C), C)
        kw["se1_b"] = _uniform(rng, (r,), C)
        kw["se2_w"] = _uniform(rng, (C, r), r)
        kw["se2_b"] = _uniform(rng, (C,), r)
        kw["gate_logit"] = np.array(0.0)
        kw["proj_w"] = _uniform(rng, (C, C), C)
        kw["proj_b"] = _uniform(rng, (C,), C)
        return cls(**kw)


@dataclass
class RcmParams(ParamGroup):
    h_w: np.ndarray          # (C, 7) taps along height
    h_b: np.ndarray
    v_w: np.ndarray          # (C, 7) taps along width
    v_b: np.ndarray
    fuse_w: np.ndarray       # (C, 2C)
    fuse_b: np.ndarray
    calib_dw_w: np.ndarray   # (C, 3, 3)
    calib_dw_b: np.ndarray
    calib_pw_w: np.ndarray   # (C, C)
    calib_pw_b: np.ndarray
    detail_w: np.ndarray     # (C, 3, 3)
    detail_b: np.ndarray
    proj_w: np.ndarray       # (C, C)
    proj_b: np.ndarray

    STRIP = 7

    @classmethod
    def init(cls, channels: int, seed: int = 0, zero_proj: bool = True) -> "RcmParams":
        C = int(channels)
        if C < 1:
            raise NNRefError("channels must be >= 1")
        k = cls.STRIP
        rng = np.random.default_rng(seed)
        kw = {
            "h_w": _uniform(rng, (C, k), k),
            "h_b": _uniform(rng, (C,), k),
            "v_w": _uniform(rng, (C, k), k),
            "v_b": _uniform(rng, (C,), k),
            "fuse_w": _uniform(rng, (C, 2 * C), 2 * C),
            "fuse_b": _uniform(rng, (C,), 2 * C),
            "calib_dw_w": _uniform(rng, (C, 3, 3), 9),
            "calib_dw_b": _uniform(rng, (C,), 9),
            "calib_pw_w": _uniform(rng, (C, C), C),
            "calib_pw_b": _uniform(rng, (C,), C),
            "detail_w": _uniform(rng, (C, 3, 3), 9),
            "detail_b": _uniform(rng, (C,), 9),
        }
        if zero_proj:
            kw["proj_w"] = np.zeros((C, C))
            kw["proj_b"] = np.zeros(C)
        else:
            kw["proj_w"] = _uniform(rng, (C, C), C)
            kw["proj_b"] = _uniform(rng, (C,), C)
        return cls(**kw)
