"""Time-resolved process descriptors and the detectors that read them.

Series are built from per-frame instance lists: the vertical gap between two
interfaces, or the solid area inside a region. Detectors find where a gap
stops moving, where solid first appears, and isolated level steps that are
artifacts of the recording rather than the process.

Each detector has a batch function and an incremental class; feeding the
incremental class sample by sample reproduces the batch answer, and every
decision depends only on samples already seen.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import PredictionInstance
from .geometry import BBox, BinaryMask

UNITS = ("pixels", "pixels^2", "ratio")


class DescriptorError(ValueError):
    pass


@dataclass(frozen=True)
class FrameRecord:
    t: float
    frame_id: int
    instances: tuple[PredictionInstance, ...] = ()

    def __post_init__(self):
        if not np.isfinite(self.t) or self.t < 0:
            raise DescriptorError(f"frame {self.frame_id}: t must be finite and >= 0, got {self.t}")


@dataclass(frozen=True)
class StatRegion:
    region: BBox
    name: str = "region"

    def check_within(self, width: int, height: int) -> None:
        r = self.region
        if r.x_max > width or r.y_max > height:
            raise DescriptorError(f"region {self.name} {r.as_list()} exceeds image {width}x{height}")


@dataclass(frozen=True)
class DescriptorSeries:
    name: str
    t: tuple[float, ...]
    values: tuple[float, ...]
    units: str = "pixels"

    def __post_init__(self):
        if len(self.t) != len(self.values):
            raise DescriptorError("t and values differ in length")
        if self.units not in UNITS:
            raise DescriptorError(f"units must be one of {UNITS}")
        if any(b <= a for a, b in zip(self.t, self.t[1:])):
            raise DescriptorError(f"series {self.name}: t must be strictly increasing")
        if not all(np.isfinite(self.values)):
            raise DescriptorError(f"series {self.name}: non-finite value")

    @classmethod
    def of(cls, name, t, values, units="pixels") -> "DescriptorSeries":
        return cls(name, tuple(float(x) for x in t), tuple(float(v) for v in values), units)

    def __len__(self):
        return len(self.t)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.t, dtype=float), np.asarray(self.values, dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t_seconds", "value"])
        for t, v in zip(self.t, self.values):
            w.writerow([repr(t), repr(v)])
        return buf.getvalue()

    def save_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def read_csv(path, name: str = "series", units: str = "pixels") -> DescriptorSeries:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["t_seconds", "value"]:
        raise DescriptorError(f"{path}: expected header t_seconds,value")
    return DescriptorSeries.of(name, [float(r[0]) for r in rows[1:]], [float(r[1]) for r in rows[1:]], units)


# --- per-frame measurements -------------------------------------------------

def _bits(inst) -> np.ndarray:
    m = inst if isinstance(inst, BinaryMask) else inst.mask
    return m.bits


def interface_height(inst, region: StatRegion | BBox) -> float:
    """Mean foreground row inside ``region`` (rows grow downward)."""
    box = region.region if isinstance(region, StatRegion) else region
    bits = _bits(inst)
    sub = bits[box.y_min:box.y_max, box.x_min:box.x_max]
    rows = np.nonzero(sub)[0]
    if rows.size == 0:
        raise DescriptorError("instance mask does not intersect the region")
    return float(rows.mean() + box.y_min)


def _best(instances, category_id, box):
    """Highest-score instance of a class that touches the region; earliest wins ties."""
    best = None
    for inst in instances:
        if inst.category_id != category_id:
            continue
        if not _bits(inst)[box.y_min:box.y_max, box.x_min:box.x_max].any():
            continue
        if best is None or inst.score > best.score:
            best = inst
    return best


def frame_pair_distance(frame: FrameRecord, upper: int, lower: int, region) -> float | None:
    box = region.region if isinstance(region, StatRegion) else region
    a = _best(frame.instances, upper, box)
    b = _best(frame.instances, lower, box)
    if a is None or b is None:
        return None
    return interface_height(b, box) - interface_height(a, box)


def frame_solid_area(frame: FrameRecord, solid_classes: Iterable[int], region) -> int:
    box = region.region if isinstance(region, StatRegion) else region
    classes = set(solid_classes)
    union = None
    for inst in frame.instances:
        if inst.category_id in classes:
            sub = _bits(inst)[box.y_min:box.y_max, box.x_min:box.x_max]
            union = sub.copy() if union is None else union | sub
    return 0 if union is None else int(union.sum())


def pair_distance_series(frames: Iterable[FrameRecord], upper: int, lower: int, region,
                         name: str = "delta_h") -> DescriptorSeries:
    ts, vs = [], []
    for f in frames:
        d = frame_pair_distance(f, upper, lower, region)
        if d is not None:
            ts.append(f.t)
            vs.append(d)
    return DescriptorSeries.of(name, ts, vs, "pixels")


def solid_area_series(frames: Iterable[FrameRecord], solid_classes: Iterable[int], region,
                      name: str = "solid_area") -> DescriptorSeries:
    classes = tuple(solid_classes)
    ts, vs = [], []
    for f in frames:
        ts.append(f.t)
        vs.append(frame_solid_area(f, classes, region))
    return DescriptorSeries.of(name, ts, vs, "pixels^2")


# --- smoothing and slopes -----------------------------------------------------

def _values(series) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(series, DescriptorSeries):
        return series.arrays()
    t, v = series
    return np.asarray(t, dtype=float), np.asarray(v, dtype=float)


def moving_median(values: Sequence[float], window: int) -> np.ndarray:
    if window < 1 or window % 2 == 0:
        raise DescriptorError("smoothing window must be an odd count >= 1")
    v = np.asarray(values, dtype=float)
    h = window // 2
    return np.array([np.median(v[max(0, i - h):i + h + 1]) for i in range(len(v))])


def smooth(series: DescriptorSeries, window: int) -> DescriptorSeries:
    """Centered moving median; the ends use whatever part of the window exists."""
    if window == 1:
        return series
    return DescriptorSeries(series.name, series.t, tuple(moving_median(series.values, window).tolist()),
                            series.units)


def theil_sen_slope(t: Sequence[float], v: Sequence[float]) -> float:
    t = np.asarray(t, dtype=float)
    v = np.asarray(v, dtype=float)
    if t.size < 2:
        raise DescriptorError("slope needs at least two samples")
    i, j = np.triu_indices(t.size, k=1)
    dt = t[j] - t[i]
    keep = dt != 0
    if not keep.any():
        raise DescriptorError("slope needs two distinct times")
    return float(np.median((v[j] - v[i])[keep] / dt[keep]))


# --- endpoint ----------------------------------------------------------------

@dataclass(frozen=True)
class EndpointConfig:
    window: float = 1.0
    eps: float = 2.0
    k: int = 3

    def __post_init__(self):
        if self.window <= 0 or self.eps <= 0 or self.k < 1:
            raise DescriptorError("endpoint config needs window > 0, eps > 0, k >= 1")


@dataclass(frozen=True)
class EndpointResult:
    t_star: float | None
    window: float
    eps: float
    k_consecutive: int
    t_decided: float | None = None   # time of the sample that completed the deciding window

    def to_json(self) -> dict:
        return {"t_star": self.t_star, "window": self.window, "eps": self.eps,
                "k_consecutive": self.k_consecutive, "t_decided": self.t_decided}


class EndpointDetector:
    """Stationarity run detector fed one sample at a time.

    Windows start at every sample time ``t_i`` and cover ``[t_i, t_i + window)``.
    A window is judged once a sample at or beyond its end has arrived, so its
    content is final. Windows with fewer than two samples break the run.
    """

    def __init__(self, config: EndpointConfig = EndpointConfig()):
        self.config = config
        self.t: list[float] = []
        self.v: list[float] = []
        self._next = 0          # index of the next window start to judge
        self._run = 0
        self._run_start: float | None = None
        self.result: EndpointResult | None = None
        self.slopes: list[tuple[float, float | None]] = []

    def push(self, t: float, v: float) -> EndpointResult | None:
        if self.t and t <= self.t[-1]:
            raise DescriptorError("samples must arrive in strictly increasing time")
        self.t.append(float(t))
        self.v.append(float(v))
        if self.result is not None:
            return None
        W = self.config.window
        while self._next < len(self.t) and self.t[self._next] + W <= t:
            i = self._next
            self._next += 1
            lo = self.t[i]
            j = i
            while j < len(self.t) and self.t[j] < lo + W:
                j += 1
            if j - i < 2:
                self.slopes.append((lo, None))
                self._run = 0
                continue
            s = theil_sen_slope(self.t[i:j], self.v[i:j])
            self.slopes.append((lo, s))
            if abs(s) < self.config.eps:
                if self._run == 0:
                    self._run_start = lo
                self._run += 1
                if self._run >= self.config.k:
                    c = self.config
                    self.result = EndpointResult(self._run_start, c.window, c.eps, c.k, float(t))
                    return self.result
            else:
                self._run = 0
        return None

    def finish(self) -> EndpointResult:
        if self.result is not None:
            return self.result
        c = self.config
        return EndpointResult(None, c.window, c.eps, c.k)


def detect_endpoint(series, window_seconds: float = 1.0, eps_slope: float = 2.0,
                    k_consecutive: int = 3) -> EndpointResult:
    t, v = _values(series)
    if t.size < 2:
        raise DescriptorError("endpoint detection needs at least two samples")
    det = EndpointDetector(EndpointConfig(window_seconds, eps_slope, k_consecutive))
    for ti, vi in zip(t, v):
        if det.push(ti, vi) is not None:
            break
    return det.finish()


# --- onset -------------------------------------------------------------------

@dataclass(frozen=True)
class OnsetConfig:
    min_value: float = 5.0
    hold: int = 3

    def __post_init__(self):
        if self.hold < 1:
            raise DescriptorError("hold must be >= 1")


class OnsetDetector:
    def __init__(self, config: OnsetConfig = OnsetConfig()):
        self.config = config
        self._run = 0
        self._start: float | None = None
        self.t_onset: float | None = None

    def push(self, t: float, v: float) -> float | None:
        if self.t_onset is not None:
            return None
        if v >= self.config.min_value:
            if self._run == 0:
                self._start = float(t)
            self._run += 1
            if self._run >= self.config.hold:
                self.t_onset = self._start
                return self.t_onset
        else:
            self._run = 0
        return None


def detect_onset(series, min_value: float = 5.0, hold_samples: int = 3) -> float | None:
    """First time the series reaches ``min_value`` and stays there for ``hold_samples`` samples."""
    t, v = _values(series)
    if t.size < 1:
        raise DescriptorError("onset detection needs at least one sample")
    det = OnsetDetector(OnsetConfig(min_value, hold_samples))
    for ti, vi in zip(t, v):
        if det.push(ti, vi) is not None:
            break
    return det.t_onset


# --- jumps -------------------------------------------------------------------

MAD_TO_SIGMA = 1.4826


@dataclass(frozen=True)
class JumpConfig:
    z_threshold: float = 8.0
    window: int = 15
    min_scale: float = 5.0

    def __post_init__(self):
        if self.z_threshold <= 0 or self.window < 2 or self.min_scale < 0:
            raise DescriptorError("jump config needs z > 0, window >= 2, min_scale >= 0")


@dataclass(frozen=True)
class Jump:
    t: float
    index: int
    size: float      # excess over the typical difference; subtracted by mask_jumps


class JumpDetector:
    """Causal change-point test on first differences.

    Each new difference is compared with the median of the preceding
    ``window`` differences; the spread is the MAD rescaled to a standard
    deviation, floored at ``min_scale`` so flat stretches do not turn noise
    into jumps. Flagged differences are excluded from later reference windows.
    """

    def __init__(self, config: JumpConfig = JumpConfig()):
        self.config = config
        self._prev: float | None = None
        self._diffs: list[float] = []
        self._n = 0
        self.offset = 0.0
        self.jumps: list[Jump] = []

    def push(self, t: float, v: float) -> Jump | None:
        """Returns a Jump when this sample starts a new level."""
        i = self._n
        self._n += 1
        prev, self._prev = self._prev, float(v)
        if prev is None:
            return None
        d = float(v) - prev
        ref = self._diffs[-self.config.window:]
        hit = None
        if len(ref) >= 2:
            med = float(np.median(ref))
            mad = float(np.median(np.abs(np.asarray(ref) - med)))
            scale = max(MAD_TO_SIGMA * mad, self.config.min_scale)
            if abs(d - med) > self.config.z_threshold * scale:
                hit = Jump(float(t), i, d - med)
        if hit is None:
            self._diffs.append(d)
            return None
        self.offset += hit.size
        self.jumps.append(hit)
        return hit

    def corrected(self, v: float) -> float:
        """``v`` with all steps flagged so far removed."""
        return float(v) - self.offset


def detect_jumps(series, z_threshold: float = 8.0, window: int = 15,
                 min_scale: float = 5.0) -> list[Jump]:
    t, v = _values(series)
    if t.size < 3:
        raise DescriptorError("jump detection needs at least three samples")
    det = JumpDetector(JumpConfig(z_threshold, window, min_scale))
    for ti, vi in zip(t, v):
        det.push(ti, vi)
    return det.jumps


def mask_jumps(series: DescriptorSeries, jumps: Sequence[Jump]) -> DescriptorSeries:
    """Remove each flagged step from the samples at and after it."""
    t, v = series.arrays()
    out = v.copy()
    for j in jumps:
        out[j.index:] -= j.size
    return DescriptorSeries.of(series.name, t, out, series.units)
