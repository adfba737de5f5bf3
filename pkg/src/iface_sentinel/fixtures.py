"""Seeded synthetic data: annotated scenes with a match ledger, a dataset with
published dataset statistics, and scripted monitoring streams."""
from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np

from .dataset import (
    AnnotationSet,
    Category,
    GroundTruthInstance,
    ImageInfo,
    PredictionInstance,
)
from .descriptors import EndpointConfig, FrameRecord
from .geometry import BBox, BinaryMask, RleMask, rle_encode

VESSEL_NAMES = (
    "beaker", "conical flask", "pear-shaped", "separatory funnel", "round-bottom flask",
    "test tube", "volumetric flask", "graduated cylinder", "reagent bottle", "petri dish",
    "crystallizing dish", "watch glass", "burette", "pipette", "funnel",
    "three-neck flask", "suction flask", "evaporating dish", "wash bottle", "drying tube",
    "condenser", "vial", "centrifuge tube",
)
AUXILIARY_NAMES = ("liquid", "solid")


def default_categories() -> tuple[Category, ...]:
    """23 vessels, 5 interface types and 2 phase-region labels (30 total)."""
    cats = [Category(i + 1, name, "vessel") for i, name in enumerate(VESSEL_NAMES)]
    base = len(cats)
    for k, itype in enumerate(("G/L", "L/L", "L/S", "G/S", "S/S")):
        cats.append(Category(base + k + 1, itype, "interface", itype))
    base = len(cats)
    for k, name in enumerate(AUXILIARY_NAMES):
        cats.append(Category(base + k + 1, name, "auxiliary"))
    return tuple(cats)


def rect_rle(width: int, height: int, box: BBox) -> RleMask:
    """RLE of a filled axis-aligned rectangle, built without rasterizing."""
    w = box.x_max - box.x_min
    lead = box.y_min * width + box.x_min
    if w == width:
        runs = [lead, box.height * width, width * height - lead - box.height * width]
        return RleMask(width, height, runs if runs[-1] else runs[:-1])
    runs = [lead]
    for row in range(box.height):
        runs.append(w)
        if row < box.height - 1:
            runs.append(width - w)
    runs.append(width * height - lead - box.height * width + (width - w))
    if runs[-1] == 0:
        runs.pop()
    return RleMask(width, height, runs)


class FixtureError(ValueError):
    pass


@dataclass(frozen=True)
class FixtureSpec:
    n_images: int = 10
    width: int = 128
    height: int = 96
    val_fraction: float = 0.2
    vessels_per_image: tuple[int, int] = (1, 3)
    interfaces_per_vessel: tuple[int, int] = (1, 3)
    p_detect: float = 0.8
    iou_range: tuple[float, float] = (0.5, 0.95)
    false_positives_per_image: tuple[int, int] = (0, 2)
    vessel_predictions: bool = True
    categories: tuple[Category, ...] = field(default_factory=default_categories)


@dataclass(frozen=True)
class LedgerEntry:
    image_id: int
    pred_index: int
    gt_id: int | None
    category_id: int
    iou: float


@dataclass(frozen=True)
class Fixture:
    annotations: AnnotationSet
    predictions: list[PredictionInstance]
    ledger: list[LedgerEntry]


def _crop_for_iou(box: BBox, target: float, rng, keep_bottom: bool) -> tuple[BBox, float]:
    """Sub-rectangle of ``box`` whose area ratio is as close to ``target`` as possible."""
    w, h = box.width, box.height
    best = None
    for hh in range(1, h + 1):
        ww = int(round(target * w * h / hh))
        if not 1 <= ww <= w:
            continue
        err = abs(ww * hh / (w * h) - target)
        if best is None or err < best[0] - 1e-15:
            best = (err, ww, hh)
    if best is None:
        best = (0.0, w, h)
    _, ww, hh = best
    x0 = box.x_min + int(rng.integers(0, w - ww + 1))
    y0 = box.y_max - hh if keep_bottom else box.y_min + int(rng.integers(0, h - hh + 1))
    return BBox(x0, y0, x0 + ww, y0 + hh), (ww * hh) / (w * h)


def _exact_height(w: int, h: int, target: float) -> int:
    """Largest height <= h for which a w-wide box admits a crop of area ratio
    exactly ``target`` (falls back to h)."""
    frac = Fraction(target).limit_denominator(1000)
    for hh in range(h, max(h // 2, 1) - 1, -1):
        need = Fraction(w * hh) * frac
        if need.denominator != 1:
            continue
        need = int(need)
        if any(need % r == 0 and need // r <= w for r in range(1, hh + 1)):
            return hh
    return h


def make_fixture(spec: FixtureSpec, seed: int) -> Fixture:
    """Vessels laid out in columns, interface bands inside them (with
    ``vessel_ref``), and predictions derived from the GTs at known IoU."""
    if spec.n_images < 0:
        raise FixtureError("n_images must be >= 0")
    lo, hi = spec.vessels_per_image
    ilo, ihi = spec.interfaces_per_vessel
    if not (0 <= lo <= hi and 0 <= ilo <= ihi):
        raise FixtureError("count ranges must be ordered and non-negative")
    if hi * (1 + ihi) > 112:
        raise FixtureError("more than 112 instances per image requested")
    if hi and spec.width // hi < 8:
        raise FixtureError(f"{hi} vessels do not fit across width {spec.width}")
    if spec.height < 24 or (hi and ihi * 4 > spec.height // 2):
        raise FixtureError("interface bands do not fit inside the vessels")
    vessels = [c for c in spec.categories if c.kind == "vessel"]
    ifaces = [c for c in spec.categories if c.kind == "interface" and not c.rare]
    if hi and not vessels or ihi and not ifaces:
        raise FixtureError("spec needs vessel and interface categories")

    rng = np.random.default_rng(seed)
    W, H = spec.width, spec.height
    n_val = int(round(spec.n_images * spec.val_fraction))
    images, gts, preds, ledger = [], [], [], []
    next_id = 1

    def add_pred(image_id, cat_id, box, score, gt_id, iou_val):
        preds.append(PredictionInstance(image_id, cat_id, rect_rle(W, H, box), round(score, 6)))
        ledger.append(LedgerEntry(image_id, len(preds) - 1, gt_id, cat_id, iou_val))

    for k in range(spec.n_images):
        image_id = k + 1
        images.append(ImageInfo(image_id, W, H, "val" if k >= spec.n_images - n_val else "train"))
        n_v = int(rng.integers(lo, hi + 1))
        col_w = W // max(n_v, 1)
        for v in range(n_v):
            vw = int(rng.integers(max(col_w // 2, 4), col_w - 1))
            vh = int(rng.integers(H // 2, H - 2))
            if spec.iou_range[0] == spec.iou_range[1]:
                vh = _exact_height(vw, vh, spec.iou_range[0])
            x0 = v * col_w + int(rng.integers(0, col_w - vw))
            y0 = int(rng.integers(1, H - vh))
            vbox = BBox(x0, y0, x0 + vw, y0 + vh)
            vcat = vessels[int(rng.integers(len(vessels)))]
            vid = next_id
            next_id += 1
            gts.append(GroundTruthInstance(vid, image_id, vcat.id, rect_rle(W, H, vbox), vbox))
            if spec.vessel_predictions and rng.random() < spec.p_detect:
                target = float(rng.uniform(*spec.iou_range))
                pbox, got = _crop_for_iou(vbox, target, rng, keep_bottom=True)
                add_pred(image_id, vcat.id, pbox, rng.uniform(0.3, 1.0), vid, got)

            # bands live in the lower half so a top-cropped vessel prediction keeps them
            n_i = int(rng.integers(ilo, ihi + 1))
            half = vbox.y_min + vh // 2
            slot = (vbox.y_max - half) // max(n_i, 1)
            for j in range(n_i):
                band_h = int(rng.integers(2, max(slot - 1, 3)))
                by0 = half + j * slot + int(rng.integers(0, max(slot - band_h, 1)))
                ibox = BBox(vbox.x_min + 1, by0, vbox.x_max - 1, by0 + band_h)
                icat = ifaces[int(rng.integers(len(ifaces)))]
                iid = next_id
                next_id += 1
                gts.append(
                    GroundTruthInstance(iid, image_id, icat.id, rect_rle(W, H, ibox), ibox, vessel_ref=vid)
                )
                if rng.random() < spec.p_detect:
                    target = float(rng.uniform(*spec.iou_range))
                    pbox, got = _crop_for_iou(ibox, target, rng, keep_bottom=False)
                    add_pred(image_id, icat.id, pbox, rng.uniform(0.3, 1.0), iid, got)

        for _ in range(int(rng.integers(spec.false_positives_per_image[0], spec.false_positives_per_image[1] + 1))):
            fw, fh = int(rng.integers(2, W // 4)), int(rng.integers(2, H // 4))
            fx, fy = int(rng.integers(0, W - fw)), int(rng.integers(0, H - fh))
            cat = spec.categories[int(rng.integers(len(spec.categories)))]
            add_pred(image_id, cat.id, BBox(fx, fy, fx + fw, fy + fh), rng.uniform(0.0, 0.8), None, 0.0)

    ann = AnnotationSet(tuple(images), tuple(spec.categories), tuple(gts))
    return Fixture(ann, preds, ledger)


# Published dataset statistics; reproduced by paper_shaped_fixture().
PAPER_SCALE_COUNTS = {"small": 2108, "medium": 5926, "large": 10424}
PAPER_INTERFACE_COUNTS = {"G/L": 3637, "L/S": 852, "L/L": 327, "G/S": 477, "S/S": 7}
PAPER_SPLITS = {"train": 2939, "val": 729}
PAPER_MAX_PER_IMAGE = 112


def paper_shaped_fixture() -> AnnotationSet:
    """An annotation set whose summary statistics equal the published ones.

    Masks are plain rectangles sized into the requested scale bins; the
    content is meaningless, only the bookkeeping is realistic."""
    W = H = 128
    sizes = {"small": (20, 20), "medium": (40, 40), "large": (100, 100)}
    cats = default_categories()
    by_type = {c.interface_type: c.id for c in cats if c.kind == "interface"}
    others = [c.id for c in cats if c.kind != "interface"]

    cat_ids = []
    for itype, n in PAPER_INTERFACE_COUNTS.items():
        cat_ids += [by_type[itype]] * n
    n_total = sum(PAPER_SCALE_COUNTS.values())
    cat_ids += [others[i % len(others)] for i in range(n_total - len(cat_ids))]
    bins = []
    for name, n in PAPER_SCALE_COUNTS.items():
        bins += [name] * n
    # interleave bins so every category sees every scale
    order = np.random.default_rng(0).permutation(n_total)
    bins = [bins[i] for i in order]

    n_images = sum(PAPER_SPLITS.values())
    images = tuple(
        ImageInfo(i + 1, W, H, "train" if i < PAPER_SPLITS["train"] else "val") for i in range(n_images)
    )
    per_image = [PAPER_MAX_PER_IMAGE] + [0] * (n_images - 1)
    rest = n_total - PAPER_MAX_PER_IMAGE
    for i in range(1, n_images):
        per_image[i] = rest // (n_images - 1) + (1 if i <= rest % (n_images - 1) else 0)

    rle_cache: dict[tuple, RleMask] = {}
    instances = []
    k = 0
    for img_idx, count in enumerate(per_image):
        for j in range(count):
            bw, bh = sizes[bins[k]]
            x0 = (j * 3) % (W - bw + 1)
            y0 = (j * 7) % (H - bh + 1)
            box = BBox(x0, y0, x0 + bw, y0 + bh)
            key = (x0, y0, bw, bh)
            if key not in rle_cache:
                rle_cache[key] = rect_rle(W, H, box)
            instances.append(GroundTruthInstance(k + 1, img_idx + 1, cat_ids[k], rle_cache[key], box))
            k += 1
    return AnnotationSet(images, cats, tuple(instances))


# -- scripted process traces --------------------------------------------------

def separation_trace(
    seed: int,
    fps: float = 30.0,
    duration: float = 7.0,
    settle: float = 5.0,
    start: float = 240.0,
    plateau: float = 60.0,
    tau: float = 20.0,
    snr_db: float = 20.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Interface-distance trace that decays exponentially and reaches its
    plateau exactly at ``settle`` seconds, plus white noise.

    The noise power is set from ``snr_db`` relative to the power of the
    transient (trace minus plateau). Returns ``(t, noisy, clean)``.
    The defaults give a steady decline with a sharp settle, which
    ``SEPARATION_ENDPOINT`` resolves to within half a second.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration * fps))
    t = np.arange(n) / fps
    floor = math.exp(-settle / tau)
    shape = np.clip((np.exp(-t / tau) - floor) / (1.0 - floor), 0.0, None)
    transient = (start - plateau) * shape
    clean = plateau + transient
    sigma = math.sqrt(np.mean(transient ** 2) / 10 ** (snr_db / 10))
    return t, clean + rng.normal(0.0, sigma, n), clean


def crystallization_trace(
    seed: int,
    fps: float = 30.0,
    duration: float = 9.0,
    onset: float = 1.5,
    growth: float = 400.0,
    noise: float = 4.0,
    jump_at: float | None = 6.6,
    jump_factor: float = 100.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Solid-area trace: zero before ``onset``, noisy linear growth after,
    with an optional level step of ``jump_factor * noise`` at ``jump_at``."""
    rng = np.random.default_rng(seed)
    n = int(round(duration * fps))
    t = np.arange(n) / fps
    grown = np.where(t >= onset, growth * (t - onset) + 10.0, 0.0)
    noisy = np.where(t >= onset, grown + rng.normal(0.0, noise, n), 0.0)
    if jump_at is not None:
        noisy = noisy + np.where(t >= jump_at - 1e-9, jump_factor * noise, 0.0)
    return t, np.clip(np.round(noisy), 0.0, None)


# Endpoint setting matched to ``separation_trace``'s defaults: 1.2 s windows
# keep the straddle bias under half a second while averaging down the noise.
SEPARATION_ENDPOINT = EndpointConfig(window=1.2, eps=4.0, k=3)

STREAM_BEAKER, STREAM_GL, STREAM_LL, STREAM_SOLID = 1, 24, 25, 30


def _band_rle(width, height, row, x0, x1, thickness=3):
    """Horizontal band whose mean row is exactly ``row``."""
    half = thickness // 2
    return rect_rle(width, height, BBox(x0, row - half, x1, row - half + thickness))


def _area_rle(width, height, area, x0, y0, span):
    """Exactly ``area`` pixels filled row by row inside a ``span``-wide block."""
    bits = np.zeros((height, width), dtype=bool)
    full, rest = divmod(int(area), span)
    bits[y0:y0 + full, x0:x0 + span] = True
    bits[y0 + full, x0:x0 + rest] = True
    return rle_encode(BinaryMask(bits))


def separation_frames(seed: int = 0, width: int = 64, height: int = 320, top: int = 20,
                      **trace_kw) -> tuple[list[FrameRecord], np.ndarray]:
    """Frames with a fixed G/L band and an L/L band whose distance follows
    ``separation_trace`` rounded to whole rows. Returns frames and the
    scripted distances."""
    t, noisy, _ = separation_trace(seed, **trace_kw)
    rng = np.random.default_rng([seed, 7])
    dist = np.rint(noisy).astype(int)
    frames = []
    for i, (ti, d) in enumerate(zip(t, dist)):
        lower = top + int(d)
        if not (1 <= top and lower + 2 <= height):
            raise FixtureError("separation trace does not fit the frame height")
        insts = (
            PredictionInstance(i, STREAM_BEAKER, rect_rle(width, height, BBox(4, 4, width - 4, height - 4)),
                               round(float(rng.uniform(0.85, 0.99)), 3)),
            PredictionInstance(i, STREAM_GL, _band_rle(width, height, top, 8, width - 8),
                               round(float(rng.uniform(0.6, 0.95)), 3)),
            PredictionInstance(i, STREAM_LL, _band_rle(width, height, lower, 8, width - 8),
                               round(float(rng.uniform(0.6, 0.95)), 3)),
        )
        frames.append(FrameRecord(float(ti), i, insts))
    return frames, dist.astype(float)


def crystallization_frames(seed: int = 0, width: int = 96, height: int = 96,
                           **trace_kw) -> tuple[list[FrameRecord], np.ndarray]:
    """Frames whose solid mask holds exactly the ``crystallization_trace``
    area; a beaker is visible throughout."""
    t, area = crystallization_trace(seed, **trace_kw)
    rng = np.random.default_rng([seed, 8])
    span = width - 16
    if area.max() > span * (height - 17):
        raise FixtureError("crystallization trace does not fit the frame")
    frames = []
    for i, (ti, a) in enumerate(zip(t, area)):
        insts = [PredictionInstance(i, STREAM_BEAKER, rect_rle(width, height, BBox(2, 2, width - 2, height - 2)),
                                    round(float(rng.uniform(0.85, 0.99)), 3))]
        if a > 0:
            insts.append(PredictionInstance(i, STREAM_SOLID, _area_rle(width, height, a, 8, 8, span),
                                            round(float(rng.uniform(0.5, 0.9)), 3)))
        frames.append(FrameRecord(float(ti), i, tuple(insts)))
    return frames, area


def demo_frames(seed: int = 0, width: int = 160, height: int = 320) -> list[FrameRecord]:
    """Both processes in one 7 s clip: converging G/L and L/L bands in the
    left columns, and a full-width solid layer growing from row 270 with the
    onset and step of ``crystallization_trace``."""
    t, noisy, _ = separation_trace(seed)
    _, area = crystallization_trace(seed, duration=7.0)
    rng = np.random.default_rng([seed, 9])
    dist = np.rint(noisy).astype(int)
    top, y_solid = 20, 270
    if area.max() > width * (height - y_solid - 1) or top + dist.max() + 2 > height:
        raise FixtureError("demo traces do not fit the frame")
    frames = []
    for i, ti in enumerate(t):
        s = lambda lo, hi: round(float(rng.uniform(lo, hi)), 3)
        insts = [
            PredictionInstance(i, STREAM_BEAKER, rect_rle(width, height, BBox(0, 4, width, height - 4)), s(0.85, 0.99)),
            PredictionInstance(i, STREAM_GL, _band_rle(width, height, top, 8, 56), s(0.6, 0.95)),
            PredictionInstance(i, STREAM_LL, _band_rle(width, height, top + int(dist[i]), 8, 56), s(0.6, 0.95)),
        ]
        if area[i] > 0:
            insts.append(PredictionInstance(i, STREAM_SOLID, _area_rle(width, height, area[i], 0, y_solid, width),
                                            s(0.5, 0.9)))
        frames.append(FrameRecord(float(ti), i, tuple(insts)))
    return frames
