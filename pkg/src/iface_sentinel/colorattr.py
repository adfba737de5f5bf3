"""Colored / colorless pseudo-labels for liquid-related instances.

The rule is deliberately simple: average the HSV saturation over the mask
and compare it against a threshold, with a guard that keeps near-black
regions colorless.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .dataset import AnnotationSet, Category, PredictionInstance
from .geometry import BinaryMask

log = logging.getLogger(__name__)

DEFAULT_SAT_THRESHOLD = 0.15
VALUE_FLOOR = 0.05
LIQUID_INTERFACES = frozenset({"G/L", "L/L", "L/S"})
IMAGE_SUFFIXES = (".png", ".ppm")


class ColorError(ValueError):
    pass


@dataclass(frozen=True)
class ColorStats:
    mean_rgb: tuple[float, float, float]
    mean_saturation: float
    mean_value: float
    pixel_count: int


@dataclass(frozen=True)
class ColorLabel:
    label: str
    confidence: float


def as_rgb(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ColorError(f"expected an (h, w, 3) RGB raster, got shape {arr.shape}")
    return arr.astype(np.float64)


def color_stats(image, mask: BinaryMask) -> ColorStats:
    rgb = as_rgb(image)
    if rgb.shape[:2] != mask.shape:
        raise ColorError(f"image is {rgb.shape[1]}x{rgb.shape[0]} but mask is {mask.width}x{mask.height}")
    if mask.is_empty():
        raise ColorError("mask has no foreground pixels")
    px = rgb[mask.bits]
    hi = px.max(axis=1)
    lo = px.min(axis=1)
    sat = np.divide(hi - lo, hi, out=np.zeros_like(hi), where=hi > 0)
    mean_rgb = tuple(float(v) for v in px.mean(axis=0))
    return ColorStats(mean_rgb, float(sat.mean()), float(hi.mean() / 255.0), int(len(px)))


def pseudo_label(stats: ColorStats, threshold: float = DEFAULT_SAT_THRESHOLD) -> ColorLabel:
    if not 0.0 < threshold < 1.0:
        raise ColorError("saturation threshold must lie in (0, 1)")
    s = stats.mean_saturation
    colored = s > threshold and stats.mean_value > VALUE_FLOOR
    # distance from the threshold, scaled by the largest distance possible on that side
    conf = min(1.0, abs(s - threshold) / max(threshold, 1.0 - threshold))
    return ColorLabel("colored" if colored else "colorless", conf)


def is_liquid_related(cat: Category) -> bool:
    if cat.kind == "interface":
        return cat.interface_type in LIQUID_INTERFACES
    return cat.kind == "auxiliary" and "liquid" in cat.name.lower()


def load_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def images_from_dir(directory) -> dict[int, Path]:
    """Map integer file stems (``12.png``) to paths."""
    out = {}
    for p in sorted(Path(directory).iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES and p.stem.isdigit():
            out.setdefault(int(p.stem), p)
    return out


def annotate_predictions(
    preds: Iterable[PredictionInstance],
    categories: AnnotationSet | Iterable[Category],
    images: Mapping[int, object],
    threshold: float = DEFAULT_SAT_THRESHOLD,
) -> tuple[list[PredictionInstance], list[str]]:
    """Fill ``color_attr`` on liquid-related predictions.

    ``images`` maps image id to an RGB array or an image path. Returns the
    new prediction list plus warnings for instances left unlabeled.
    """
    cats = categories.categories if isinstance(categories, AnnotationSet) else list(categories)
    liquid = {c.id for c in cats if is_liquid_related(c)}
    cache: dict[int, np.ndarray] = {}
    out, warnings = [], []
    for i, p in enumerate(preds):
        if p.category_id not in liquid:
            out.append(p)
            continue
        raster = cache.get(p.image_id)
        if raster is None and p.image_id in images:
            src = images[p.image_id]
            try:
                raster = load_image(src) if isinstance(src, (str, Path)) else as_rgb(src)
            except (OSError, ColorError) as exc:
                warnings.append(f"prediction {i}: image {p.image_id} unreadable ({exc})")
                out.append(p)
                continue
            cache[p.image_id] = raster
        if raster is None:
            warnings.append(f"prediction {i}: no raster for image {p.image_id}")
            out.append(p)
            continue
        try:
            lab = pseudo_label(color_stats(raster, p.mask), threshold)
        except ColorError as exc:
            warnings.append(f"prediction {i}: {exc}")
            out.append(p)
            continue
        out.append(replace(p, color_attr=lab.label))
    for w in warnings:
        log.warning(w)
    return out, warnings
