"""Annotation / prediction files and dataset statistics.

Annotation file layout (``version`` must be ``ctg2-spec/1``)::

    {
      "version": "ctg2-spec/1",
      "images": [{"id": 1, "width": 640, "height": 480, "split": "train"}],
      "categories": [{"id": 1, "name": "beaker", "kind": "vessel"},
                     {"id": 7, "name": "G/L", "kind": "interface", "interface_type": "G/L"}],
      "annotations": [{"id": 1, "image_id": 1, "category_id": 7,
                       "segmentation": {"polygon": [[x, y], ...]},
                       "vessel_ref": 3}]
    }

``segmentation`` is either ``{"polygon": [[x, y], ...]}`` (a list of such
point lists is accepted for multi-part shapes) or
``{"rle": {"w": W, "h": H, "runs": [...]}}``. Prediction files are a JSON
array of ``{"image_id", "category_id", "rle", "score", "color_attr"?}``.
"""
from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Sequence

from .geometry import (
    BBox,
    BinaryMask,
    GeometryError,
    Polygon,
    RleMask,
    bbox_of,
    rasterize_many,
    rle_decode,
    rle_encode,
)

SCHEMA_VERSION = "ctg2-spec/1"
KINDS = ("vessel", "interface", "auxiliary")
INTERFACE_TYPES = ("G/L", "L/L", "L/S", "G/S", "S/S")
RARE_INTERFACE_TYPES = frozenset({"S/S"})
COLOR_ATTRS = ("colored", "colorless")

SMALL_MAX = 32 ** 2
MEDIUM_MAX = 96 ** 2


class DatasetError(ValueError):
    """Schema or cross-reference violation; the message names the field."""


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    kind: str
    interface_type: str | None = None
    rare: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DatasetError(f"category {self.id}: kind must be one of {KINDS}, got {self.kind!r}")
        if (self.kind == "interface") != (self.interface_type is not None):
            raise DatasetError(f"category {self.id}: interface_type is required iff kind == 'interface'")
        if self.interface_type is not None and self.interface_type not in INTERFACE_TYPES:
            raise DatasetError(f"category {self.id}: unknown interface_type {self.interface_type!r}")
        if self.interface_type in RARE_INTERFACE_TYPES and not self.rare:
            object.__setattr__(self, "rare", True)

    def to_json(self) -> dict:
        out: dict[str, Any] = {"id": self.id, "name": self.name, "kind": self.kind}
        if self.interface_type is not None:
            out["interface_type"] = self.interface_type
        if self.rare:
            out["rare"] = True
        return out


@dataclass(frozen=True)
class ImageInfo:
    id: int
    width: int
    height: int
    split: str = "train"


@dataclass(frozen=True)
class GroundTruthInstance:
    id: int
    image_id: int
    category_id: int
    rle: RleMask
    bbox: BBox
    vessel_ref: int | None = None
    polygons: tuple[Polygon, ...] = ()

    @property
    def mask(self) -> BinaryMask:
        return rle_decode(self.rle)

    @property
    def area(self) -> int:
        return self.rle.area()

    def to_json(self) -> dict:
        if self.polygons:
            pts = [[list(v) for v in p.vertices] for p in self.polygons]
            seg: dict = {"polygon": pts[0] if len(pts) == 1 else pts}
        else:
            seg = {"rle": self.rle.to_json()}
        out = {
            "id": self.id,
            "image_id": self.image_id,
            "category_id": self.category_id,
            "segmentation": seg,
            "bbox": self.bbox.as_list(),
        }
        if self.vessel_ref is not None:
            out["vessel_ref"] = self.vessel_ref
        return out


@dataclass(frozen=True)
class PredictionInstance:
    image_id: int
    category_id: int
    rle: RleMask
    score: float
    color_attr: str | None = None

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise DatasetError(f"score must lie in [0, 1], got {self.score}")
        if self.color_attr is not None and self.color_attr not in COLOR_ATTRS:
            raise DatasetError(f"color_attr must be one of {COLOR_ATTRS}, got {self.color_attr!r}")

    @cached_property
    def mask(self) -> BinaryMask:
        return rle_decode(self.rle)

    @property
    def bbox(self) -> BBox:
        return bbox_of(self.mask)

    def to_json(self) -> dict:
        out = {
            "image_id": self.image_id,
            "category_id": self.category_id,
            "rle": self.rle.to_json(),
            "score": self.score,
        }
        if self.color_attr is not None:
            out["color_attr"] = self.color_attr
        return out


@dataclass(frozen=True)
class AnnotationSet:
    images: tuple[ImageInfo, ...]
    categories: tuple[Category, ...]
    instances: tuple[GroundTruthInstance, ...] = ()

    @cached_property
    def category_by_id(self) -> dict[int, Category]:
        return {c.id: c for c in self.categories}

    @cached_property
    def image_by_id(self) -> dict[int, ImageInfo]:
        return {im.id: im for im in self.images}

    @cached_property
    def instance_by_id(self) -> dict[int, GroundTruthInstance]:
        return {g.id: g for g in self.instances}

    def instances_by_image(self) -> dict[int, list[GroundTruthInstance]]:
        out: dict[int, list[GroundTruthInstance]] = {im.id: [] for im in self.images}
        for g in self.instances:
            out[g.image_id].append(g)
        return out

    def to_json(self) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "images": [
                {"id": im.id, "width": im.width, "height": im.height, "split": im.split}
                for im in self.images
            ],
            "categories": [c.to_json() for c in self.categories],
            "annotations": [g.to_json() for g in self.instances],
        }


# -- parsing helpers ----------------------------------------------------------

def _get(obj: Any, key: str, types, path: str, required: bool = True):
    if not isinstance(obj, dict):
        raise DatasetError(f"{path}: expected an object")
    if key not in obj:
        if required:
            raise DatasetError(f"{path}.{key}: missing required field")
        return None
    val = obj[key]
    # bool is an int subclass; never accept it where a number is wanted
    if isinstance(val, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise DatasetError(f"{path}.{key}: expected {_type_name(types)}, got bool")
    if not isinstance(val, types):
        raise DatasetError(f"{path}.{key}: expected {_type_name(types)}, got {type(val).__name__}")
    return val


def _type_name(types) -> str:
    if isinstance(types, tuple):
        return " or ".join(t.__name__ for t in types)
    return types.__name__


def _parse_rle(obj: Any, path: str) -> RleMask:
    w = _get(obj, "w", int, path)
    h = _get(obj, "h", int, path)
    runs = _get(obj, "runs", list, path)
    if not all(isinstance(r, int) and not isinstance(r, bool) for r in runs):
        raise DatasetError(f"{path}.runs: runs must be integers")
    try:
        return RleMask(w, h, runs)
    except GeometryError as exc:
        raise DatasetError(f"{path}: {exc}") from None


def _parse_polygons(raw: Any, path: str) -> tuple[Polygon, ...]:
    if not isinstance(raw, list) or not raw:
        raise DatasetError(f"{path}: expected a non-empty list of points")
    parts = raw if isinstance(raw[0], list) and raw[0] and isinstance(raw[0][0], list) else [raw]
    polys = []
    for k, part in enumerate(parts):
        for j, pt in enumerate(part):
            if (
                not isinstance(pt, list)
                or len(pt) != 2
                or not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in pt)
            ):
                raise DatasetError(f"{path}[{k}][{j}]: expected [x, y]")
        try:
            polys.append(Polygon.from_points(part))
        except GeometryError as exc:
            raise DatasetError(f"{path}[{k}]: {exc}") from None
    return tuple(polys)


def _check_version(doc: dict, path: str) -> None:
    version = _get(doc, "version", str, path)
    if version != SCHEMA_VERSION:
        raise DatasetError(f"{path}.version: expected {SCHEMA_VERSION!r}, got {version!r}")


def parse_annotations(doc: Any) -> AnnotationSet:
    """Validate a decoded annotation document and build the set."""
    if not isinstance(doc, dict):
        raise DatasetError("$: expected a JSON object")
    _check_version(doc, "$")

    images = []
    seen_images: set[int] = set()
    for i, raw in enumerate(_get(doc, "images", list, "$")):
        p = f"$.images[{i}]"
        im = ImageInfo(
            id=_get(raw, "id", int, p),
            width=_get(raw, "width", int, p),
            height=_get(raw, "height", int, p),
            split=_get(raw, "split", str, p, required=False) or "train",
        )
        if im.width < 1 or im.height < 1:
            raise DatasetError(f"{p}: width/height must be >= 1")
        if im.id in seen_images:
            raise DatasetError(f"{p}.id: duplicate image id {im.id}")
        seen_images.add(im.id)
        images.append(im)

    categories = []
    seen_cats: set[int] = set()
    for i, raw in enumerate(_get(doc, "categories", list, "$")):
        p = f"$.categories[{i}]"
        cid = _get(raw, "id", int, p)
        if cid in seen_cats:
            raise DatasetError(f"{p}.id: duplicate category id {cid}")
        seen_cats.add(cid)
        try:
            categories.append(
                Category(
                    id=cid,
                    name=_get(raw, "name", str, p),
                    kind=_get(raw, "kind", str, p),
                    interface_type=_get(raw, "interface_type", str, p, required=False),
                    rare=bool(_get(raw, "rare", bool, p, required=False)),
                )
            )
        except DatasetError as exc:
            raise DatasetError(f"{p}: {exc}") from None

    image_by_id = {im.id: im for im in images}
    cat_by_id = {c.id: c for c in categories}
    instances = []
    seen_ann: set[int] = set()
    for i, raw in enumerate(_get(doc, "annotations", list, "$")):
        p = f"$.annotations[{i}]"
        aid = _get(raw, "id", int, p)
        if aid in seen_ann:
            raise DatasetError(f"{p}.id: duplicate annotation id {aid}")
        seen_ann.add(aid)
        image_id = _get(raw, "image_id", int, p)
        if image_id not in image_by_id:
            raise DatasetError(f"{p}.image_id: unknown image id {image_id}")
        category_id = _get(raw, "category_id", int, p)
        if category_id not in cat_by_id:
            raise DatasetError(f"{p}.category_id: unknown category id {category_id}")
        im = image_by_id[image_id]
        seg = _get(raw, "segmentation", dict, p)
        polygons: tuple[Polygon, ...] = ()
        if "polygon" in seg:
            polygons = _parse_polygons(seg["polygon"], f"{p}.segmentation.polygon")
            rle = rle_encode(rasterize_many(polygons, im.width, im.height))
        elif "rle" in seg:
            rle = _parse_rle(seg["rle"], f"{p}.segmentation.rle")
            if (rle.width, rle.height) != (im.width, im.height):
                raise DatasetError(f"{p}.segmentation.rle: size does not match image {image_id}")
        else:
            raise DatasetError(f"{p}.segmentation: expected 'polygon' or 'rle'")
        if rle.area() == 0:
            raise DatasetError(f"{p}.segmentation: rasterizes to an empty mask")
        if "bbox" in raw:
            bb = _get(raw, "bbox", list, p)
            if len(bb) != 4 or not all(isinstance(c, (int, float)) for c in bb):
                raise DatasetError(f"{p}.bbox: expected [x_min, y_min, x_max, y_max]")
        vessel_ref = _get(raw, "vessel_ref", int, p, required=False)
        instances.append(
            GroundTruthInstance(
                id=aid,
                image_id=image_id,
                category_id=category_id,
                rle=rle,
                bbox=bbox_of(rle_decode(rle)),
                vessel_ref=vessel_ref,
                polygons=polygons,
            )
        )

    by_id = {g.id: g for g in instances}
    for i, g in enumerate(instances):
        if g.vessel_ref is None:
            continue
        p = f"$.annotations[{i}].vessel_ref"
        target = by_id.get(g.vessel_ref)
        if target is None:
            raise DatasetError(f"{p}: unknown annotation id {g.vessel_ref}")
        if target.image_id != g.image_id:
            raise DatasetError(f"{p}: vessel {g.vessel_ref} is in a different image")
        if cat_by_id[target.category_id].kind != "vessel":
            raise DatasetError(f"{p}: annotation {g.vessel_ref} is not a vessel")

    return AnnotationSet(tuple(images), tuple(categories), tuple(instances))


def _read_json(path) -> Any:
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: invalid JSON ({exc})") from None


def load_annotations(path) -> AnnotationSet:
    return parse_annotations(_read_json(path))


def parse_predictions(doc: Any, annotations: AnnotationSet | None = None) -> list[PredictionInstance]:
    if not isinstance(doc, list):
        raise DatasetError("$: expected a JSON array of predictions")
    preds = []
    for i, raw in enumerate(doc):
        p = f"$[{i}]"
        image_id = _get(raw, "image_id", int, p)
        category_id = _get(raw, "category_id", int, p)
        rle = _parse_rle(_get(raw, "rle", dict, p), f"{p}.rle")
        score = _get(raw, "score", (int, float), p)
        color = _get(raw, "color_attr", str, p, required=False)
        if rle.area() == 0:
            raise DatasetError(f"{p}.rle: empty mask")
        if annotations is not None:
            im = annotations.image_by_id.get(image_id)
            if im is None:
                raise DatasetError(f"{p}.image_id: unknown image id {image_id}")
            if category_id not in annotations.category_by_id:
                raise DatasetError(f"{p}.category_id: unknown category id {category_id}")
            if (rle.width, rle.height) != (im.width, im.height):
                raise DatasetError(f"{p}.rle: size does not match image {image_id}")
        try:
            preds.append(PredictionInstance(image_id, category_id, rle, float(score), color))
        except DatasetError as exc:
            raise DatasetError(f"{p}: {exc}") from None
    return preds


def load_predictions(path, annotations: AnnotationSet | None = None) -> list[PredictionInstance]:
    return parse_predictions(_read_json(path), annotations)


def dumps(doc: Any) -> str:
    return json.dumps(doc, separators=(",", ":")) + "\n"


def save_annotations(ann: AnnotationSet, path) -> None:
    Path(path).write_text(dumps(ann.to_json()), encoding="utf-8")


def save_predictions(preds: Iterable[PredictionInstance], path) -> None:
    Path(path).write_text(dumps([p.to_json() for p in preds]), encoding="utf-8")


# -- statistics ---------------------------------------------------------------

@dataclass(frozen=True)
class ScaleHistogram:
    small: int
    medium: int
    large: int

    @property
    def total(self) -> int:
        return self.small + self.medium + self.large

    def fractions(self) -> dict[str, float]:
        n = self.total
        if n == 0:
            return {"small": 0.0, "medium": 0.0, "large": 0.0}
        return {"small": self.small / n, "medium": self.medium / n, "large": self.large / n}


def scale_bin(pixels: int) -> str:
    if pixels < SMALL_MAX:
        return "small"
    if pixels < MEDIUM_MAX:
        return "medium"
    return "large"


def histogram_from_areas(areas: Iterable[int]) -> ScaleHistogram:
    c = Counter(scale_bin(a) for a in areas if a > 0)
    return ScaleHistogram(c["small"], c["medium"], c["large"])


def scale_histogram(ann: AnnotationSet) -> ScaleHistogram:
    """COCO-style small/medium/large bins at 32^2 and 96^2 pixels."""
    return histogram_from_areas(g.area for g in ann.instances)


@dataclass(frozen=True)
class ClassSummary:
    n_images: int
    n_categories: int
    n_instances: int
    per_category: dict[int, int]
    per_interface_type: dict[str, int]
    images_per_split: dict[str, int]
    max_instances_per_image: int
    mean_instances_per_image: float
    rare_categories: tuple[int, ...] = field(default=())


def class_summary(ann: AnnotationSet) -> ClassSummary:
    per_cat = Counter(g.category_id for g in ann.instances)
    per_itype = {t: 0 for t in INTERFACE_TYPES}
    for cid, n in per_cat.items():
        itype = ann.category_by_id[cid].interface_type
        if itype is not None:
            per_itype[itype] += n
    per_image = Counter(g.image_id for g in ann.instances)
    splits = Counter(im.split for im in ann.images)
    n_images = len(ann.images)
    return ClassSummary(
        n_images=n_images,
        n_categories=len(ann.categories),
        n_instances=len(ann.instances),
        per_category={c.id: per_cat.get(c.id, 0) for c in ann.categories},
        per_interface_type=per_itype,
        images_per_split=dict(sorted(splits.items())),
        max_instances_per_image=max(per_image.values(), default=0),
        mean_instances_per_image=len(ann.instances) / n_images if n_images else 0.0,
        rare_categories=tuple(c.id for c in ann.categories if c.rare),
    )


def group_by_image(items: Sequence) -> dict[int, list]:
    out: dict[int, list] = defaultdict(list)
    for it in items:
        out[it.image_id].append(it)
    return out
