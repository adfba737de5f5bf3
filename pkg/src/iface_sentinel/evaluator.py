"""Instance matching, precision/recall and COCO-style mask AP.

Matching is greedy and one-to-one inside each (image, class): predictions are
visited by descending score (ties keep input order) and each one claims the
unmatched same-class ground truth of highest IoU at or above the threshold
(IoU ties go to the lowest GT index).

AP is the 101-point interpolated area under the precision envelope, with all
images of a class pooled into one ranking. Cross-image score ties are broken
by ``(image_id, input order)`` so that the order images arrive in never
matters. Recall points are compared in exact integer arithmetic
(``tp * 100 >= k * npos``).
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ._parallel import ordered_map
from .dataset import AnnotationSet, Category, GroundTruthInstance, PredictionInstance
from .geometry import containment, iou_matrix

log = logging.getLogger(__name__)

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = 101
UNASSIGNED = "unassigned"


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int, float], ...]
    unmatched_preds: tuple[int, ...]
    unmatched_gts: tuple[int, ...]

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.unmatched_preds)

    @property
    def fn(self) -> int:
        return len(self.unmatched_gts)


def _check_threshold(thr: float) -> None:
    if not (0.0 < thr <= 1.0):
        raise EvaluationError(f"IoU threshold must lie in (0, 1], got {thr}")


def score_order(scores: Sequence[float]) -> np.ndarray:
    """Indices by descending score, stable on ties."""
    return np.argsort(-np.asarray(scores, dtype=float), kind="stable")


def _greedy(order, pred_cls, gt_cls, ious, thr) -> np.ndarray:
    """Per-prediction matched GT index (-1 for none)."""
    matched_gt = np.full(len(pred_cls), -1, dtype=np.int64)
    taken = np.zeros(len(gt_cls), dtype=bool)
    for p in order:
        cand = (gt_cls == pred_cls[p]) & ~taken & (ious[p] >= thr)
        if not cand.any():
            continue
        row = np.where(cand, ious[p], -1.0)
        g = int(np.argmax(row))  # first maximum == lowest GT index
        matched_gt[p] = g
        taken[g] = True
    return matched_gt


def match_instances(preds: Sequence, gts: Sequence, iou_threshold: float = 0.5) -> MatchResult:
    """One-to-one greedy matching within class for a single image.

    ``preds`` need ``image_id``, ``category_id``, ``score`` and ``mask``;
    ``gts`` need ``image_id``, ``category_id`` and ``mask``. Indices in the
    result refer to the input sequences.
    """
    _check_threshold(iou_threshold)
    ids = {x.image_id for x in (*preds, *gts)}
    if len(ids) > 1:
        raise EvaluationError(f"match_instances needs a single image, got ids {sorted(ids)}")
    ious = iou_matrix([p.mask for p in preds], [g.mask for g in gts])
    pred_cls = np.array([p.category_id for p in preds], dtype=np.int64)
    gt_cls = np.array([g.category_id for g in gts], dtype=np.int64)
    matched = _greedy(score_order([p.score for p in preds]), pred_cls, gt_cls, ious, iou_threshold)
    pairs = tuple((p, int(g), float(ious[p, g])) for p, g in enumerate(matched) if g >= 0)
    hit = {g for _, g, _ in pairs}
    return MatchResult(
        pairs=tuple(sorted(pairs)),
        unmatched_preds=tuple(int(p) for p in np.flatnonzero(matched < 0)),
        unmatched_gts=tuple(g for g in range(len(gts)) if g not in hit),
    )


def precision_recall(tp: int, fp: int, fn: int) -> tuple[float, float]:
    if min(tp, fp, fn) < 0:
        raise EvaluationError("counts must be non-negative")
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return p, r


def interpolated_ap(is_tp: np.ndarray, npos: int) -> float:
    """101-point AP from TP flags already in ranking order."""
    if npos <= 0:
        raise EvaluationError("AP is undefined without ground truth")
    is_tp = np.asarray(is_tp, dtype=bool)
    if is_tp.size == 0:
        return 0.0
    tp = np.cumsum(is_tp, dtype=np.int64)
    fp = np.cumsum(~is_tp, dtype=np.int64)
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # first rank reaching recall k/100, i.e. tp*100 >= k*npos
    k = np.arange(RECALL_POINTS, dtype=np.int64)
    idx = np.searchsorted(tp * (RECALL_POINTS - 1), k * npos, side="left")
    q = np.zeros(RECALL_POINTS)
    ok = idx < tp.size
    q[ok] = envelope[idx[ok]]
    return float(q.mean())


# -- dataset-level evaluation ---------------------------------------------------

@dataclass
class _ImageMatches:
    """Per-image matching outcome for every threshold."""
    image_id: int
    pred_ids: list[int]          # indices into the global prediction list
    pred_rank: list[int]         # stable score rank within the image
    tp: np.ndarray               # (n_preds, n_thresholds) bool


def _match_image(image_id, preds, pred_idx, gts, thresholds) -> _ImageMatches:
    ious = iou_matrix([p.mask for p in preds], [g.mask for g in gts])
    pred_cls = np.array([p.category_id for p in preds], dtype=np.int64)
    gt_cls = np.array([g.category_id for g in gts], dtype=np.int64)
    order = score_order([p.score for p in preds])
    rank = np.empty(len(preds), dtype=np.int64)
    rank[order] = np.arange(len(preds))
    tp = np.zeros((len(preds), len(thresholds)), dtype=bool)
    for j, thr in enumerate(thresholds):
        tp[:, j] = _greedy(order, pred_cls, gt_cls, ious, thr) >= 0
    return _ImageMatches(image_id, list(pred_idx), rank.tolist(), tp)


@dataclass(frozen=True)
class ClassMetrics:
    category_id: int
    support: int
    n_predictions: int
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    ap50: float | None
    ap5095: float | None
    ap_per_threshold: tuple[float, ...] = field(default=(), repr=False)

    @property
    def gap(self) -> float | None:
        if self.ap50 is None or self.ap5095 is None:
            return None
        return self.ap50 - self.ap5095


def _ranked_ap(rows, npos, thresholds) -> tuple[float, ...]:
    """rows: (score, image_id, rank, tp_flags) for one class/cell."""
    if not rows:
        return tuple(0.0 for _ in thresholds)
    scores = np.array([r[0] for r in rows])
    img = np.array([r[1] for r in rows])
    rank = np.array([r[2] for r in rows])
    flags = np.array([r[3] for r in rows], dtype=bool).reshape(len(rows), len(thresholds))
    order = np.lexsort((rank, img, -scores))
    return tuple(interpolated_ap(flags[order, j], npos) for j in range(len(thresholds)))


def _pool_by_class(preds, gts, thresholds, threads) -> tuple[dict, dict]:
    by_img_p: dict[int, list[int]] = defaultdict(list)
    by_img_g: dict[int, list[GroundTruthInstance]] = defaultdict(list)
    for i, p in enumerate(preds):
        by_img_p[p.image_id].append(i)
    for g in gts:
        by_img_g[g.image_id].append(g)
    image_ids = sorted(set(by_img_p) | set(by_img_g))

    def work(image_id):
        idx = by_img_p.get(image_id, [])
        return _match_image(image_id, [preds[i] for i in idx], idx, by_img_g.get(image_id, []), thresholds)

    rows: dict[int, list] = defaultdict(list)
    for m in ordered_map(work, image_ids, threads):
        for k, gi in enumerate(m.pred_ids):
            p = preds[gi]
            rows[p.category_id].append((p.score, m.image_id, m.pred_rank[k], m.tp[k]))
    support: dict[int, int] = defaultdict(int)
    for g in gts:
        support[g.category_id] += 1
    return rows, support


def evaluate(
    preds: Sequence[PredictionInstance],
    gts: Sequence[GroundTruthInstance],
    thresholds: Sequence[float] = IOU_THRESHOLDS,
    pr_threshold: float = 0.5,
    categories: Iterable[int] | None = None,
    threads: int | None = None,
) -> dict[int, ClassMetrics]:
    """Per-class metrics; AP fields are None for classes without GT."""
    thresholds = tuple(thresholds)
    for t in thresholds:
        _check_threshold(t)
    _check_threshold(pr_threshold)
    all_thr = thresholds if pr_threshold in thresholds else thresholds + (pr_threshold,)
    rows, support = _pool_by_class(preds, gts, all_thr, threads)
    pr_col = all_thr.index(pr_threshold)
    cats = sorted(set(rows) | set(support) | set(categories or ()))
    out = {}
    for c in cats:
        r, npos = rows.get(c, []), support.get(c, 0)
        tp = int(sum(bool(x[3][pr_col]) for x in r))
        fp, fn = len(r) - tp, npos - tp
        p, rc = precision_recall(tp, fp, fn)
        aps = _ranked_ap(r, npos, all_thr) if npos else None
        per_thr = tuple(aps[all_thr.index(t)] for t in thresholds) if aps else ()
        ap50 = aps[all_thr.index(0.5)] if aps and 0.5 in all_thr else None
        out[c] = ClassMetrics(
            category_id=c, support=npos, n_predictions=len(r), tp=tp, fp=fp, fn=fn,
            precision=p, recall=rc, ap50=ap50,
            ap5095=float(np.mean(per_thr)) if per_thr else None,
            ap_per_threshold=per_thr,
        )
    return out


def average_precision(preds, gts, iou_threshold: float = 0.5, threads: int | None = None) -> dict[int, float]:
    """AP per class at one IoU threshold; classes without GT are absent."""
    res = evaluate(preds, gts, thresholds=(iou_threshold,), pr_threshold=iou_threshold, threads=threads)
    return {c: m.ap_per_threshold[0] for c, m in res.items() if m.support}


def ap_range(preds, gts, threads: int | None = None) -> dict[int, float]:
    """Mean AP over IoU 0.50:0.05:0.95 per class."""
    res = evaluate(preds, gts, thresholds=IOU_THRESHOLDS, threads=threads)
    return {c: m.ap5095 for c, m in res.items() if m.support}


@dataclass(frozen=True)
class MacroSummary:
    included: tuple[int, ...]
    precision: float
    recall: float
    ap50: float
    ap5095: float

    @property
    def gap(self) -> float:
        return self.ap50 - self.ap5095


def macro_report(per_class: Iterable[ClassMetrics], exclude: Iterable[int] = ()) -> MacroSummary:
    """Unweighted means over classes with support that are not excluded."""
    skip = set(exclude)
    rows = [m for m in per_class if m.category_id not in skip and m.support > 0 and m.ap50 is not None]
    if not rows:
        raise EvaluationError("macro_report: every class is excluded")
    n = len(rows)
    return MacroSummary(
        included=tuple(m.category_id for m in rows),
        precision=sum(m.precision for m in rows) / n,
        recall=sum(m.recall for m in rows) / n,
        ap50=sum(m.ap50 for m in rows) / n,
        ap5095=sum(m.ap5095 for m in rows) / n,
    )


# -- vessel-conditioned (hierarchical) protocol ------------------------------------

@dataclass(frozen=True)
class ConditionConfig:
    vessel_iou: float = 0.5
    min_containment: float = 0.5
    pr_threshold: float = 0.5
    thresholds: tuple[float, ...] = IOU_THRESHOLDS


@dataclass(frozen=True)
class ConditionedCell:
    interface_type: str
    vessel_category: str
    instance_count: int
    tp: int
    fp: int
    fn: int
    precision: float | None
    recall: float | None
    ap50: float | None
    ap5095: float | None


def _associate(masks, vessel_masks, min_containment) -> list[int | None]:
    """Index of the vessel holding the largest share of each mask, if any
    share reaches ``min_containment``; ties go to the lowest index."""
    out = []
    for m in masks:
        best, best_c = None, -1.0
        for j, v in enumerate(vessel_masks):
            c = containment(m, v)
            if c >= min_containment and c > best_c:
                best, best_c = j, c
        out.append(best)
    return out


def _conditioned_image(image_id, preds, gts, cats: dict[int, Category], cfg: ConditionConfig):
    """Returns {(itype, vessel name): [rows, npos, fn_at_pr]} for one image,
    rows as (score, image_id, rank, flags)."""
    kind = lambda c: cats[c].kind  # noqa: E731
    v_preds = [p for p in preds if kind(p.category_id) == "vessel"]
    v_gts = [g for g in gts if kind(g.category_id) == "vessel"]
    i_preds = [p for p in preds if kind(p.category_id) == "interface"]
    i_gts = [g for g in gts if kind(g.category_id) == "interface"]

    level1 = match_instances(v_preds, v_gts, cfg.vessel_iou) if v_preds or v_gts else MatchResult((), (), ())
    pred_to_gt_vessel = {p: g for p, g, _ in level1.pairs}

    gt_pos = {g.id: j for j, g in enumerate(v_gts)}
    fallback = _associate([g.mask for g in i_gts], [v.mask for v in v_gts], cfg.min_containment)
    gt_assoc = []
    for g, fb in zip(i_gts, fallback):
        if g.vessel_ref is not None and g.vessel_ref in gt_pos:
            gt_assoc.append(gt_pos[g.vessel_ref])
        else:
            gt_assoc.append(fb)
    pred_assoc = _associate([p.mask for p in i_preds], [v.mask for v in v_preds], cfg.min_containment)

    all_thr = cfg.thresholds if cfg.pr_threshold in cfg.thresholds else cfg.thresholds + (cfg.pr_threshold,)
    rank_order = score_order([p.score for p in i_preds])
    rank = {int(p): r for r, p in enumerate(rank_order)}
    cells: dict[tuple[str, str], list] = defaultdict(lambda: [[], 0])

    def vname(v):
        return cats[v.category_id].name

    for gi, g in enumerate(i_gts):
        a = gt_assoc[gi]
        if a is None:
            log.warning("image %s: interface GT %s lies in no vessel; counted as %r", image_id, g.id, UNASSIGNED)
        key = (cats[g.category_id].interface_type, UNASSIGNED if a is None else vname(v_gts[a]))
        cells[key][1] += 1

    flags = np.zeros((len(i_preds), len(all_thr)), dtype=bool)
    pred_cell: list[tuple[str, str]] = []
    for pi, p in enumerate(i_preds):
        a = pred_assoc[pi]
        vessel = UNASSIGNED if a is None else vname(v_preds[a])
        if a is not None and a in pred_to_gt_vessel:
            vessel = vname(v_gts[pred_to_gt_vessel[a]])
        pred_cell.append((cats[p.category_id].interface_type, vessel))

    # level 2: inside each recognised vessel
    for pv, gv in sorted(pred_to_gt_vessel.items()):
        pis = [i for i, a in enumerate(pred_assoc) if a == pv]
        gis = [i for i, a in enumerate(gt_assoc) if a == gv]
        if not pis or not gis:
            continue
        sub_p = [i_preds[i] for i in pis]
        sub_g = [i_gts[i] for i in gis]
        ious = iou_matrix([p.mask for p in sub_p], [g.mask for g in sub_g])
        pc = np.array([p.category_id for p in sub_p])
        gc = np.array([g.category_id for g in sub_g])
        order = score_order([p.score for p in sub_p])
        for j, thr in enumerate(all_thr):
            m = _greedy(order, pc, gc, ious, thr)
            for k, i in enumerate(pis):
                flags[i, j] = m[k] >= 0

    for pi, p in enumerate(i_preds):
        cells[pred_cell[pi]][0].append((p.score, image_id, rank[pi], flags[pi]))
    return cells, all_thr


def vessel_conditioned_eval(
    ann: AnnotationSet,
    preds: Sequence[PredictionInstance],
    config: ConditionConfig = ConditionConfig(),
    threads: int | None = None,
) -> list[ConditionedCell]:
    """Interface metrics per (interface type, vessel category).

    Level 1 matches vessels at ``vessel_iou``. An interface prediction is
    eligible only when it sits (by containment) inside a predicted vessel
    that was matched at Level 1; eligible predictions are then matched to the
    interface GTs associated with that GT vessel. Ineligible predictions are
    false positives in the cell of the vessel they sit in (or "unassigned");
    GTs of unrecognised vessels are false negatives.
    """
    cats = ann.category_by_id
    by_img_p: dict[int, list] = defaultdict(list)
    for p in preds:
        by_img_p[p.image_id].append(p)
    by_img_g = ann.instances_by_image()
    image_ids = sorted(set(by_img_p) | set(by_img_g))

    results = ordered_map(
        lambda i: _conditioned_image(i, by_img_p.get(i, []), by_img_g.get(i, []), cats, config),
        image_ids,
        threads,
    )
    merged: dict[tuple[str, str], list] = defaultdict(lambda: [[], 0])
    all_thr = config.thresholds
    if config.pr_threshold not in all_thr:
        all_thr = all_thr + (config.pr_threshold,)
    for cells, _ in results:
        for key, (rows, npos) in cells.items():
            merged[key][0].extend(rows)
            merged[key][1] += npos

    pr_col = all_thr.index(config.pr_threshold)
    out = []
    for key in sorted(merged):
        rows, npos = merged[key]
        tp = int(sum(bool(r[3][pr_col]) for r in rows))
        fp, fn = len(rows) - tp, npos - tp
        if npos:
            p, r = precision_recall(tp, fp, fn)
            aps = _ranked_ap(rows, npos, all_thr)
            ap50 = aps[all_thr.index(0.5)] if 0.5 in all_thr else None
            ap5095 = float(np.mean([aps[all_thr.index(t)] for t in config.thresholds]))
        else:
            p = r = ap50 = ap5095 = None
        out.append(ConditionedCell(key[0], key[1], npos, tp, fp, fn, p, r, ap50, ap5095))
    return out


# -- report -------------------------------------------------------------------------

REPORT_SCHEMA = "report/1"


def _pct(x: float | None) -> float | None:
    return None if x is None else round(100.0 * x, 2)


def build_report(
    ann: AnnotationSet,
    preds: Sequence[PredictionInstance],
    pr_threshold: float = 0.5,
    vessel_conditioned: bool = False,
    threads: int | None = None,
) -> dict:
    """Everything ``report.json`` holds: raw ratios plus a rounded
    percentage view for display."""
    per_class = evaluate(
        preds, ann.instances, pr_threshold=pr_threshold,
        categories=[c.id for c in ann.categories], threads=threads,
    )
    cats = ann.category_by_id
    rare = {c.id for c in ann.categories if c.rare}
    rows = []
    for cid in sorted(per_class):
        m = per_class[cid]
        c = cats.get(cid)
        rows.append({
            "category_id": cid,
            "name": c.name if c else str(cid),
            "kind": c.kind if c else None,
            "interface_type": c.interface_type if c else None,
            "rare": cid in rare,
            "support": m.support,
            "n_predictions": m.n_predictions,
            "tp": m.tp, "fp": m.fp, "fn": m.fn,
            "precision": m.precision, "recall": m.recall,
            "ap50": m.ap50, "ap5095": m.ap5095, "gap": m.gap,
            "ap_per_threshold": list(m.ap_per_threshold),
            "display": {
                "precision": _pct(m.precision), "recall": _pct(m.recall),
                "ap50": _pct(m.ap50), "ap5095": _pct(m.ap5095), "gap": _pct(m.gap),
            } if m.support and cid not in rare else None,
        })

    def macro(ids):
        ms = [per_class[i] for i in ids if i in per_class]
        try:
            s = macro_report(ms, exclude=rare)
        except EvaluationError:
            return None
        return {
            "included": list(s.included),
            "precision": s.precision, "recall": s.recall,
            "ap50": s.ap50, "ap5095": s.ap5095, "gap": s.gap,
            "display": {k: _pct(getattr(s, k)) for k in ("precision", "recall", "ap50", "ap5095", "gap")},
        }

    report = {
        "schema": REPORT_SCHEMA,
        "iou_thresholds": list(IOU_THRESHOLDS),
        "pr_iou_threshold": pr_threshold,
        "per_class": rows,
        "macro": {
            "interfaces": macro([c.id for c in ann.categories if c.kind == "interface"]),
            "all": macro(sorted(per_class)),
        },
        "conditioned": None,
    }
    if vessel_conditioned:
        cells = vessel_conditioned_eval(ann, preds, ConditionConfig(pr_threshold=pr_threshold), threads)
        report["conditioned"] = [
            {
                "interface_type": c.interface_type, "vessel_category": c.vessel_category,
                "instance_count": c.instance_count, "tp": c.tp, "fp": c.fp, "fn": c.fn,
                "precision": c.precision, "recall": c.recall, "ap50": c.ap50, "ap5095": c.ap5095,
            }
            for c in cells
        ]
    return report


def format_summary(report: dict) -> str:
    """Human-readable table for standard output."""
    lines = [f"{'class':<20}{'n':>7}{'P/%':>9}{'R/%':>9}{'AP50/%':>9}{'AP50-95/%':>11}{'gap':>8}"]

    def fmt(v):
        return f"{v:.2f}" if v is not None else "/"

    for r in report["per_class"]:
        if r["kind"] != "interface" and r["support"] == 0:
            continue
        d = r["display"] or {}
        lines.append(
            f"{r['name']:<20}{r['support']:>7}{fmt(d.get('precision')):>9}{fmt(d.get('recall')):>9}"
            f"{fmt(d.get('ap50')):>9}{fmt(d.get('ap5095')):>11}{fmt(d.get('gap')):>8}"
        )
    for name, m in report["macro"].items():
        if m is None:
            continue
        d = m["display"]
        lines.append(
            f"{'macro (' + name + ')':<20}{'/':>7}{fmt(d['precision']):>9}{fmt(d['recall']):>9}"
            f"{fmt(d['ap50']):>9}{fmt(d['ap5095']):>11}{fmt(d['gap']):>8}"
        )
    return "\n".join(lines)
