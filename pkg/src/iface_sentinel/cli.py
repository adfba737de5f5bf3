"""``iface-sentinel`` command line.

Exit codes: 0 success, 1 validation or config error, 2 I/O error,
3 internal invariant violation (including failed gradient checks).
Machine-readable output always goes to files; standard output carries a
short human summary.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_INVARIANT = 0, 1, 2, 3


class InvariantViolation(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the validation code instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _write_json(path, doc) -> None:
    from .dataset import dumps

    Path(path).write_text(dumps(doc))


def _threshold(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError("threshold must be in (0, 1]")
    return v


def _shape(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"shape must look like C,H,W, got {text!r}") from None
    if len(dims) != 3:
        raise argparse.ArgumentTypeError(f"shape must look like C,H,W, got {text!r}")
    return dims


# --- subcommands ---------------------------------------------------------------

def cmd_eval(args) -> int:
    from .dataset import load_annotations, load_predictions
    from .evaluator import build_report, format_summary

    ann = load_annotations(args.gt)
    preds = load_predictions(args.pred, ann)
    report = build_report(ann, preds, pr_threshold=args.iou,
                          vessel_conditioned=args.vessel_conditioned, threads=args.threads)
    _write_json(args.out, report)
    print(format_summary(report))
    if report["conditioned"] is not None:
        print(f"\nvessel-conditioned cells: {len(report['conditioned'])}")
        for c in report["conditioned"]:
            print(f"  {c['interface_type']:<6} in {str(c['vessel_category']):<20}"
                  f" n={c['instance_count']:<5} TP={c['tp']:<4} FP={c['fp']:<4} FN={c['fn']}")
    return EXIT_OK


def cmd_stats(args) -> int:
    from .dataset import class_summary, load_annotations, scale_histogram

    ann = load_annotations(args.gt)
    h = scale_histogram(ann)
    s = class_summary(ann)
    fr = h.fractions()
    print(f"images {s.n_images}  categories {s.n_categories}  instances {s.n_instances}")
    print(f"instances per image: max {s.max_instances_per_image}, mean {s.mean_instances_per_image:.2f}")
    print("scale bins:")
    for name in ("small", "medium", "large"):
        print(f"  {name:<7}{getattr(h, name):>8}  {100 * fr[name]:6.2f}%")
    print("interface types:")
    for t, n in s.per_interface_type.items():
        print(f"  {t:<7}{n:>8}")
    print("splits: " + ", ".join(f"{k} {v}" for k, v in s.images_per_split.items()))
    if args.out:
        _write_json(args.out, {
            "scale_bins": {"small": h.small, "medium": h.medium, "large": h.large},
            "scale_fractions": fr,
            "n_images": s.n_images, "n_instances": s.n_instances,
            "per_category": {str(k): v for k, v in s.per_category.items()},
            "per_interface_type": s.per_interface_type,
            "images_per_split": s.images_per_split,
            "max_instances_per_image": s.max_instances_per_image,
            "mean_instances_per_image": s.mean_instances_per_image,
        })
    return EXIT_OK


def cmd_nncheck(args) -> int:
    from .nnref import grad_check

    reports = [grad_check(args.module, args.shape, seed, args.tol) for seed in range(args.seeds)]
    for r in reports:
        worst = max(r.group_errors, key=r.group_errors.get)
        print(f"{r.module} seed {r.seed}: max rel error {r.max_error:.3e} "
              f"(worst group {worst}, input {r.input_error:.3e}) {'PASS' if r.passed else 'FAIL'}")
    ok = all(r.passed for r in reports)
    if args.out:
        _write_json(args.out, {"module": args.module, "shape": list(args.shape), "tolerance": args.tol,
                               "passed": ok, "runs": [r.to_json() for r in reports]})
    if not ok:
        raise InvariantViolation(f"gradient check exceeded tolerance {args.tol}")
    return EXIT_OK


def _load_mask(path):
    from .colorattr import load_image
    from .geometry import BinaryMask, RleMask, rle_decode

    path = Path(path)
    if path.suffix.lower() == ".json":
        doc = json.loads(path.read_text())
        return rle_decode(RleMask.from_json(doc.get("rle", doc)))
    return BinaryMask(load_image(path).max(axis=2) > 0)


def cmd_color(args) -> int:
    from .colorattr import color_stats, load_image, pseudo_label

    stats = color_stats(load_image(args.image), _load_mask(args.mask))
    lab = pseudo_label(stats, args.sat_threshold)
    r, g, b = stats.mean_rgb
    print(f"pixels {stats.pixel_count}  mean RGB ({r:.1f}, {g:.1f}, {b:.1f})  "
          f"saturation {stats.mean_saturation:.4f}  value {stats.mean_value:.4f}")
    print(f"label {lab.label} (confidence {lab.confidence:.3f}, threshold {args.sat_threshold})")
    if args.out:
        _write_json(args.out, {"mean_rgb": list(stats.mean_rgb), "mean_saturation": stats.mean_saturation,
                               "mean_value": stats.mean_value, "pixel_count": stats.pixel_count,
                               "label": lab.label, "confidence": lab.confidence,
                               "sat_threshold": args.sat_threshold})
    return EXIT_OK


def parse_pipeline(spec: str):
    """``kind:class[,class]`` with an optional ``@x0,y0,x1,y1`` region."""
    from .descriptors import DescriptorError
    from .geometry import BBox

    head, _, region = spec.partition("@")
    kind, sep, classes = head.partition(":")
    if not sep or kind not in ("pair_distance", "solid_area"):
        raise DescriptorError(f"pipeline spec {spec!r}: expected pair_distance:<upper>,<lower> "
                              "or solid_area:<id>[,<id>...]")
    try:
        ids = tuple(int(c) for c in classes.split(","))
        box = BBox(*(int(v) for v in region.split(","))) if region else None
    except (ValueError, TypeError) as exc:
        raise DescriptorError(f"pipeline spec {spec!r}: {exc}") from None
    if kind == "pair_distance" and len(ids) != 2:
        raise DescriptorError(f"pipeline spec {spec!r}: pair_distance takes exactly two class ids")
    return kind, ids, box


def cmd_descriptors(args) -> int:
    from .descriptors import (
        detect_endpoint,
        detect_jumps,
        detect_onset,
        mask_jumps,
        pair_distance_series,
        smooth,
        solid_area_series,
    )
    from .geometry import BBox
    from .monitor import ingest

    kind, ids, box = parse_pipeline(args.pipeline)
    frames = list(ingest(args.stream, strict=args.strict))
    if box is None:
        sized = next((f.instances[0].rle for f in frames if f.instances), None)
        box = BBox(0, 0, sized.width, sized.height) if sized else BBox(0, 0, 1, 1)
    if kind == "pair_distance":
        series = pair_distance_series(frames, ids[0], ids[1], box)
    else:
        series = solid_area_series(frames, ids, box)
    series = smooth(series, args.smooth)
    series.save_csv(args.out)
    print(f"{series.name}: {len(series)} samples from {len(frames)} frames -> {args.out}")
    if len(series) >= 2 and kind == "pair_distance":
        r = detect_endpoint(series)
        print(f"endpoint (default detector): {r.t_star if r.t_star is not None else 'none'}")
    elif len(series) >= 3:
        jumps = detect_jumps(series)
        onset = detect_onset(mask_jumps(series, jumps))
        print(f"onset: {onset if onset is not None else 'none'}; jumps at {[j.t for j in jumps]}")
    return EXIT_OK


def cmd_monitor(args) -> int:
    from .monitor import export_record, ingest, load_config, run_monitor

    config = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    problems: list[str] = []
    result = run_monitor(ingest(args.stream, strict=args.strict, problems=problems), config,
                         log_to=out / "events.jsonl", threads=args.threads)
    meta = {"stream": Path(args.stream).name, "config": Path(args.config).name,
            "skipped_records": len(problems)}
    export_record(result, config, out, meta)
    print(f"{result.n_frames} frames, {len(result.events)} events -> {out}")
    for e in result.events:
        extra = ""
        for key in ("t_star", "t_onset", "t_jump"):
            if key in e.payload:
                extra = f"  {key}={e.payload[key]:.3f}"
        print(f"  {e.t:8.3f}s  {e.pipeline:<18}{e.kind:<9}{extra}")
    for p in problems:
        print(f"  skipped: {p}", file=sys.stderr)
    return EXIT_OK


def cmd_fixture(args) -> int:
    from .dataset import save_annotations, save_predictions

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "eval":
        from .fixtures import FixtureSpec, make_fixture

        fx = make_fixture(FixtureSpec(n_images=args.images), args.seed)
        save_annotations(fx.annotations, out / "gt.json")
        save_predictions(fx.predictions, out / "pred.json")
        written = ["gt.json", "pred.json"]
    elif args.kind == "paper":
        from .fixtures import paper_shaped_fixture

        save_annotations(paper_shaped_fixture(), out / "gt.json")
        written = ["gt.json"]
    else:
        from .fixtures import crystallization_frames, demo_frames, separation_frames
        from .monitor import write_stream

        make = {"separation": lambda s: separation_frames(s)[0],
                "crystallization": lambda s: crystallization_frames(s)[0],
                "demo": demo_frames}[args.kind]
        write_stream(make(args.seed), out / "stream.jsonl")
        written = ["stream.jsonl"]
    print("wrote " + ", ".join(str(out / w) for w in written))
    return EXIT_OK


# --- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="iface-sentinel", description="Phase-interface evaluation and process monitoring.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def threads(sp):
        sp.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $IFACE_SENTINEL_THREADS or 1; 0 = all cores)")

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--gt", required=True, help="annotation JSON")
    e.add_argument("--pred", required=True, help="prediction JSON")
    e.add_argument("--vessel-conditioned", action="store_true", help="add the vessel-conditioned table")
    e.add_argument("--iou", type=_threshold, default=0.5, help="IoU threshold for P/R (default 0.5)")
    e.add_argument("--out", required=True, help="report JSON path")
    threads(e)
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("stats", help="dataset statistics")
    s.add_argument("--gt", required=True, help="annotation JSON")
    s.add_argument("--out", help="optional JSON output")
    s.set_defaults(fn=cmd_stats)

    n = sub.add_parser("nncheck", help="finite-difference gradient check")
    n.add_argument("--module", choices=("lga", "rcm"), required=True)
    n.add_argument("--shape", type=_shape, default=(4, 6, 6), help="C,H,W (each at most 8)")
    n.add_argument("--seeds", type=int, default=5, help="seeds 0..n-1")
    n.add_argument("--tol", type=float, default=1e-5, help="max relative error")
    n.add_argument("--out", help="optional JSON report")
    n.set_defaults(fn=cmd_nncheck)

    c = sub.add_parser("color", help="colored/colorless pseudo-label for one mask")
    c.add_argument("--image", required=True, help="RGB image (PNG or PPM)")
    c.add_argument("--mask", required=True, help="mask image (nonzero = foreground) or RLE JSON")
    c.add_argument("--sat-threshold", type=float, default=0.15, help="saturation threshold (default 0.15)")
    c.add_argument("--out", help="optional JSON output")
    c.set_defaults(fn=cmd_color)

    d = sub.add_parser("descriptors", help="export a descriptor series as CSV")
    d.add_argument("--stream", required=True, help="stream/1 JSON-lines file or directory")
    d.add_argument("--pipeline", required=True,
                   help="pair_distance:<upper>,<lower>[@x0,y0,x1,y1] or solid_area:<ids>[@...]")
    d.add_argument("--smooth", type=int, default=1, help="moving-median window (odd, default 1)")
    d.add_argument("--strict", action="store_true", help="abort on malformed records")
    d.add_argument("--out", required=True, help="CSV path")
    d.set_defaults(fn=cmd_descriptors)

    m = sub.add_parser("monitor", help="replay a stream through the event engine")
    m.add_argument("--stream", required=True, help="stream/1 JSON-lines file or directory")
    m.add_argument("--config", required=True, help="TOML or JSON monitor config")
    m.add_argument("--out", required=True, help="output directory")
    m.add_argument("--strict", action="store_true", help="abort on malformed records")
    threads(m)
    m.set_defaults(fn=cmd_monitor)

    f = sub.add_parser("fixture", help="write synthetic inputs")
    f.add_argument("--kind", choices=("eval", "paper", "separation", "crystallization", "demo"), required=True)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--images", type=int, default=10, help="image count for --kind eval")
    f.add_argument("--out", required=True, help="output directory")
    f.set_defaults(fn=cmd_fixture)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except InvariantViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as exc:
        # every validation error in the package derives from ValueError
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
