"""Streaming event engine over post-inference frame records.

Input is a JSON-lines stream, one frame per line::

    {"version": "stream/1"}                                  (optional header)
    {"t": 0.0, "frame_id": 0, "instances": [{"category_id": 24,
        "rle": {"w": 64, "h": 320, "runs": [...]}, "score": 0.91}]}

Each configured pipeline turns frames into a descriptor series and runs a
small state machine: ``idle`` until its start rule holds, ``active`` while
its detector watches the series, ``closed`` once the endpoint or onset has
fired. Solid-area pipelines keep guarding against level jumps after closing.
Events go to a JSON-lines log, one line per event, flushed as written.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

from . import __version__
from ._parallel import OrderedPool
from .dataset import PredictionInstance, dumps
from .descriptors import (
    DescriptorSeries,
    EndpointConfig,
    EndpointDetector,
    FrameRecord,
    JumpConfig,
    JumpDetector,
    OnsetConfig,
    OnsetDetector,
    frame_pair_distance,
    frame_solid_area,
)
from .fixtures import default_categories
from .geometry import BBox, GeometryError, RleMask

log = logging.getLogger(__name__)

STREAM_VERSION = "stream/1"
RECORD_SCHEMA = "record/1"
RECORD_SCHEMA_FILE = Path(__file__).parent / "schemas" / "record.schema.json"
PIPELINE_KINDS = ("pair_distance", "solid_area")
START_RULES = ("class_appears", "value_crosses")
EVENT_KINDS = ("start", "endpoint", "onset", "jump", "end")
_NAME_RE = re.compile(r"^[A-Za-z0-9_.-]+$")

__all__ = [
    "ConfigError", "Event", "FrameRecord", "IngestError", "MonitorConfig", "MonitorResult",
    "PipelineSpec", "StartRule", "export_record", "ingest", "load_config", "parse_config", "parse_stream_line",
    "run_monitor", "select_keyframes", "write_stream",
]


class IngestError(ValueError):
    def __init__(self, msg: str, line: int | None = None, source: str | None = None):
        where = f"{source}:{line}: " if line is not None else ""
        super().__init__(where + msg)
        self.line = line
        self.source = source


class ConfigError(ValueError):
    pass


# --- ingest --------------------------------------------------------------------

def parse_stream_line(obj) -> FrameRecord:
    if not isinstance(obj, dict):
        raise ValueError("record must be a JSON object")
    if "version" in obj and obj["version"] != STREAM_VERSION:
        raise ValueError(f"unsupported stream version {obj['version']!r}")
    for key in ("t", "frame_id", "instances"):
        if key not in obj:
            raise ValueError(f"missing field {key!r}")
    t, fid, raw = obj["t"], obj["frame_id"], obj["instances"]
    if isinstance(t, bool) or not isinstance(t, (int, float)):
        raise ValueError("t must be a number")
    if isinstance(fid, bool) or not isinstance(fid, int):
        raise ValueError("frame_id must be an integer")
    if not isinstance(raw, list):
        raise ValueError("instances must be a list")
    insts = []
    for k, r in enumerate(raw):
        if not isinstance(r, dict):
            raise ValueError(f"instances[{k}] must be an object")
        for key in ("category_id", "score", "rle"):
            if key not in r:
                raise ValueError(f"instances[{k}]: missing field {key!r}")
        cat, score = r["category_id"], r["score"]
        try:
            rle = RleMask.from_json(r["rle"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"instances[{k}].rle: malformed ({exc})") from None
        if isinstance(cat, bool) or not isinstance(cat, int):
            raise ValueError(f"instances[{k}].category_id must be an integer")
        if isinstance(score, bool) or not isinstance(score, (int, float)):
            raise ValueError(f"instances[{k}].score must be a number")
        try:
            insts.append(PredictionInstance(fid, cat, rle, float(score), r.get("color_attr")))
        except ValueError as exc:
            raise ValueError(f"instances[{k}]: {exc}") from None
    return FrameRecord(float(t), fid, tuple(insts))


def _stream_files(source: Path) -> list[Path]:
    if source.is_dir():
        return sorted(p for p in source.iterdir() if p.suffix == ".jsonl")
    if not source.exists():
        raise FileNotFoundError(f"no such stream: {source}")
    return [source]


def ingest(source, strict: bool = False, problems: list[str] | None = None) -> Iterator[FrameRecord]:
    """Yield frame records from a ``.jsonl`` file or a directory of them.

    Records must have strictly increasing ``frame_id`` and ``t`` and share one
    frame size. Bad lines raise ``IngestError`` when ``strict``; otherwise they
    are skipped and described in ``problems`` (and the log).
    """
    files = _stream_files(Path(source))
    last_id = last_t = None
    size = None
    for path in files:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    try:
                        obj = json.loads(line)
                    except json.JSONDecodeError as exc:
                        raise ValueError(f"invalid JSON ({exc.msg})") from None
                    if isinstance(obj, dict) and "frame_id" not in obj and "version" in obj:
                        if obj["version"] != STREAM_VERSION:
                            raise ValueError(f"unsupported stream version {obj['version']!r}")
                        continue
                    rec = parse_stream_line(obj)
                    if last_id is not None and rec.frame_id <= last_id:
                        raise ValueError(f"frame_id {rec.frame_id} does not increase (previous {last_id})")
                    if last_t is not None and rec.t <= last_t:
                        raise ValueError(f"t {rec.t} does not increase (previous {last_t})")
                    for inst in rec.instances:
                        dims = (inst.rle.width, inst.rle.height)
                        if size is None:
                            size = dims
                        elif dims != size:
                            raise ValueError(f"mask size {dims} differs from stream size {size}")
                except ValueError as exc:
                    err = IngestError(str(exc), lineno, str(path))
                    if strict:
                        raise err from None
                    log.warning("skipping record: %s", err)
                    if problems is not None:
                        problems.append(str(err))
                    continue
                last_id, last_t = rec.frame_id, rec.t
                yield rec


def frame_to_json(f: FrameRecord) -> dict:
    insts = []
    for p in f.instances:
        d = {"category_id": p.category_id, "rle": p.rle.to_json(), "score": p.score}
        if p.color_attr is not None:
            d["color_attr"] = p.color_attr
        insts.append(d)
    return {"t": f.t, "frame_id": f.frame_id, "instances": insts}


def write_stream(frames: Iterable[FrameRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"version": STREAM_VERSION}) + "\n")
        for f in frames:
            fh.write(json.dumps(frame_to_json(f), separators=(",", ":")) + "\n")


# --- config --------------------------------------------------------------------

@dataclass(frozen=True)
class StartRule:
    type: str = "class_appears"
    classes: tuple[int, ...] = ()        # empty: the pipeline's own classes
    threshold: float | None = None
    direction: str = "above"

    def to_json(self) -> dict:
        d = {"type": self.type}
        if self.type == "class_appears":
            if self.classes:
                d["classes"] = list(self.classes)
        else:
            d["threshold"] = self.threshold
            d["direction"] = self.direction
        return d


@dataclass(frozen=True)
class PipelineSpec:
    name: str
    kind: str
    classes: tuple[int, ...]
    region: BBox
    start_rule: StartRule = StartRule()
    endpoint: EndpointConfig = EndpointConfig()
    onset: OnsetConfig = OnsetConfig()
    jumps: JumpConfig = JumpConfig()

    def to_json(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "classes": list(self.classes),
             "region": self.region.as_list(), "start_rule": self.start_rule.to_json()}
        if self.kind == "pair_distance":
            e = self.endpoint
            d["endpoint"] = {"window": e.window, "eps": e.eps, "k": e.k}
        else:
            d["onset"] = {"min_value": self.onset.min_value, "hold": self.onset.hold}
            j = self.jumps
            d["jumps"] = {"z_threshold": j.z_threshold, "window": j.window, "min_scale": j.min_scale}
        return d


@dataclass(frozen=True)
class MonitorConfig:
    pipelines: tuple[PipelineSpec, ...]
    keyframes_per_event: int = 3
    categories: tuple[int, ...] = ()

    def to_json(self) -> dict:
        return {"categories": list(self.categories), "keyframes_per_event": self.keyframes_per_event,
                "pipelines": [p.to_json() for p in self.pipelines]}


def _req(obj, key, path):
    if key not in obj:
        raise ConfigError(f"{path}: missing field {key!r}")
    return obj[key]


def _num(v, path, integer=False):
    ok = isinstance(v, int) if integer else isinstance(v, (int, float))
    if isinstance(v, bool) or not ok:
        raise ConfigError(f"{path}: expected {'an integer' if integer else 'a number'}, got {v!r}")
    return v


def _int_list(v, path):
    if not isinstance(v, list) or not v:
        raise ConfigError(f"{path}: expected a non-empty list of class ids")
    return tuple(_num(x, f"{path}[{i}]", integer=True) for i, x in enumerate(v))


def _sub(obj, key, path, fields_):
    raw = obj.get(key, {})
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}.{key}: expected an object")
    unknown = set(raw) - set(fields_)
    if unknown:
        raise ConfigError(f"{path}.{key}: unknown keys {sorted(unknown)}")
    return {k: _num(v, f"{path}.{key}.{k}", integer=fields_[k]) for k, v in raw.items()}


def parse_config(doc) -> MonitorConfig:
    if not isinstance(doc, dict):
        raise ConfigError("$: config must be an object")
    if "categories" in doc:
        known = _int_list(doc["categories"], "$.categories")
    else:
        known = tuple(c.id for c in default_categories())
    k = _num(doc.get("keyframes_per_event", 3), "$.keyframes_per_event", integer=True)
    if k < 1:
        raise ConfigError("$.keyframes_per_event: must be >= 1")
    raw = _req(doc, "pipelines", "$")
    if not isinstance(raw, list) or not raw:
        raise ConfigError("$.pipelines: need at least one pipeline")
    specs, names = [], set()
    for i, p in enumerate(raw):
        path = f"$.pipelines[{i}]"
        if not isinstance(p, dict):
            raise ConfigError(f"{path}: expected an object")
        name = _req(p, "name", path)
        if not isinstance(name, str) or not _NAME_RE.match(name):
            raise ConfigError(f"{path}.name: use letters, digits, '_', '-', '.'")
        if name in names:
            raise ConfigError(f"{path}.name: duplicate pipeline {name!r}")
        names.add(name)
        kind = _req(p, "kind", path)
        if kind not in PIPELINE_KINDS:
            raise ConfigError(f"{path}.kind: expected one of {PIPELINE_KINDS}, got {kind!r}")
        classes = _int_list(_req(p, "classes", path), f"{path}.classes")
        if kind == "pair_distance" and len(classes) != 2:
            raise ConfigError(f"{path}.classes: pair_distance needs [upper, lower]")
        reg = _req(p, "region", path)
        try:
            region = BBox(*[_num(v, f"{path}.region", integer=True) for v in reg])
        except (TypeError, GeometryError) as exc:
            raise ConfigError(f"{path}.region: {exc}") from None
        sr = p.get("start_rule", {"type": "class_appears"})
        if not isinstance(sr, dict) or sr.get("type") not in START_RULES:
            raise ConfigError(f"{path}.start_rule.type: expected one of {START_RULES}")
        if sr["type"] == "class_appears":
            rule_classes = _int_list(sr["classes"], f"{path}.start_rule.classes") if "classes" in sr else ()
            rule = StartRule("class_appears", rule_classes)
        else:
            thr = _num(_req(sr, "threshold", f"{path}.start_rule"), f"{path}.start_rule.threshold")
            direction = sr.get("direction", "above")
            if direction not in ("above", "below"):
                raise ConfigError(f"{path}.start_rule.direction: 'above' or 'below'")
            rule = StartRule("value_crosses", (), float(thr), direction)
        for c in classes + rule.classes:
            if c not in known:
                raise ConfigError(f"{path}: unknown class id {c}")
        try:
            endpoint = EndpointConfig(**_sub(p, "endpoint", path, {"window": False, "eps": False, "k": True}))
            onset = OnsetConfig(**_sub(p, "onset", path, {"min_value": False, "hold": True}))
            jumps = JumpConfig(**_sub(p, "jumps", path, {"z_threshold": False, "window": True,
                                                          "min_scale": False}))
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{path}: {exc}") from None
        specs.append(PipelineSpec(name, kind, classes, region, rule, endpoint, onset, jumps))
    return MonitorConfig(tuple(specs), k, tuple(known))


def load_config(path) -> MonitorConfig:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        try:
            doc = tomllib.loads(raw.decode("utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML ({exc})") from None
    else:
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return parse_config(doc)


# --- events and keyframes ----------------------------------------------------------

@dataclass(frozen=True)
class Event:
    pipeline: str
    kind: str
    t: float
    payload: dict = field(default_factory=dict)
    keyframe_ids: tuple[int, ...] = ()

    def to_json(self) -> dict:
        return {"pipeline": self.pipeline, "kind": self.kind, "t": self.t,
                "payload": self.payload, "keyframe_ids": list(self.keyframe_ids)}


@dataclass(frozen=True)
class _Candidate:
    t: float
    frame_id: int
    score: float


def _frame_score(f: FrameRecord) -> float:
    return float(np.mean([p.score for p in f.instances])) if f.instances else 0.0


def _pick(cands: Sequence[_Candidate], k: int) -> tuple[int, ...]:
    top = sorted(cands, key=lambda c: (-c.score, c.t, c.frame_id))[:k]
    return tuple(c.frame_id for c in sorted(top, key=lambda c: (c.t, c.frame_id)))


def select_keyframes(window: Sequence[FrameRecord], k: int) -> list[int]:
    """Frame ids of the ``k`` most confident frames, in time order.

    Confidence is the mean instance score (0 for empty frames); ties go to
    the earlier frame.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not window:
        raise ValueError("keyframe window is empty")
    return list(_pick([_Candidate(f.t, f.frame_id, _frame_score(f)) for f in window], k))


# --- engine ----------------------------------------------------------------------------

class _Pipeline:
    def __init__(self, spec: PipelineSpec, k: int):
        self.spec = spec
        self.k = k
        self.state = "idle"
        self.t: list[float] = []
        self.v: list[float] = []
        self.window: list[_Candidate] = []
        self.checked_size = False
        if spec.kind == "pair_distance":
            self.endpoint = EndpointDetector(spec.endpoint)
        else:
            self.jumps = JumpDetector(spec.jumps)
            self.onset = OnsetDetector(spec.onset)

    def _measure(self, f: FrameRecord) -> float | None:
        s = self.spec
        if s.kind == "pair_distance":
            return frame_pair_distance(f, s.classes[0], s.classes[1], s.region)
        return float(frame_solid_area(f, s.classes, s.region))

    def _started(self, f: FrameRecord, value: float | None) -> bool:
        rule = self.spec.start_rule
        if rule.type == "value_crosses":
            if value is None:
                return False
            return value >= rule.threshold if rule.direction == "above" else value <= rule.threshold
        present = {p.category_id for p in f.instances}
        if rule.classes:
            return set(rule.classes) <= present
        if self.spec.kind == "pair_distance":
            return value is not None
        return bool(present & set(self.spec.classes))

    def _emit(self, out, kind, t, payload, cand):
        cands = self.window or [cand]
        out.append(Event(self.spec.name, kind, float(t), payload, _pick(cands, self.k)))
        self.window = []

    def step(self, f: FrameRecord, score: float) -> list[Event]:
        if not self.checked_size and f.instances:
            r, m = self.spec.region, f.instances[0].rle
            if r.x_max > m.width or r.y_max > m.height:
                raise ConfigError(f"pipeline {self.spec.name}: region {r.as_list()} exceeds "
                                  f"frame size {m.width}x{m.height}")
            self.checked_size = True
        value = self._measure(f)
        if value is not None:
            self.t.append(f.t)
            self.v.append(value)
        cand = _Candidate(f.t, f.frame_id, score)
        self.window.append(cand)
        out: list[Event] = []
        if self.state == "idle":
            if not self._started(f, value):
                return out
            self.state = "active"
            self._emit(out, "start", f.t, {"value": value}, cand)
        if value is None:
            return out
        if self.spec.kind == "pair_distance":
            if self.state == "active":
                res = self.endpoint.push(f.t, value)
                if res is not None:
                    self._emit(out, "endpoint", f.t, {**res.to_json(), "value": value}, cand)
                    self._emit(out, "end", f.t, {"reason": "endpoint"}, cand)
                    self.state = "closed"
            return out
        jump = self.jumps.push(f.t, value)
        if jump is not None:
            self._emit(out, "jump", f.t, {"t_jump": jump.t, "size": jump.size, "value": value}, cand)
        if self.state == "active":
            corrected = self.jumps.corrected(value)
            t_on = self.onset.push(f.t, corrected)
            if t_on is not None:
                self._emit(out, "onset", f.t, {"t_onset": t_on, "value": corrected}, cand)
                self._emit(out, "end", f.t, {"reason": "onset"}, cand)
                self.state = "closed"
        return out

    def series(self) -> DescriptorSeries:
        units = "pixels" if self.spec.kind == "pair_distance" else "pixels^2"
        return DescriptorSeries.of(self.spec.name, self.t, self.v, units)


@dataclass
class MonitorResult:
    events: list[Event]
    series: dict[str, DescriptorSeries]
    n_frames: int = 0


class EventLog:
    """Append-only JSON-lines sink, flushed after every event."""

    def __init__(self, target: str | Path | IO[str]):
        self._own = not hasattr(target, "write")
        self.fh = open(target, "w", encoding="utf-8") if self._own else target

    def write(self, e: Event) -> None:
        self.fh.write(json.dumps(e.to_json(), separators=(",", ":")) + "\n")
        self.fh.flush()

    def close(self) -> None:
        if self._own:
            self.fh.close()


def run_monitor(frames: Iterable[FrameRecord], config: MonitorConfig, log_to=None,
                threads: int | None = None) -> MonitorResult:
    """Run every pipeline over the stream.

    Pipelines may step concurrently, but events are always ordered by frame,
    then pipeline order in the config, then emission order.
    """
    pipes = [_Pipeline(s, config.keyframes_per_event) for s in config.pipelines]
    sink = EventLog(log_to) if log_to is not None else None
    events: list[Event] = []
    n = 0
    try:
        with OrderedPool(threads) as pool:
            for f in frames:
                n += 1
                score = _frame_score(f)
                for batch in pool.map(lambda p: p.step(f, score), pipes):
                    for e in batch:
                        events.append(e)
                        if sink is not None:
                            sink.write(e)
    finally:
        if sink is not None:
            sink.close()
    return MonitorResult(events, {p.spec.name: p.series() for p in pipes}, n)


def export_record(result: MonitorResult, config: MonitorConfig, out_dir,
                  metadata: dict | None = None) -> Path:
    """Write one CSV per pipeline plus ``record.json`` into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        refs = []
        for name, s in result.series.items():
            csv_name = f"{name}.csv"
            s.save_csv(out / csv_name)
            refs.append({"pipeline": name, "csv": csv_name, "units": s.units, "n_samples": len(s)})
        keyframes = sorted({k for e in result.events for k in e.keyframe_ids})
        doc = {
            "schema": RECORD_SCHEMA,
            "tool": {"name": "iface-sentinel", "version": __version__},
            "metadata": dict(metadata or {}),
            "config": config.to_json(),
            "n_frames": result.n_frames,
            "events": [e.to_json() for e in result.events],
            "series": refs,
            "keyframe_ids": keyframes,
        }
        path = out / "record.json"
        path.write_text(dumps(doc))
    except OSError as exc:
        raise OSError(f"cannot write experiment record to {out}: {exc.strerror or exc}") from exc
    return path
