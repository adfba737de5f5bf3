"""Binary parameter files.

Layout: a single UTF-8 JSON header line terminated by ``\\n``, then the
concatenated groups as little-endian float64 in header order. The header
records ``format`` (``nnref/1``), ``module``, ``channels`` and, per group,
``name``, ``shape`` and ``offset`` (in elements).
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .ops import NNRefError
from .params import LgaParams, RcmParams

FORMAT = "nnref/1"
_CLASSES = {"lga": LgaParams, "rcm": RcmParams}


def module_name(p) -> str:
    for name, cls in _CLASSES.items():
        if isinstance(p, cls):
            return name
    raise NNRefError(f"unsupported parameter type {type(p).__name__}")


def to_bytes(p) -> bytes:
    groups, chunks, offset = [], [], 0
    for name, arr in p.groups().items():
        arr = np.asarray(arr, dtype="<f8")
        groups.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.reshape(-1).tobytes())
        offset += arr.size
    header = {"format": FORMAT, "module": module_name(p), "channels": p.channels,
              "count": offset, "groups": groups}
    return json.dumps(header, separators=(",", ":")).encode() + b"\n" + b"".join(chunks)


def from_bytes(blob: bytes):
    head, sep, body = blob.partition(b"\n")
    if not sep:
        raise NNRefError("missing header terminator")
    try:
        header = json.loads(head)
    except json.JSONDecodeError as exc:
        raise NNRefError(f"bad header: {exc}") from None
    if header.get("format") != FORMAT:
        raise NNRefError(f"unsupported format {header.get('format')!r}")
    cls = _CLASSES.get(header.get("module"))
    if cls is None:
        raise NNRefError(f"unknown module {header.get('module')!r}")
    data = np.frombuffer(body, dtype="<f8")
    if data.size != header.get("count") or len(body) % 8:
        raise NNRefError("payload length does not match header")
    groups = {}
    for g in header["groups"]:
        n = int(np.prod(g["shape"], dtype=np.int64))
        groups[g["name"]] = data[g["offset"]:g["offset"] + n].reshape(g["shape"]).astype(np.float64)
    return cls.from_groups(groups)


def save_params(path, p) -> None:
    Path(path).write_bytes(to_bytes(p))


def load_params(path):
    return from_bytes(Path(path).read_bytes())
