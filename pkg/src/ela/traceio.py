"""Line-delimited JSON attention traces.

One record per line, keys in the fixed order ``epoch, layer_index,
head_index, weights``; floats use Python's shortest round-trip repr, so
writing a freshly read canonical file reproduces it byte for byte.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

from .exceptions import ReportIOError, ValidationError

__all__ = ["TraceRecord", "iter_trace", "read_trace", "write_trace", "atomic_write_text", "dumps_record"]

SUM_TOL = 1e-6


@dataclass(frozen=True)
class TraceRecord:
    epoch: int
    layer_index: int
    head_index: int
    weights: tuple[float, ...]

    def __post_init__(self):
        for name in ("epoch", "layer_index", "head_index"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int):
                raise ValidationError(f"{name} must be an integer, got {value!r}")
        if self.epoch < 1 or self.layer_index < 1 or self.head_index < 0:
            raise ValidationError(f"{self.key}: epoch/layer must be >= 1 and head >= 0")
        w = tuple(float(x) for x in self.weights)
        if len(w) != self.layer_index:
            raise ValidationError(f"{self.key}: expected {self.layer_index} weights, got {len(w)}")
        if any(not math.isfinite(x) or x < 0 for x in w):
            raise ValidationError(f"{self.key}: weights must be finite and non-negative")
        total = math.fsum(w)
        if abs(total - 1.0) > SUM_TOL:
            raise ValidationError(f"{self.key}: weights sum to {total!r}, not 1")
        object.__setattr__(self, "weights", w)

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.epoch, self.layer_index, self.head_index)


def dumps_record(rec: TraceRecord) -> str:
    return json.dumps(
        {"epoch": rec.epoch, "layer_index": rec.layer_index, "head_index": rec.head_index,
         "weights": list(rec.weights)},
        separators=(",", ":"),
        allow_nan=False,
    )


def _parse_line(line: str, lineno: int) -> TraceRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"line {lineno}: malformed record ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise ValidationError(f"line {lineno}: record must be a JSON object")
    expected = {"epoch", "layer_index", "head_index", "weights"}
    if set(obj) != expected:
        raise ValidationError(f"line {lineno}: record keys must be {sorted(expected)}, got {sorted(obj)}")
    if not isinstance(obj["weights"], list):
        raise ValidationError(f"line {lineno}: weights must be a list")
    try:
        return TraceRecord(obj["epoch"], obj["layer_index"], obj["head_index"], tuple(obj["weights"]))
    except ValidationError as exc:
        raise ValidationError(f"line {lineno}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"line {lineno}: {exc}") from None


def iter_trace(path) -> Iterator[TraceRecord]:
    """Yield validated records in file order."""
    seen: dict[tuple[int, int, int], int] = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise ReportIOError(f"cannot read trace {path}: {exc.strerror}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = _parse_line(line, lineno)
            if rec.key in seen:
                raise ValidationError(
                    f"line {lineno}: duplicate record {rec.key} (first seen on line {seen[rec.key]})"
                )
            seen[rec.key] = lineno
            yield rec


def read_trace(path) -> list[TraceRecord]:
    return list(iter_trace(path))


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise ReportIOError(f"cannot write {path}: {exc.strerror}") from exc


def write_trace(records: Iterable[TraceRecord], path) -> None:
    lines = []
    seen = set()
    for rec in records:
        if not isinstance(rec, TraceRecord):
            rec = TraceRecord(rec.epoch, rec.layer_index, rec.head_index, tuple(rec.weights))
        if rec.key in seen:
            raise ValidationError(f"duplicate record {rec.key}")
        seen.add(rec.key)
        lines.append(dumps_record(rec) + "\n")
    atomic_write_text(path, "".join(lines))
