"""Reading and writing trace files, ground truth and JSON reports."""
from __future__ import annotations

import csv
import json
import math
from importlib import resources
from pathlib import Path

import numpy as np

from .data import Ensemble, GroundTruth, Trace
from .errors import DataError

__all__ = [
    "SCHEMA_VERSION",
    "read_traces",
    "write_traces",
    "write_truth",
    "read_truth",
    "dump_json",
    "load_json",
    "infer_format",
    "report_schema",
]

SCHEMA_VERSION = "1.0"
CSV_HEADER = ("trace_id", "t", "value")


def infer_format(path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".csv":
        return "csv"
    if suffix in (".jsonl", ".ndjson"):
        return "jsonl"
    raise DataError(f"{path}: cannot infer trace format from suffix {suffix!r}")


def _parse_float(text, where):
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"{where}: cannot parse value {text!r}") from None
    if not math.isfinite(v):
        raise DataError(f"{where}: non-finite value {text!r}")
    return v


def _read_csv(path):
    rows = {}
    order = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise DataError(f"{path}:1: header must be {','.join(CSV_HEADER)}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{line}: expected 3 fields, got {len(row)}")
            tid, t_text, v_text = (c.strip() for c in row)
            try:
                t = int(t_text)
            except ValueError:
                raise DataError(f"{path}:{line}: t must be an integer, got {t_text!r}") from None
            v = _parse_float(v_text, f"{path}:{line}")
            if tid not in rows:
                rows[tid] = []
                order.append(tid)
            rows[tid].append((t, v, line))
    traces = []
    for tid in order:
        entries = sorted(rows[tid], key=lambda e: (e[0], e[2]))
        ts = [e[0] for e in entries]
        for i in range(1, len(ts)):
            if ts[i] == ts[i - 1]:
                raise DataError(f"{path}:{entries[i][2]}: duplicate (trace_id, t) = ({tid}, {ts[i]})")
            if ts[i] != ts[i - 1] + 1:
                raise DataError(f"{path}: trace {tid!r} has a gap in t after t={ts[i - 1]} "
                                f"(index {i})")
        traces.append(Trace(tid, [e[1] for e in entries]))
    return Ensemble(tuple(traces))


def _read_jsonl(path):
    traces = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: {exc.msg}") from None
            if not isinstance(obj, dict) or "id" not in obj or "x" not in obj:
                raise DataError(f"{path}:{line_no}: each line needs 'id' and 'x'")
            if not isinstance(obj["x"], list):
                raise DataError(f"{path}:{line_no}: 'x' must be an array")
            tid = str(obj["id"])
            if tid in seen:
                raise DataError(f"{path}:{line_no}: duplicate trace id {tid!r}")
            seen.add(tid)
            x = [_parse_float(v, f"{path}:{line_no}") if isinstance(v, str)
                 else _check_number(v, f"{path}:{line_no}") for v in obj["x"]]
            traces.append(Trace(tid, x))
    return Ensemble(tuple(traces))


def _check_number(v, where):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise DataError(f"{where}: non-numeric entry {v!r}")
    if not math.isfinite(v):
        raise DataError(f"{where}: non-finite value")
    return float(v)


def read_traces(path, format=None) -> Ensemble:
    """Load an ensemble from CSV (``trace_id,t,value``) or JSONL.

    CSV rows may appear in any order; within a trace ``t`` must form a
    contiguous integer run. Errors raise :class:`DataError` carrying the
    file and line number where possible.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    fmt = format or infer_format(path)
    if fmt == "csv":
        return _read_csv(path)
    if fmt == "jsonl":
        return _read_jsonl(path)
    raise DataError(f"unknown trace format {fmt!r}")


def write_traces(ensemble: Ensemble, path, format=None):
    """Write an ensemble; values use ``repr`` so a read back is exact."""
    path = Path(path)
    fmt = format or infer_format(path)
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for tr in ensemble:
                for t, v in enumerate(tr.x):
                    w.writerow((tr.id, t, repr(float(v))))
    elif fmt == "jsonl":
        with open(path, "w", encoding="utf-8") as fh:
            for tr in ensemble:
                fh.write(json.dumps({"id": tr.id, "x": [float(v) for v in tr.x]}) + "\n")
    else:
        raise DataError(f"unknown trace format {fmt!r}")


def write_truth(truth: GroundTruth, ids, path):
    """Ground truth as JSONL, one object per trace."""
    with open(path, "w", encoding="utf-8") as fh:
        for tid, z, th, xi0 in zip(ids, truth.z, truth.theta, truth.xi0):
            fh.write(json.dumps({
                "id": tid,
                "z": np.asarray(z).tolist(),
                "theta": {k: np.asarray(v).tolist() for k, v in th.items()},
                "xi0": np.asarray(xi0).tolist(),
            }) + "\n")


def read_truth(path):
    """Inverse of :func:`write_truth`; returns ``(ids, GroundTruth)``."""
    ids, z, theta, xi0 = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                ids.append(str(obj["id"]))
                z.append(obj["z"])
                theta.append(obj["theta"])
                xi0.append(obj["xi0"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{line_no}: malformed ground truth ({exc})") from None
    return ids, GroundTruth(tuple(z), tuple(theta), tuple(xi0))


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def dump_json(obj, path):
    """Deterministic JSON: sorted keys, fixed indentation, trailing newline."""
    text = json.dumps(obj, default=_default, sort_keys=True, indent=1, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}: {exc.msg}") from None


def report_schema() -> dict:
    """The JSON Schema every CLI report conforms to."""
    text = resources.files("vebhmm").joinpath("schemas/report.schema.json").read_text(encoding="utf-8")
    return json.loads(text)
