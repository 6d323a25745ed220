"""Long-format CSV ingestion and the on-disk dataset layout.

A dataset directory holds ``workload.csv`` (long format), ``statics.csv``
with its ``statics.json`` sidecar of categorical encodings, ``events.csv``
and ``metadata.json``.
"""
from __future__ import annotations

import csv
import json
import os
from collections import defaultdict
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from ..errors import DuplicateError, ParseError
from .types import Dataset, Event, StaticContext, WorkloadSeries

WORKLOAD_FILE = "workload.csv"
STATICS_FILE = "statics.csv"
STATICS_SIDECAR = "statics.json"
EVENTS_FILE = "events.csv"
METADATA_FILE = "metadata.json"


@dataclass
class CsvSchema:
    series_id: str = "series_id"
    timestamp: str = "timestamp"
    value: str = "value"
    device_id: str | None = "device_id"
    app_id: str | None = "app_id"


def parse_timestamp(text):
    """Epoch seconds from an integer string or an ISO-8601 timestamp (UTC if naive)."""
    text = text.strip()
    if not text:
        raise ValueError("empty timestamp")
    try:
        return int(text)
    except ValueError:
        pass
    try:
        f = float(text)
    except ValueError:
        f = None
    if f is not None:
        if not f.is_integer():
            raise ValueError(f"fractional epoch {text!r}")
        return int(f)
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def _parse_value(text, line):
    text = text.strip()
    if not text:
        raise ParseError("empty value", line)
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"non-numeric value {text!r}", line) from None
    if not np.isfinite(v):
        raise ParseError(f"non-finite value {text!r}", line)
    return v


def _infer_interval(ts):
    if ts.size < 2:
        return 3600
    return int(np.min(np.diff(ts)))


def ingest_long_csv(path, schema: CsvSchema | None = None, statics_path=None,
                    events_path=None, interval_seconds=None) -> Dataset:
    """Read a long-format workload CSV (plus optional statics/events files)."""
    schema = schema or CsvSchema()
    rows = defaultdict(list)
    ids = {}
    seen = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        col = {name.strip(): i for i, name in enumerate(header)}
        for required in (schema.series_id, schema.timestamp, schema.value):
            if required not in col:
                raise ParseError(f"missing column {required!r}", 1)
        dev_col = col.get(schema.device_id) if schema.device_id else None
        app_col = col.get(schema.app_id) if schema.app_id else None
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
            sid = row[col[schema.series_id]].strip()
            if not sid:
                raise ParseError("empty series_id", line)
            try:
                ts = parse_timestamp(row[col[schema.timestamp]])
            except ValueError as exc:
                raise ParseError(f"bad timestamp: {exc}", line) from None
            value = _parse_value(row[col[schema.value]], line)
            if (sid, ts) in seen:
                raise DuplicateError(f"duplicate timestamp {ts} for series {sid!r}", line)
            seen.add((sid, ts))
            rows[sid].append((ts, value))
            if sid not in ids:
                dev = row[dev_col].strip() if dev_col is not None else sid
                app = row[app_col].strip() if app_col is not None else ""
                ids[sid] = (dev or sid, app)

    series = []
    for sid, pts in rows.items():
        pts.sort()
        ts = np.array([p[0] for p in pts], dtype=np.int64)
        vals = np.array([p[1] for p in pts], dtype=np.float64)
        interval = interval_seconds or _infer_interval(ts)
        series.append(WorkloadSeries(sid, ids[sid][0], ids[sid][1], ts, vals, interval))

    statics, static_meta = {}, {}
    if statics_path is not None:
        statics, static_meta = read_statics_csv(statics_path)
    events = read_events_csv(events_path) if events_path is not None else []
    metadata = {"source": "csv", "path": os.fspath(path), **static_meta}
    return Dataset(series, statics, events, metadata)


def read_statics_csv(path, sidecar_path=None):
    """Read ``series_id,attr_1,...``; categorical columns are mapped through the sidecar tables."""
    if sidecar_path is None:
        candidate = os.path.join(os.path.dirname(os.fspath(path)), STATICS_SIDECAR)
        sidecar_path = candidate if os.path.exists(candidate) else None
    categorical = {}
    if sidecar_path is not None:
        with open(sidecar_path) as fh:
            categorical = json.load(fh).get("categorical", {})
    statics = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        if not header or header[0] != "series_id":
            raise ParseError("statics header must start with series_id", 1)
        columns = header[1:]
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
            attrs = []
            for name, cell in zip(columns, row[1:]):
                if name in categorical:
                    table = categorical[name]
                    if cell.strip() not in table:
                        raise ParseError(f"unknown category {cell!r} for {name}", line)
                    attrs.append(float(table[cell.strip()]))
                else:
                    attrs.append(_parse_value(cell, line))
            sid = row[0].strip()
            if sid in statics:
                raise DuplicateError(f"duplicate statics row for {sid!r}", line)
            statics[sid] = StaticContext(sid, np.array(attrs))
    return statics, {"static_columns": columns, "categorical": categorical}


def read_events_csv(path):
    events = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            try:
                payload = json.loads(row["payload"]) if row.get("payload") else {}
                events.append(Event(row["series_id"], parse_timestamp(row["timestamp"]),
                                    row["kind"], payload))
            except (ValueError, KeyError) as exc:
                raise ParseError(f"bad event row: {exc}", reader.line_num) from None
    return events


def save_dataset(dataset: Dataset, out_dir):
    """Write the dataset directory; floats use ``repr`` so reloading is bit-exact."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    p = os.path.join(out_dir, WORKLOAD_FILE)
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series_id", "timestamp", "value", "device_id", "app_id"])
        for s in dataset.series:
            for t, v in zip(s.timestamps.tolist(), s.values.tolist()):
                w.writerow([s.series_id, t, repr(v), s.device_id, s.app_id])
    paths["workload"] = p

    if dataset.statics:
        columns = dataset.metadata.get("static_columns") or [
            f"attr_{i + 1}" for i in range(dataset.d_s)]
        categorical = dataset.metadata.get("categorical", {})
        decode = {c: {float(v): k for k, v in table.items()} for c, table in categorical.items()}
        p = os.path.join(out_dir, STATICS_FILE)
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["series_id", *columns])
            for s in dataset.series:
                attrs = dataset.statics[s.series_id].attributes.tolist()
                cells = [decode[c][a] if c in decode else repr(a) for c, a in zip(columns, attrs)]
                w.writerow([s.series_id, *cells])
        paths["statics"] = p
        p = os.path.join(out_dir, STATICS_SIDECAR)
        with open(p, "w") as fh:
            json.dump({"categorical": categorical}, fh, indent=2, sort_keys=True)
        paths["statics_sidecar"] = p

    p = os.path.join(out_dir, EVENTS_FILE)
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series_id", "timestamp", "kind", "payload"])
        for e in dataset.events:
            w.writerow([e.series_id, e.timestamp, e.kind, json.dumps(e.payload, sort_keys=True)])
    paths["events"] = p

    p = os.path.join(out_dir, METADATA_FILE)
    with open(p, "w") as fh:
        json.dump(dataset.metadata, fh, indent=2, sort_keys=True)
    paths["metadata"] = p
    return paths


def load_dataset(in_dir) -> Dataset:
    workload = os.path.join(in_dir, WORKLOAD_FILE)
    statics = os.path.join(in_dir, STATICS_FILE)
    events = os.path.join(in_dir, EVENTS_FILE)
    meta_path = os.path.join(in_dir, METADATA_FILE)
    metadata = {}
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            metadata = json.load(fh)
    interval = None
    if "generator" in metadata:
        interval = metadata["generator"].get("interval_seconds")
    ds = ingest_long_csv(workload,
                         statics_path=statics if os.path.exists(statics) else None,
                         events_path=events if os.path.exists(events) else None,
                         interval_seconds=interval)
    metadata = {**ds.metadata, **metadata}
    return Dataset(ds.series, ds.statics, ds.events, metadata)
