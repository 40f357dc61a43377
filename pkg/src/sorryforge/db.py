"""Snapshot database: a single JSON document per dataset.

The on-disk schema is ``{"name", "cutoff", "sorries": [record, ...]}``.
Loading validates every record and fails fast on the first violation so
a corrupt database can never flow into an evaluation. Saving goes
through a temp file and ``os.replace`` under an advisory lock, so a
crashed writer leaves either the old or the new file, never a torn one.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any

from filelock import FileLock

from .model import (
    DatasetSnapshot,
    SchemaError,
    format_timestamp,
    parse_timestamp,
    record_from_json,
    record_to_json,
    validate_record,
)

__all__ = ["load_database", "save_database", "snapshot_to_json", "snapshot_from_json"]


def snapshot_to_json(snapshot: DatasetSnapshot) -> dict[str, Any]:
    return {
        "name": snapshot.name,
        "cutoff": format_timestamp(snapshot.cutoff),
        "sorries": [record_to_json(record) for record in snapshot.records],
    }


def snapshot_from_json(obj: Any) -> DatasetSnapshot:
    if not isinstance(obj, dict):
        raise SchemaError("database document must be a JSON object")
    for key in ("name", "cutoff", "sorries"):
        if key not in obj:
            raise SchemaError(f"database document missing key: {key}")
    try:
        cutoff = parse_timestamp(str(obj["cutoff"]))
    except SchemaError as exc:
        raise SchemaError(f"cutoff: {exc}") from exc
    entries = obj["sorries"]
    if not isinstance(entries, list):
        raise SchemaError("sorries must be a list")

    records = []
    seen_ids: set[str] = set()
    for index, entry in enumerate(entries):
        try:
            record = record_from_json(entry)
        except SchemaError as exc:
            raise SchemaError(f"record {index}: {exc}") from exc
        violations = validate_record(record)
        if violations:
            raise SchemaError(f"record {index}: {violations[0]}")
        if record.metadata.inclusion_date > cutoff:
            raise SchemaError(f"record {index}: inclusion_date after cutoff")
        if record.id in seen_ids:
            raise SchemaError(f"record {index}: duplicate id {record.id}")
        seen_ids.add(record.id)
        records.append(record)
    return DatasetSnapshot.build(str(obj["name"]), cutoff, records)


def load_database(path: str | Path) -> DatasetSnapshot:
    """Read and validate a snapshot; any violation raises SchemaError."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"database is not valid JSON: {exc}") from exc
    return snapshot_from_json(obj)


def save_database(snapshot: DatasetSnapshot, path: str | Path) -> None:
    """Atomically write the snapshot, serializing concurrent writers."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(snapshot_to_json(snapshot), indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    lock = FileLock(str(target) + ".lock")
    with lock:
        tmp = target.with_name(target.name + ".tmp")
        tmp.write_text(payload, encoding="utf-8")
        os.replace(tmp, target)
