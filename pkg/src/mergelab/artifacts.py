"""Deterministic on-disk artifacts: versioned CSVs and digest manifests.

Floats are rendered with repr, the shortest string that parses back to the
identical double, so emitted files are exact and byte-stable across runs.
Every CSV carries a schema_version column pinning its layout.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np


def fmt_cell(value):
    # np.float64 subclasses float but reprs as np.float64(...); normalize.
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def write_csv(path, schema, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["schema_version", *header])
        for row in rows:
            writer.writerow([schema, *[fmt_cell(v) for v in row]])
    return path


def read_csv(path):
    """Returns (schema, header, rows) with cells as strings; the
    schema_version column is stripped from header and rows."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row[1:] for row in reader]
    if not header or header[0] != "schema_version":
        raise ValueError(f"{path}: not a versioned CSV")
    schemas = {row[0] for row in _raw_rows(path)}
    schema = schemas.pop() if len(schemas) == 1 else None
    return schema, header[1:], rows


def _raw_rows(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        yield from reader


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, exclude=("manifest.json", "timings.csv")):
    """manifest.json mapping each artifact to its sha256, sorted by name.

    timings are wall-clock measurements and inherently non-reproducible, so
    they never enter the manifest.
    """
    out = Path(out_dir)
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name not in exclude:
            files[str(p.relative_to(out))] = sha256_file(p)
    manifest = {"format": "manifest-v1", "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out / "manifest.json"
