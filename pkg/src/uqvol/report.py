"""CSV emission and run manifests shared by the CLI and the pipeline."""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import json
import math
import os
from pathlib import Path

from . import __version__


def fmt(x) -> str:
    """Canonical CSV cell: shortest round-trip repr for floats, empty when undefined."""
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, int):
        return str(x)
    if isinstance(x, float) or hasattr(x, "dtype"):
        x = float(x)
        return "" if math.isnan(x) else repr(x)
    return str(x)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def bundle_digest(path) -> str:
    """Digest over every file of a bundle directory (relative path + contents)."""
    path = Path(path)
    if path.is_file():
        return sha256_file(path)
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file() and not p.name.endswith(".tmp")):
        h.update(f.relative_to(path).as_posix().encode("utf-8") + b"\0")
        h.update(sha256_file(f).encode("ascii"))
    return h.hexdigest()


def json_digest(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()


def write_manifest(
    path, command: str, flags: dict, inputs: dict, outputs, decisions: dict, diagnostics=(), timestamp=None
) -> dict:
    """Write the JSON manifest describing one run and the result files it produced."""
    path = Path(path)
    outputs = [Path(o) for o in outputs]
    doc = {
        "tool": "uqvol",
        "version": __version__,
        "command": command,
        "flags": flags,
        "inputs": inputs,
        "decisions": decisions,
        "outputs": {o.name: sha256_file(o) for o in outputs},
        "diagnostics": list(diagnostics),
        "timestamp": timestamp or _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc
