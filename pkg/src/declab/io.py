"""Serialization: frequency sets, result rows, spec hashing and atomic writes."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from fractions import Fraction
from pathlib import Path

import numpy as np

from .freqsets import FrequencySet


def plain(v):
    """Convert numpy scalars/arrays and fractions to JSON-friendly values."""
    if isinstance(v, Fraction):
        return f"{v.numerator}/{v.denominator}"
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, np.ndarray):
        return [plain(x) for x in v.tolist()]
    if isinstance(v, (list, tuple)):
        return [plain(x) for x in v]
    if isinstance(v, dict):
        return {str(k): plain(x) for k, x in v.items()}
    if isinstance(v, complex):
        return [v.real, v.imag]
    return v


def parse_fraction(s: str) -> Fraction:
    return Fraction(s)


def canonical_json(obj) -> str:
    return json.dumps(plain(obj), sort_keys=True, separators=(",", ":"), allow_nan=False)


def spec_hash(spec: dict) -> str:
    return hashlib.sha256(canonical_json(spec).encode()).hexdigest()


def fmt_cell(v) -> str:
    """Lossless text for a CSV cell: floats use the shortest round-trip repr."""
    v = plain(v)
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return repr(v)
    if isinstance(v, list):
        return json.dumps(v)
    return str(v)


def rows_to_csv(rows: list[dict]) -> str:
    cols: list[str] = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([fmt_cell(r.get(c)) for c in cols])
    return buf.getvalue()


def atomic_write(path: str | os.PathLike, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def freqset_to_dict(fset: FrequencySet) -> dict:
    d = {"dim": fset.dim, "label": fset.label, "meta": plain(fset.meta),
         "points": fset.points.tolist()}
    if fset.raw is not None:
        d["raw"] = fset.raw.tolist()
    return d


def freqset_from_dict(d: dict) -> FrequencySet:
    raw = np.asarray(d["raw"], dtype=np.int64) if "raw" in d else None
    pts = np.asarray(d["points"], dtype=np.float64).reshape(-1, int(d["dim"]))
    return FrequencySet.build(pts, d.get("label", ""), d.get("meta", {}), raw,
                              allow_empty=True, dim=int(d["dim"]))


def freqset_rows(fset: FrequencySet) -> list[dict]:
    rows = []
    for i, x in enumerate(fset.points):
        r = {"index": i}
        r.update({f"x{k}": float(v) for k, v in enumerate(x)})
        rows.append(r)
    return rows
