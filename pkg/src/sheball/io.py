"""Deterministic CSV/JSON writers with atomic replacement and file digests."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

ESTIMATE_COLUMNS = ("epsilon", "p_hat", "ci_lo", "ci_hi", "log_p", "method", "cost")


def jsonable(obj):
    """Recursively convert numpy scalars/arrays, dataclasses and tuples to JSON types.

    Non-finite floats become the strings ``"inf"``, ``"-inf"`` and ``"nan"``
    so the output stays strict JSON.
    """
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return jsonable(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isfinite(x):
            return x
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    return obj


def dumps_json(obj) -> str:
    """JSON text with sorted keys and a trailing newline."""
    return json.dumps(jsonable(obj), sort_keys=True, indent=2) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def dumps_csv(rows, columns) -> str:
    """CSV text with a header row; floats are written with ``repr`` (round-trip exact)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def atomic_write(path: str | os.PathLike, text: str) -> Path:
    """Write ``text`` to a temporary file in the target directory, then rename it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path, obj) -> Path:
    return atomic_write(path, dumps_json(obj))


def write_csv(path, rows, columns) -> Path:
    return atomic_write(path, dumps_csv(rows, columns))


def read_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def file_digest(path) -> str:
    """SHA-256 hex digest of a file's bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def paths_rows(paths: np.ndarray):
    """Long-format rows ``(path_id, t_index, value)`` for a path batch."""
    for i, p in enumerate(paths):
        for j, v in enumerate(p):
            yield {"path_id": i, "t_index": j, "value": float(v)}


def kernel_rows(times, M):
    for i, s in enumerate(times):
        for j, t in enumerate(times):
            yield {"s": float(s), "t": float(t), "value": float(M[i, j])}
