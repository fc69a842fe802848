"""Deterministic text serialisation shared by every writer in the package.

Floats are always written with 17 significant digits so that reading a file
back yields bit-identical doubles.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from typing import Any, Iterable, Mapping, Sequence

import numpy as np


def fmt_float(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return "%.17g" % x


def parse_float(text: str) -> float:
    return float(text)


def _to_builtin(obj):
    if isinstance(obj, np.ndarray):
        return [_to_builtin(v) for v in obj.tolist()]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def dumps_json(obj: Any, indent: int = 2) -> str:
    """JSON text with sorted keys and 17-digit floats.

    Non-finite floats are written as the strings ``"inf"``, ``"-inf"`` and
    ``"nan"`` so the output stays valid JSON.
    """

    def enc(o, level):
        o = _to_builtin(o)
        pad = " " * (indent * (level + 1))
        end = " " * (indent * level)
        if o is None or isinstance(o, bool):
            return json.dumps(o)
        if isinstance(o, int):
            return str(o)
        if isinstance(o, float):
            return fmt_float(o) if math.isfinite(o) else json.dumps(fmt_float(o))
        if isinstance(o, str):
            return json.dumps(o)
        if isinstance(o, Mapping):
            if not o:
                return "{}"
            items = [f"{pad}{json.dumps(str(k))}: {enc(o[k], level + 1)}" for k in sorted(o, key=str)]
            return "{\n" + ",\n".join(items) + "\n" + end + "}"
        if isinstance(o, (list, tuple)):
            if not o:
                return "[]"
            if all(not isinstance(_to_builtin(v), (list, tuple, dict)) for v in o):
                return "[" + ", ".join(enc(v, level + 1) for v in o) + "]"
            return "[\n" + ",\n".join(pad + enc(v, level + 1) for v in o) + "\n" + end + "]"
        if hasattr(o, "to_dict"):
            return enc(o.to_dict(), level)
        raise TypeError(f"cannot serialise {type(o).__name__}")

    return enc(obj, 0) + "\n"


def _revive(o):
    if isinstance(o, dict):
        return {k: _revive(v) for k, v in o.items()}
    if isinstance(o, list):
        return [_revive(v) for v in o]
    if o in ("inf", "-inf", "nan"):
        return float(o)
    return o


def loads_json(text: str):
    """Inverse of :func:`dumps_json` (non-finite strings become floats)."""
    return _revive(json.loads(text))


def config_hash(config: Mapping) -> str:
    """Short stable hash of a configuration mapping."""
    canon = json.dumps(_to_builtin_deep(config), sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _to_builtin_deep(o):
    o = _to_builtin(o)
    if isinstance(o, Mapping):
        return {str(k): _to_builtin_deep(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_to_builtin_deep(v) for v in o]
    return o


def write_csv(header: Mapping[str, Any], columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    """CSV text preceded by ``# key=value`` comment lines."""
    buf = io.StringIO()
    for k in sorted(header):
        buf.write(f"# {k}={header[k]}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def read_csv(text: str) -> tuple[dict, list[str], list[list[str]]]:
    header = {}
    lines = []
    for line in text.splitlines():
        if line.startswith("# "):
            k, _, v = line[2:].partition("=")
            header[k] = v
        elif line:
            lines.append(line)
    reader = csv.reader(lines)
    columns = next(reader)
    return header, columns, [r for r in reader]
