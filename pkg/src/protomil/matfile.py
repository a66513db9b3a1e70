"""Plain-text matrix files: a ``rows cols`` header then one row per line."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    def __init__(self, path, line: int | None, msg: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {msg}")
        self.path = str(path)
        self.line = line


def format_matrix(a: np.ndarray) -> str:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    lines = [f"{a.shape[0]} {a.shape[1]}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in a]
    return "\n".join(lines) + "\n"


def write_matrix(path, a: np.ndarray) -> None:
    atomic_write(path, format_matrix(a))


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError(path, 1, "empty file, expected 'rows cols' header")
    head = lines[0].split()
    if len(head) != 2 or not all(h.isdigit() for h in head):
        raise FormatError(path, 1, f"malformed header {lines[0]!r}, expected 'rows cols'")
    n, d = int(head[0]), int(head[1])
    body = lines[1:]
    if len(body) != n:
        raise FormatError(path, None, f"header declares {n} rows but file has {len(body)}")
    out = np.empty((n, d), dtype=np.float64)
    for i, line in enumerate(body):
        vals = line.split()
        if len(vals) != d:
            raise FormatError(path, i + 2, f"expected {d} values, found {len(vals)}")
        try:
            out[i] = [float(v) for v in vals]
        except ValueError:
            raise FormatError(path, i + 2, "non-numeric value") from None
    if not np.all(np.isfinite(out)):
        raise FormatError(path, None, "non-finite value")
    return out


def write_kv(path, items: dict) -> None:
    atomic_write(path, "".join(f"{k}: {v}\n" for k, v in items.items()))


def read_kv(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if ":" not in line:
                raise FormatError(path, lineno, f"expected 'key: value', got {line!r}")
            k, v = line.split(":", 1)
            out[k.strip()] = v.strip()
    return out


def atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)
