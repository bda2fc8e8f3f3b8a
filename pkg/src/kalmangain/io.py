"""Dataset CSV, metadata sidecar and table serialization."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .exceptions import ConfigError
from .model import Dataset


def fmt(x) -> str:
    """17 significant digits, enough to round-trip a double."""
    return format(float(x), ".17g")


def dataset_header(p: int, q: int):
    return ["k"] + [f"u{i}" for i in range(p)] + [f"y{i}" for i in range(q)]


def write_dataset(path, data: Dataset):
    path = Path(path)
    p, q = data.u.shape[1], data.y.shape[1]
    with path.open("w", newline="") as fh:
        fh.write(",".join(dataset_header(p, q)) + "\n")
        for k in range(len(data.y)):
            fh.write(",".join([str(k)] + [fmt(v) for v in data.u[k]] + [fmt(v) for v in data.y[k]]) + "\n")


def read_dataset(path) -> Dataset:
    """Parse a dataset CSV; malformed content raises :class:`ConfigError` naming the line."""
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "k":
            raise ConfigError(f"{path}: line 1: header must start with 'k'")
        p = sum(1 for h in header if h.startswith("u"))
        q = sum(1 for h in header if h.startswith("y"))
        if header != dataset_header(p, q) or q < 1:
            raise ConfigError(f"{path}: line 1: expected header k,u0..u{{p-1}},y0..y{{q-1}}, got {','.join(header)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ConfigError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                k = int(row[0])
                vals = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise ConfigError(f"{path}: line {lineno}: {exc}") from None
            if k != len(rows):
                raise ConfigError(f"{path}: line {lineno}: expected k = {len(rows)}, got {k}")
            if not np.isfinite(vals).all():
                raise ConfigError(f"{path}: line {lineno}: non-finite value")
            rows.append(vals)
    if len(rows) < 2:
        raise ConfigError(f"{path}: need at least two data rows")
    arr = np.array(rows)
    return Dataset(arr[:, :p].reshape(len(arr), p), arr[:, p:])


def metadata_path(dataset_path) -> Path:
    path = Path(dataset_path)
    return path.with_name(path.stem + ".meta.json")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def write_json(path, obj):
    with Path(path).open("w") as fh:
        json.dump(_jsonable(obj), fh, indent=2)
        fh.write("\n")


def read_json(path):
    try:
        with Path(path).open() as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from exc


def write_table(path, header, rows):
    """Write a CSV table; floats use 17 significant digits."""
    with Path(path).open("w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = []
            for v in row:
                if isinstance(v, (bool, np.bool_)):
                    cells.append(str(int(v)))
                elif isinstance(v, (int, np.integer)):
                    cells.append(str(v))
                elif isinstance(v, (float, np.floating)):
                    cells.append(fmt(v))
                else:
                    cells.append(str(v))
            fh.write(",".join(cells) + "\n")
