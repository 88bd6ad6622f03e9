"""CSV output with shortest round-trip float formatting."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import Iterable, Sequence


def fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int,)) and not isinstance(value, bool):
        return str(value)
    if isinstance(value, str):
        return value
    try:
        x = float(value)
    except (TypeError, ValueError):
        return str(value)
    if math.isnan(x):
        return "nan"
    return repr(x)


def write_csv(path_or_buf, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Write rows as UTF-8 CSV with ``\\n`` line endings."""
    if isinstance(path_or_buf, (str, Path)):
        with open(path_or_buf, "w", encoding="utf-8", newline="") as fh:
            _write(fh, header, rows)
    else:
        _write(path_or_buf, header, rows)


def _write(fh, header, rows):
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])


def to_csv_string(header, rows) -> str:
    buf = io.StringIO()
    _write(buf, header, rows)
    return buf.getvalue()


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]
