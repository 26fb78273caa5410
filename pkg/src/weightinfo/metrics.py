"""Per-iteration metrics records and their CSV persistence.

CSV schema: iter, train_loss, train_acc, test_acc, iiw, lr, then any extra
columns in sorted order.  Floats are written with shortest-roundtrip repr so
reruns of the same seeded configuration are byte-identical.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

from .errors import ParseError

CORE_COLUMNS = ("iter", "train_loss", "train_acc", "test_acc", "iiw", "lr")


@dataclass
class MetricsRecord:
    iteration: int
    train_loss: float
    train_acc: float
    test_acc: float | None
    iiw: float
    lr: float
    extras: dict[str, float] = field(default_factory=dict)


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def write_metrics_csv(path, records: list[MetricsRecord]) -> None:
    extra_cols = sorted({k for r in records for k in r.extras})
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(list(CORE_COLUMNS) + extra_cols)
        for r in records:
            row = [str(r.iteration), _fmt(r.train_loss), _fmt(r.train_acc), _fmt(r.test_acc), _fmt(r.iiw), _fmt(r.lr)]
            row += [_fmt(r.extras.get(k)) for k in extra_cols]
            writer.writerow(row)


def read_metrics_csv(path) -> tuple[list[str], list[dict[str, float]]]:
    """Header plus one {column: value} dict per row; blank cells become None."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, expected a header row") from None
        if header[: len(CORE_COLUMNS)] != list(CORE_COLUMNS):
            raise ParseError(f"{path}: header {header} does not start with {CORE_COLUMNS}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            parsed: dict[str, float] = {}
            for col, cell in zip(header, row):
                if cell == "":
                    parsed[col] = None
                else:
                    try:
                        parsed[col] = float(cell)
                    except ValueError:
                        raise ParseError(f"{path}:{lineno}: bad number {cell!r} in column {col}") from None
            rows.append(parsed)
    return header, rows
