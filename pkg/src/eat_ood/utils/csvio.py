"""Small CSV helpers shared by the sample, score and trace files."""
import csv
import math
import os
from pathlib import Path
from typing import Iterator, List, Sequence, Tuple

from eat_ood.errors import DataParseError, MissingFileError


def format_float(value: float) -> str:
    """17 significant digits, enough for an exact float64 round trip."""
    return format(float(value), ".17g")


def parse_float(cell: str, path: str, line: int) -> float:
    """Finite float of ``cell``; NaN and infinities are parse errors."""
    try:
        value = float(cell)
    except ValueError:
        raise DataParseError(f"non-numeric cell {cell!r}", path=path, line=line) from None
    if not math.isfinite(value):
        raise DataParseError(f"non-finite cell {cell!r}", path=path, line=line)
    return value


def parse_int(cell: str, path: str, line: int) -> int:
    try:
        return int(cell)
    except ValueError:
        raise DataParseError(f"non-integer cell {cell!r}", path=path, line=line) from None


def read_rows(path: str, expected_prefix: Sequence[str]) -> Tuple[List[str], Iterator[Tuple[int, List[str]]]]:
    """Open ``path``, validate the header and return ``(header, rows)``.

    Rows come as ``(line_number, cells)`` with 1-based line numbers and are
    checked for a constant column count.
    """
    if not os.path.exists(path):
        raise MissingFileError(f"File not found: {path}")
    with open(path, "r", newline="") as f:
        lines = list(csv.reader(f))

    if not lines or [c.strip() for c in lines[0][: len(expected_prefix)]] != list(expected_prefix):
        raise DataParseError(f"missing header, expected it to start with {','.join(expected_prefix)}", path=path, line=1)
    header = [c.strip() for c in lines[0]]

    def rows() -> Iterator[Tuple[int, List[str]]]:
        for offset, cells in enumerate(lines[1:], start=2):
            if not cells:
                continue
            if len(cells) != len(header):
                raise DataParseError(f"expected {len(header)} columns, found {len(cells)}", path=path, line=offset)
            yield offset, cells

    return header, rows()


def write_rows(path: str, header: Sequence[str], rows: Sequence[Sequence[str]]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
