"""Dataset CSV files: header x0..x{dx-1},y0..y{dy-1}, one sample per line."""

import csv
import io
import logging
from pathlib import Path

import numpy as np

from datasets.models import PairedDataset
from exceptions import DataError, ModelFormatError


logger = logging.getLogger(__name__)


def dataset_header(dx: int, dy: int) -> list[str]:
    return [f'x{k}' for k in range(dx)] + [f'y{k}' for k in range(dy)]


def _parse_header(header: list[str]) -> tuple[int, int]:
    """Return (dx, dy), checking the columns are x0.., y0.. in order."""
    names = [name.strip() for name in header]
    dx = sum(1 for name in names if name.startswith('x'))
    dy = len(names) - dx
    if dx < 1 or dy < 1 or names != dataset_header(dx, dy):
        raise ModelFormatError(
            f"expected header x0..x{{dx-1}},y0..y{{dy-1}}, got {','.join(names)}",
            context='line 1',
        )
    return dx, dy


def format_dataset(data: PairedDataset) -> str:
    """CSV text with full-precision (round-trip) floats."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(dataset_header(data.dx, data.dy))
    for x, y in zip(data.inputs, data.labels):
        writer.writerow([repr(float(v)) for v in x] + [repr(float(v)) for v in y])
    return buffer.getvalue()


def parse_dataset(text: str, name: str = '') -> PairedDataset:
    """
    Parse dataset CSV text.

    Raises:
        ModelFormatError: on a bad header, row length or number, with line context
    """
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ModelFormatError("empty dataset file", context='line 1') from None
    dx, dy = _parse_header(header)

    rows = []
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != dx + dy:
            raise ModelFormatError(
                f"expected {dx + dy} values, got {len(row)}", context=f"line {line_no}"
            )
        try:
            rows.append([float(value) for value in row])
        except ValueError as e:
            raise ModelFormatError(str(e), context=f"line {line_no}") from e

    if not rows:
        raise ModelFormatError("dataset has no samples", context='line 2')
    values = np.array(rows)
    if not np.all(np.isfinite(values)):
        raise DataError(f"dataset '{name}' contains non-finite values")
    return PairedDataset(values[:, :dx], values[:, dx:], name)


def save_dataset_csv(data: PairedDataset, path: Path) -> None:
    Path(path).write_text(format_dataset(data))
    logger.info(f"Wrote {data.size} samples to {path}")


def load_dataset_csv(path: Path) -> PairedDataset:
    path = Path(path)
    data = parse_dataset(path.read_text(), name=path.stem)
    logger.info(f"Loaded {data.size} samples (dx={data.dx}, dy={data.dy}) from {path}")
    return data
