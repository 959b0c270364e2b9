"""Memory-bounded access to numeric record files.

Two on-disk formats are supported:

* ``csv`` -- UTF-8, comma separated, one header row, decimal numerals
  with optional exponent.  Row indices are 0-based over data rows.
  Random access is served by streaming: subsamples are processed in
  batches, the batch's sorted indices are merged, and the file is read
  once per batch.
* ``f64-matrix`` -- seekable fixed-width binary: magic ``SBM1``, then
  ``n_rows`` and ``n_cols`` as 64-bit little-endian unsigned integers,
  then the row-major float64 little-endian payload.  Row ``i`` column
  ``j`` lives at byte offset ``20 + (i*n_cols + j)*8``.

Peak working memory of extraction is bounded by the current batch of
blocks plus one merged index buffer, never by the file size.  An
``ExtractionStats`` instance passed to ``extract_blocks`` records the
observed buffer peak and the number of file passes.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

MAGIC = b"SBM1"
HEADER_LEN = 20
_IO_BUFFER = 1 << 20  # fixed 1 MiB I/O buffer for streaming reads
DEFAULT_MEM_BUDGET = 256 << 20


class DataError(Exception):
    """Malformed input data; carries row/column context when known."""

    def __init__(self, message: str, row: int | None = None, column: int | None = None):
        super().__init__(message)
        self.row = row
        self.column = column


@dataclass(frozen=True)
class ColumnMap:
    """Which file columns to materialize, and their roles.

    Either give ``response`` plus ``features`` (regression layouts, the
    response becomes column 0 of every record) or ``raw`` (plain
    multivariate records).  Records are emitted in the selected order.
    """

    response: int | None = None
    features: tuple[int, ...] = ()
    raw: tuple[int, ...] = ()

    def __post_init__(self):
        if self.response is not None or self.features:
            if self.raw:
                raise ValueError("give either response/features or raw columns, not both")
            if self.response is None:
                raise ValueError("features given without a response column")
        object.__setattr__(self, "features", tuple(self.features))
        object.__setattr__(self, "raw", tuple(self.raw))

    @property
    def selected(self) -> tuple[int, ...]:
        if self.response is not None:
            return (self.response, *self.features)
        return self.raw

    def validate(self, n_file_cols: int) -> None:
        for c in self.selected:
            if not 0 <= c < n_file_cols:
                raise DataError(
                    f"column_map references column {c}, file has {n_file_cols}",
                    column=c,
                )


@dataclass(frozen=True)
class RecordBlock:
    """One materialized subsample: rows in sorted-index order."""

    subsample_id: int
    rows: np.ndarray  # (k_n, p) float64


@dataclass
class ExtractionStats:
    """Buffer accounting for one extraction run."""

    passes: int = 0
    peak_buffer_bytes: int = 0
    io_buffer_bytes: int = _IO_BUFFER

    def observe(self, nbytes: int) -> None:
        if nbytes > self.peak_buffer_bytes:
            self.peak_buffer_bytes = nbytes


def default_batch_size(mem_budget: int, k_n: int, p: int) -> int:
    """Largest batch whose block buffers fit the memory budget."""
    return max(1, mem_budget // (k_n * p * 8))


def _parse_cell(text: str, row: int, column: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(
            f"non-numeric value {text!r} at row {row}, column {column}",
            row=row,
            column=column,
        ) from None
    if not math.isfinite(value):
        raise DataError(
            f"non-finite value {text!r} at row {row}, column {column}",
            row=row,
            column=column,
        )
    return value


class RecordSource:
    """Immutable view of an on-disk numeric dataset.

    Construct through :func:`open_source`.  Safe to share across
    workers; every extraction opens its own file handle.
    """

    def __init__(
        self,
        path: str,
        fmt: str,
        n_rows: int,
        n_file_cols: int,
        column_map: ColumnMap,
        column_names: tuple[str, ...] | None = None,
    ):
        if n_rows < 1 or n_file_cols < 1:
            raise DataError(f"empty dataset: {n_rows} rows x {n_file_cols} cols")
        self.path = path
        self.format = fmt
        self.n_rows = n_rows
        self.n_file_cols = n_file_cols
        self.column_map = column_map
        self.column_names = column_names
        column_map.validate(n_file_cols)

    @property
    def n_cols(self) -> int:
        return len(self.column_map.selected)

    # -- random access ----------------------------------------------------

    def extract_blocks(
        self,
        plan,
        batch_size: int | None = None,
        mem_budget: int | None = None,
        stats: ExtractionStats | None = None,
    ) -> Iterator[RecordBlock]:
        """Yield one block per subsample, in plan order."""
        sub = plan.subsamples
        if sub.size and (sub.min() < 0 or sub.max() >= self.n_rows):
            raise DataError(
                f"plan index out of range for {self.n_rows}-row source",
                row=int(sub.max()),
            )
        if batch_size is None:
            budget = DEFAULT_MEM_BUDGET if mem_budget is None else mem_budget
            batch_size = default_batch_size(budget, plan.k_n, self.n_cols)
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.format == "csv":
            yield from self._extract_csv(sub, batch_size, stats)
        else:
            yield from self._extract_matrix(sub, stats)

    def _extract_csv(self, sub, batch_size, stats) -> Iterator[RecordBlock]:
        m_n, k_n = sub.shape
        p = self.n_cols
        cols = self.column_map.selected
        # pack (row_index, slot) into one int64 so the merge sorts in place
        pack = 1
        while pack < batch_size:
            pack <<= 1
        for start in range(0, m_n, batch_size):
            stop = min(start + batch_size, m_n)
            b = stop - start
            combined = np.empty(b * k_n, dtype=np.int64)
            for j in range(b):
                combined[j * k_n : (j + 1) * k_n] = sub[start + j] * pack + j
            combined.sort()
            blocks = np.empty((b, k_n, p), dtype=np.float64)
            fill = np.zeros(b, dtype=np.int64)
            if stats is not None:
                stats.observe(combined.nbytes + blocks.nbytes + fill.nbytes)
            ptr = 0
            total = combined.shape[0]
            with open(self.path, "r", encoding="utf-8", newline="", buffering=_IO_BUFFER) as f:
                reader = csv.reader(f)
                next(reader)  # header
                want = combined[ptr] // pack
                for row_i, record in enumerate(reader):
                    if row_i < want:
                        continue
                    values = np.empty(p, dtype=np.float64)
                    for ci, c in enumerate(cols):
                        if c >= len(record):
                            raise DataError(
                                f"row {row_i} has {len(record)} cells, column {c} requested",
                                row=row_i,
                                column=c,
                            )
                        values[ci] = _parse_cell(record[c], row_i, c)
                    while ptr < total and combined[ptr] // pack == row_i:
                        slot = int(combined[ptr] % pack)
                        blocks[slot, fill[slot]] = values
                        fill[slot] += 1
                        ptr += 1
                    if ptr >= total:
                        break
                    want = combined[ptr] // pack
            if ptr < total:
                raise DataError(
                    f"row {int(combined[ptr] // pack)} past end of file",
                    row=int(combined[ptr] // pack),
                )
            if stats is not None:
                stats.passes += 1
            for j in range(b):
                yield RecordBlock(start + j, blocks[j])

    def _extract_matrix(self, sub, stats) -> Iterator[RecordBlock]:
        m_n, k_n = sub.shape
        cols = np.asarray(self.column_map.selected, dtype=np.int64)
        row_bytes = self.n_file_cols * 8
        with open(self.path, "rb", buffering=_IO_BUFFER) as f:
            for sid in range(m_n):
                block = np.empty((k_n, self.n_cols), dtype=np.float64)
                if stats is not None:
                    stats.observe(block.nbytes + row_bytes)
                for pos, idx in enumerate(sub[sid]):
                    f.seek(HEADER_LEN + int(idx) * row_bytes)
                    raw = f.read(row_bytes)
                    if len(raw) != row_bytes:
                        raise DataError(f"short read at row {int(idx)}", row=int(idx))
                    row = np.frombuffer(raw, dtype="<f8")
                    block[pos] = row[cols]
                self._check_block_finite(block, sub[sid])
                yield RecordBlock(sid, block)

    def _check_block_finite(self, block, indices) -> None:
        bad = ~np.isfinite(block)
        if bad.any():
            pos, col = np.argwhere(bad)[0]
            row = int(indices[pos])
            raise DataError(
                f"non-finite value at row {row}, column "
                f"{self.column_map.selected[col]}",
                row=row,
                column=int(self.column_map.selected[col]),
            )

    # -- sequential access -------------------------------------------------

    def iter_row_chunks(self, chunk_rows: int = 65536) -> Iterator[np.ndarray]:
        """Stream the selected columns in order, ``chunk_rows`` at a time."""
        if self.format == "csv":
            cols = self.column_map.selected
            p = self.n_cols
            buf = np.empty((chunk_rows, p), dtype=np.float64)
            count = 0
            with open(self.path, "r", encoding="utf-8", newline="", buffering=_IO_BUFFER) as f:
                reader = csv.reader(f)
                next(reader)
                for row_i, record in enumerate(reader):
                    for ci, c in enumerate(cols):
                        if c >= len(record):
                            raise DataError(
                                f"row {row_i} has {len(record)} cells, column {c} requested",
                                row=row_i,
                                column=c,
                            )
                        buf[count, ci] = _parse_cell(record[c], row_i, c)
                    count += 1
                    if count == chunk_rows:
                        yield buf.copy()
                        count = 0
            if count:
                yield buf[:count].copy()
        else:
            cols = np.asarray(self.column_map.selected, dtype=np.int64)
            with open(self.path, "rb", buffering=_IO_BUFFER) as f:
                f.seek(HEADER_LEN)
                remaining = self.n_rows
                row_start = 0
                while remaining > 0:
                    take = min(chunk_rows, remaining)
                    raw = f.read(take * self.n_file_cols * 8)
                    chunk = np.frombuffer(raw, dtype="<f8").reshape(take, self.n_file_cols)
                    out = np.ascontiguousarray(chunk[:, cols])
                    bad = ~np.isfinite(out)
                    if bad.any():
                        r, c = np.argwhere(bad)[0]
                        raise DataError(
                            f"non-finite value at row {row_start + int(r)}, column "
                            f"{int(cols[c])}",
                            row=row_start + int(r),
                            column=int(cols[c]),
                        )
                    yield out
                    row_start += take
                    remaining -= take


class ArraySource:
    """In-memory stand-in for a :class:`RecordSource`.

    Used by the simulation harness so desk-scale campaigns skip the
    filesystem; implements the same extraction surface.
    """

    def __init__(self, data: np.ndarray):
        data = np.ascontiguousarray(data, dtype=np.float64)
        if data.ndim != 2 or data.size == 0:
            raise DataError("in-memory dataset must be a non-empty 2-D array")
        if not np.isfinite(data).all():
            r, c = np.argwhere(~np.isfinite(data))[0]
            raise DataError(
                f"non-finite value at row {int(r)}, column {int(c)}",
                row=int(r),
                column=int(c),
            )
        self.data = data
        self.path = None
        self.format = "memory"
        self.n_rows, self.n_cols = data.shape
        self.column_map = ColumnMap(raw=tuple(range(self.n_cols)))

    def extract_blocks(self, plan, batch_size=None, mem_budget=None, stats=None):
        sub = plan.subsamples
        if sub.size and (sub.min() < 0 or sub.max() >= self.n_rows):
            raise DataError(f"plan index out of range for {self.n_rows}-row source")
        for sid in range(sub.shape[0]):
            yield RecordBlock(sid, self.data[sub[sid]])

    def iter_row_chunks(self, chunk_rows: int = 65536):
        for start in range(0, self.n_rows, chunk_rows):
            yield self.data[start : start + chunk_rows]


def _open_csv(path: str, column_map: ColumnMap | None) -> RecordSource:
    with open(path, "r", encoding="utf-8", newline="", buffering=_IO_BUFFER) as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty csv file") from None
        if not header or any(name == "" for name in header):
            raise DataError("malformed csv header")
        n_rows = 0
        for record in reader:
            if not record:
                raise DataError(f"blank line after data row {n_rows}", row=n_rows)
            n_rows += 1
    if column_map is None:
        column_map = ColumnMap(raw=tuple(range(len(header))))
    return RecordSource(
        path=path,
        fmt="csv",
        n_rows=n_rows,
        n_file_cols=len(header),
        column_map=column_map,
        column_names=tuple(header),
    )


def _open_matrix(path: str, column_map: ColumnMap | None) -> RecordSource:
    with open(path, "rb") as f:
        header = f.read(HEADER_LEN)
    if len(header) != HEADER_LEN or header[:4] != MAGIC:
        raise DataError(f"not a f64-matrix file: {path}")
    n_rows = int.from_bytes(header[4:12], "little")
    n_cols = int.from_bytes(header[12:20], "little")
    expected = HEADER_LEN + n_rows * n_cols * 8
    actual = os.path.getsize(path)
    if actual != expected:
        raise DataError(
            f"f64-matrix payload is {actual - HEADER_LEN} bytes, "
            f"header declares {n_rows}x{n_cols} ({expected - HEADER_LEN})"
        )
    if column_map is None:
        column_map = ColumnMap(raw=tuple(range(n_cols)))
    return RecordSource(
        path=path, fmt="f64-matrix", n_rows=n_rows, n_file_cols=n_cols,
        column_map=column_map,
    )


def open_source(path: str, fmt: str = "csv", column_map: ColumnMap | None = None) -> RecordSource:
    """Open a dataset, resolving its row count and dimension.

    For csv this makes one O(1)-memory counting pass; cell contents are
    validated lazily at extraction time.
    """
    if not os.path.exists(path):
        raise DataError(f"no such file: {path}")
    if fmt == "csv":
        return _open_csv(path, column_map)
    if fmt in ("f64-matrix", "f64"):
        return _open_matrix(path, column_map)
    raise ValueError(f"unknown format {fmt!r}; expected 'csv' or 'f64-matrix'")


def extract_blocks(source, plan, batch_size=None, **kwargs) -> Iterator[RecordBlock]:
    """Module-level alias of ``source.extract_blocks``."""
    return source.extract_blocks(plan, batch_size=batch_size, **kwargs)


def write_f64_matrix(path: str, data: np.ndarray) -> None:
    """Write an in-memory array in the f64-matrix layout."""
    data = np.ascontiguousarray(data, dtype="<f8")
    if data.ndim != 2:
        raise ValueError("data must be 2-D")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(data.shape[0].to_bytes(8, "little"))
        f.write(data.shape[1].to_bytes(8, "little"))
        f.write(data.tobytes())


def convert_csv_to_f64(csv_path: str, out_path: str, columns: tuple[int, ...] | None = None) -> tuple[int, int]:
    """Stream-convert a csv file into the f64-matrix format.

    Works in O(chunk) memory; returns ``(n_rows, n_cols)`` written.
    """
    cmap = None if columns is None else ColumnMap(raw=tuple(columns))
    src = open_source(csv_path, "csv", cmap)
    n_rows, n_cols = src.n_rows, src.n_cols
    with open(out_path, "wb") as f:
        f.write(MAGIC)
        f.write(n_rows.to_bytes(8, "little"))
        f.write(n_cols.to_bytes(8, "little"))
        for chunk in src.iter_row_chunks():
            f.write(np.ascontiguousarray(chunk, dtype="<f8").tobytes())
    return n_rows, n_cols
