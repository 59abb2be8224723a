"""Count-matrix and offset handling.

Counts are stored as a dense integer matrix with named samples (rows) and
variables (columns).  Offsets are per-sample positive multipliers of the
Poisson rate (library-size normalizers); they enter the model on the log
scale but are stored and exchanged on the natural scale.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    LengthMismatch,
    NegativeCount,
    NonIntegerCount,
    NonpositiveOffset,
    ZeroLibrarySize,
)

_DELIMS = {"csv": ",", "tsv": "\t"}


@dataclass(frozen=True)
class CountMatrix:
    """A samples-by-variables matrix of nonnegative integer counts.

    Attributes
    ----------
    counts : ndarray of int64, shape (n, d)
    sample_ids : tuple of str, length n
        Unique row identifiers.
    var_names : tuple of str, length d
        Unique column identifiers.
    """

    counts: np.ndarray
    sample_ids: tuple[str, ...]
    var_names: tuple[str, ...]

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2:
            raise LengthMismatch(f"counts must be 2-D, got shape {counts.shape}")
        if counts.dtype.kind == "f":
            if not np.all(counts == np.floor(counts)):
                raise NonIntegerCount("counts contain non-integer values")
            counts = counts.astype(np.int64)
        elif counts.dtype != np.int64:
            counts = counts.astype(np.int64)
        if np.any(counts < 0):
            i, j = np.argwhere(counts < 0)[0]
            raise NegativeCount(f"negative count at row {i}, column {j}")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "sample_ids", tuple(str(s) for s in self.sample_ids))
        object.__setattr__(self, "var_names", tuple(str(v) for v in self.var_names))
        n, d = counts.shape
        if len(self.sample_ids) != n:
            raise LengthMismatch(f"{len(self.sample_ids)} sample ids for {n} rows")
        if len(self.var_names) != d:
            raise LengthMismatch(f"{len(self.var_names)} variable names for {d} columns")
        if len(set(self.sample_ids)) != n:
            raise LengthMismatch("sample ids are not unique")
        if len(set(self.var_names)) != d:
            raise LengthMismatch("variable names are not unique")

    @property
    def n(self) -> int:
        return self.counts.shape[0]

    @property
    def d(self) -> int:
        return self.counts.shape[1]


@dataclass(frozen=True)
class OffsetVector:
    """Per-sample positive rate multipliers.

    Attributes
    ----------
    c : ndarray of float64, shape (n,)
        Strictly positive offsets on the natural scale.
    """

    c: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float)
        if c.ndim != 1:
            raise LengthMismatch(f"offsets must be 1-D, got shape {c.shape}")
        if np.any(~np.isfinite(c)) or np.any(c <= 0.0):
            i = int(np.flatnonzero(~np.isfinite(c) | (c <= 0.0))[0])
            raise NonpositiveOffset(f"offset {i} is {c[i]!r}; offsets must be finite and > 0")
        object.__setattr__(self, "c", c)

    @property
    def n(self) -> int:
        return self.c.shape[0]

    @property
    def log(self) -> np.ndarray:
        return np.log(self.c)


def _format_of(path: str | Path, fmt: str | None) -> str:
    if fmt is not None:
        if fmt not in _DELIMS:
            raise ValueError(f"unknown format {fmt!r}; expected 'csv' or 'tsv'")
        return fmt
    suffix = Path(path).suffix.lower()
    if suffix == ".tsv":
        return "tsv"
    return "csv"


def load_counts(path: str | Path, fmt: str | None = None) -> CountMatrix:
    """Read a count matrix from a delimited text file.

    The first row is a header: an identifier column name followed by the
    variable names.  Every following row is a sample id followed by the
    counts for that sample.

    Parameters
    ----------
    path : str or Path
    fmt : {'csv', 'tsv'}, optional
        Delimiter; inferred from the file suffix when omitted (.tsv means
        tab, anything else comma).

    Returns
    -------
    CountMatrix

    Raises
    ------
    NegativeCount, NonIntegerCount
        With the offending row id and column name in the message.
    LengthMismatch
        On ragged rows, an empty file, or duplicate identifiers.
    """
    delim = _DELIMS[_format_of(path, fmt)]
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter=delim))
    rows = [r for r in rows if r]  # ignore blank lines
    if not rows:
        raise LengthMismatch(f"{path}: empty file")
    header = rows[0]
    if len(header) < 2:
        raise LengthMismatch(f"{path}: header has no variable columns")
    var_names = tuple(name.strip() for name in header[1:])
    sample_ids: list[str] = []
    data = np.empty((len(rows) - 1, len(var_names)), dtype=np.int64)
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise LengthMismatch(
                f"{path}: line {r} has {len(row)} fields, expected {len(header)}"
            )
        sid = row[0].strip()
        sample_ids.append(sid)
        for j, cell in enumerate(row[1:]):
            text = cell.strip()
            try:
                value = int(text)
            except ValueError:
                # Distinguish "2.5" (a number, just not integral) from junk.
                try:
                    as_float = float(text)
                except ValueError:
                    raise NonIntegerCount(
                        f"{path}: unparseable count {text!r} at row {sid!r}, "
                        f"column {var_names[j]!r}"
                    ) from None
                if as_float != math.floor(as_float):
                    raise NonIntegerCount(
                        f"{path}: non-integer count {text!r} at row {sid!r}, "
                        f"column {var_names[j]!r}"
                    ) from None
                value = int(as_float)
            if value < 0:
                raise NegativeCount(
                    f"{path}: negative count {value} at row {sid!r}, column {var_names[j]!r}"
                )
            data[r - 2, j] = value
    return CountMatrix(data, tuple(sample_ids), var_names)


def save_counts(cm: CountMatrix, path: str | Path, fmt: str | None = None) -> None:
    """Write a count matrix in the format accepted by load_counts."""
    delim = _DELIMS[_format_of(path, fmt)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter=delim)
        writer.writerow(["sample_id", *cm.var_names])
        for sid, row in zip(cm.sample_ids, cm.counts):
            writer.writerow([sid, *(int(v) for v in row)])


def compute_offsets(cm: CountMatrix, mode: str = "unit") -> OffsetVector:
    """Derive per-sample offsets from a count matrix.

    Parameters
    ----------
    cm : CountMatrix
    mode : {'unit', 'libsize'}
        'unit' gives all-ones offsets.  'libsize' divides each row total by
        the geometric mean of the row totals, so the offsets multiply to 1.

    Raises
    ------
    ZeroLibrarySize
        In 'libsize' mode when some row total is zero.
    """
    if mode == "unit":
        return OffsetVector(np.ones(cm.n))
    if mode == "libsize":
        totals = cm.counts.sum(axis=1).astype(float)
        if np.any(totals == 0.0):
            i = int(np.flatnonzero(totals == 0.0)[0])
            raise ZeroLibrarySize(
                f"sample {cm.sample_ids[i]!r} has zero total count; "
                "library-size offsets are undefined"
            )
        log_totals = np.log(totals)
        return OffsetVector(np.exp(log_totals - log_totals.mean()))
    raise ValueError(f"unknown offset mode {mode!r}; expected 'unit' or 'libsize'")


def load_offsets(path: str | Path, n: int | None = None) -> OffsetVector:
    """Read offsets from a text file with one positive real per line.

    Parameters
    ----------
    path : str or Path
    n : int, optional
        Expected length; a mismatch raises LengthMismatch.
    """
    values: list[float] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                value = float(text)
            except ValueError:
                raise NonpositiveOffset(
                    f"{path}: line {lineno}: unparseable offset {text!r}"
                ) from None
            if not math.isfinite(value) or value <= 0.0:
                raise NonpositiveOffset(
                    f"{path}: line {lineno}: offset {value!r} must be finite and > 0"
                )
            values.append(value)
    if n is not None and len(values) != n:
        raise LengthMismatch(f"{path}: {len(values)} offsets for {n} samples")
    return OffsetVector(np.asarray(values))


def save_offsets(off: OffsetVector, path: str | Path) -> None:
    """Write offsets, one per line, in full round-trip precision."""
    with open(path, "w") as fh:
        for value in off.c:
            fh.write(f"{float(value)!r}\n")


def filter_top_variable(cm: CountMatrix, top_n: int) -> CountMatrix:
    """Keep the top_n columns by interquartile range of log(count + 1).

    Ties are broken in favor of earlier original columns, and the selected
    columns keep their original relative order, so applying the filter
    twice with the same top_n is a no-op.  If top_n >= d the matrix is
    returned unchanged.
    """
    if top_n < 1:
        raise ValueError(f"top_n must be >= 1, got {top_n}")
    if top_n >= cm.d:
        return cm
    logged = np.log(cm.counts + 1.0)
    q1, q3 = np.percentile(logged, [25.0, 75.0], axis=0)
    iqr = q3 - q1
    # Stable sort on negated IQR keeps earlier columns first among ties.
    order = np.argsort(-iqr, kind="stable")[:top_n]
    keep = np.sort(order)
    return CountMatrix(
        cm.counts[:, keep],
        cm.sample_ids,
        tuple(cm.var_names[j] for j in keep),
    )
