"""Column-named matrices with missing cells, CSV round trip, block-missingness
patterns, and the seeded split protocol used by the experiments."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, LoadError

# Row provenance tags.
UNTAGGED = 0
FILE1 = 1
FILE2 = 2


@dataclass(frozen=True)
class MaskedMatrix:
    """N x d matrix with named columns and a per-cell observed flag.

    Cells with ``mask == False`` hold NaN so that stale values can never leak
    into downstream computations. Instances are immutable; every
    transformation returns a new matrix. ``provenance`` carries a per-row
    source-file tag (0 = untagged) that is kept in memory only and never
    written into the numeric table.
    """

    columns: tuple[str, ...]
    values: np.ndarray
    mask: np.ndarray
    provenance: np.ndarray | None = None

    def __post_init__(self) -> None:
        columns = tuple(str(c) for c in self.columns)
        values = np.array(self.values, dtype=np.float64)
        mask = np.array(self.mask, dtype=bool)
        if values.ndim != 2:
            raise ConfigError("values must be a 2-D matrix")
        n, d = values.shape
        if n < 1 or d < 1:
            raise ConfigError("matrix needs at least one row and one column")
        if mask.shape != values.shape:
            raise ConfigError(f"mask shape {mask.shape} does not match values shape {values.shape}")
        if len(columns) != d:
            raise ConfigError(f"got {len(columns)} column names for {d} columns")
        if any(not c for c in columns):
            raise ConfigError("column names must be nonempty")
        if len(set(columns)) != d:
            raise ConfigError("column names must be unique")
        if not np.isfinite(values[mask]).all():
            raise ConfigError("observed cells must be finite")
        prov = self.provenance
        prov = np.zeros(n, dtype=np.int64) if prov is None else np.array(prov, dtype=np.int64)
        if prov.shape != (n,):
            raise ConfigError("provenance must carry exactly one tag per row")
        values[~mask] = np.nan
        for a in (values, mask, prov):
            a.setflags(write=False)
        object.__setattr__(self, "columns", columns)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "provenance", prov)

    @classmethod
    def dense(
        cls,
        values: np.ndarray,
        columns: Sequence[str] | None = None,
        provenance: np.ndarray | None = None,
    ) -> "MaskedMatrix":
        """Wrap a fully observed 2-D array; columns default to x1..xd."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise ConfigError("dense() expects a 2-D array")
        if columns is None:
            columns = tuple(f"x{j + 1}" for j in range(values.shape[1]))
        return cls(tuple(columns), values, np.ones(values.shape, dtype=bool), provenance)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    def column_index(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError:
            raise ConfigError(f"unknown column {name!r}; columns are {list(self.columns)}") from None

    def columns_index(self, names: Sequence[str]) -> np.ndarray:
        return np.array([self.column_index(n) for n in names], dtype=np.intp)

    def observed_column(self, name: str) -> np.ndarray:
        """Observed values of one column, in row order."""
        j = self.column_index(name)
        return self.values[self.mask[:, j], j]

    def select_rows(self, rows: np.ndarray) -> "MaskedMatrix":
        rows = np.asarray(rows)
        return MaskedMatrix(self.columns, self.values[rows], self.mask[rows], self.provenance[rows])

    def stack(self, other: "MaskedMatrix") -> "MaskedMatrix":
        """Concatenate rows of two matrices with identical column sets."""
        if self.columns != other.columns:
            raise ConfigError(f"cannot stack: columns {list(self.columns)} != {list(other.columns)}")
        return MaskedMatrix(
            self.columns,
            np.vstack([self.values, other.values]),
            np.vstack([self.mask, other.mask]),
            np.concatenate([self.provenance, other.provenance]),
        )


@dataclass(frozen=True)
class FilePattern:
    """Partition of the column set into common and file-specific blocks.

    Rows tagged as file 1 never observe ``specific2``; rows tagged as file 2
    never observe ``specific1``; ``common`` is observed in both files.
    """

    common: tuple[str, ...]
    specific1: tuple[str, ...]
    specific2: tuple[str, ...]

    def __post_init__(self) -> None:
        common = tuple(self.common)
        s1 = tuple(self.specific1)
        s2 = tuple(self.specific2)
        if not common:
            raise ConfigError("common column set must be nonempty")
        sets = {"common": set(common), "specific1": set(s1), "specific2": set(s2)}
        for name, group, cols in (("common", common, sets["common"]),
                                  ("specific1", s1, sets["specific1"]),
                                  ("specific2", s2, sets["specific2"])):
            if len(group) != len(cols):
                raise ConfigError(f"duplicate column in pattern set {name}")
        for a in ("common", "specific1", "specific2"):
            for b in ("common", "specific1", "specific2"):
                if a < b and sets[a] & sets[b]:
                    raise ConfigError(f"pattern sets {a} and {b} overlap: {sorted(sets[a] & sets[b])}")
        object.__setattr__(self, "common", common)
        object.__setattr__(self, "specific1", s1)
        object.__setattr__(self, "specific2", s2)

    def all_columns(self) -> tuple[str, ...]:
        return self.common + self.specific1 + self.specific2

    def hidden_for_file(self, tag: int) -> tuple[str, ...]:
        """Columns a row of the given file never observes."""
        if tag == FILE1:
            return self.specific2
        if tag == FILE2:
            return self.specific1
        raise ConfigError(f"file tag must be {FILE1} or {FILE2}, got {tag}")


@dataclass(frozen=True)
class SplitSpec:
    """Sizes and seed for splitting one complete table into two data files
    plus a held-out evaluation set."""

    n1: int
    n2: int
    n_eval: int
    seed: int
    pattern: FilePattern

    def __post_init__(self) -> None:
        for name, v in (("n1", self.n1), ("n2", self.n2), ("n_eval", self.n_eval)):
            if v < 1:
                raise ConfigError(f"split size {name} must be >= 1, got {v}")


def load_table(path: str | Path, missing_token: str = "") -> MaskedMatrix:
    """Load a comma-separated table with a header row.

    Cells equal to ``missing_token`` (default: empty field) are treated as
    missing. Ragged rows, duplicate column names, unparseable cells and
    header-only files raise :class:`LoadError` naming the offending line.
    """
    path = Path(path)
    try:
        handle = path.open(newline="")
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    with handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None:
            raise LoadError(f"{path}: file is empty")
        columns = [c for c in header]
        if any(not c for c in columns):
            raise LoadError(f"{path}: line 1: empty column name in header")
        if len(set(columns)) != len(columns):
            dupes = sorted({c for c in columns if columns.count(c) > 1})
            raise LoadError(f"{path}: line 1: duplicate column name(s) {dupes}")
        d = len(columns)
        rows: list[list[float]] = []
        obs: list[list[bool]] = []
        for lineno, record in enumerate(reader, start=2):
            if len(record) != d:
                raise LoadError(f"{path}: line {lineno}: expected {d} fields, got {len(record)}")
            vrow = []
            orow = []
            for name, cell in zip(columns, record):
                if cell == missing_token:
                    vrow.append(np.nan)
                    orow.append(False)
                    continue
                try:
                    vrow.append(float(cell))
                except ValueError:
                    raise LoadError(
                        f"{path}: line {lineno}: column {name!r}: cannot parse {cell!r} as a number"
                    ) from None
                orow.append(True)
            rows.append(vrow)
            obs.append(orow)
        if not rows:
            raise LoadError(f"{path}: no data rows")
    return MaskedMatrix(tuple(columns), np.array(rows), np.array(obs))


def write_table(m: MaskedMatrix, path: str | Path, missing_token: str = "") -> None:
    """Write a matrix as CSV; missing cells become ``missing_token``.

    Observed values use the shortest decimal representation that round-trips
    exactly through float64, so write/load is lossless.
    """
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(m.columns)
        for i in range(m.n_rows):
            writer.writerow(
                [repr(float(v)) if ok else missing_token for v, ok in zip(m.values[i], m.mask[i])]
            )


def apply_pattern(m: MaskedMatrix, pattern: FilePattern, file_of_row: np.ndarray) -> MaskedMatrix:
    """Mask out each row's file-specific hidden block.

    ``file_of_row`` assigns every row to file 1 or file 2; the other file's
    specific columns are masked for that row. Already-missing cells stay
    missing. The tags are recorded as row provenance of the result.
    """
    file_of_row = np.asarray(file_of_row, dtype=np.int64)
    if file_of_row.shape != (m.n_rows,):
        raise ConfigError("file_of_row must assign exactly one tag per row")
    bad = set(np.unique(file_of_row)) - {FILE1, FILE2}
    if bad:
        raise ConfigError(f"file_of_row tags must be {FILE1} or {FILE2}, got {sorted(bad)}")
    pattern_cols = set(pattern.all_columns())
    matrix_cols = set(m.columns)
    if pattern_cols != matrix_cols:
        missing = sorted(pattern_cols - matrix_cols)
        extra = sorted(matrix_cols - pattern_cols)
        parts = []
        if missing:
            parts.append(f"pattern names unknown column(s) {missing}")
        if extra:
            parts.append(f"column(s) {extra} not covered by the pattern")
        raise ConfigError("; ".join(parts))
    mask = m.mask.copy()
    for tag in (FILE1, FILE2):
        hidden = pattern.hidden_for_file(tag)
        if not hidden:
            continue
        cols = m.columns_index(hidden)
        rows = np.flatnonzero(file_of_row == tag)
        mask[np.ix_(rows, cols)] = False
    return MaskedMatrix(m.columns, m.values, mask, file_of_row)


def split_indices(n_rows: int, n1: int, n2: int, n_eval: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Disjoint row indices for (file1, file2, eval) from a seeded permutation.

    The permutation is drawn from NumPy's PCG64 generator
    (``numpy.random.default_rng``), so splits are reproducible across
    platforms for a fixed seed.
    """
    total = n1 + n2 + n_eval
    if total > n_rows:
        raise ConfigError(f"split sizes {n1}+{n2}+{n_eval}={total} exceed the {n_rows} available rows")
    perm = np.random.default_rng(seed).permutation(n_rows)
    return perm[:n1], perm[n1:n1 + n2], perm[n1 + n2:total]


def split_for_matching(m: MaskedMatrix, spec: SplitSpec) -> tuple[MaskedMatrix, MaskedMatrix, MaskedMatrix]:
    """Split a complete table into two pattern-masked files and an untouched
    evaluation set. Deterministic for a fixed seed."""
    if not m.mask.all():
        raise ConfigError("split source must be fully observed")
    idx1, idx2, idx_eval = split_indices(m.n_rows, spec.n1, spec.n2, spec.n_eval, spec.seed)
    file1 = apply_pattern(m.select_rows(idx1), spec.pattern, np.full(spec.n1, FILE1))
    file2 = apply_pattern(m.select_rows(idx2), spec.pattern, np.full(spec.n2, FILE2))
    return file1, file2, m.select_rows(idx_eval)
