"""Per-subject datasets, 2x2x2 count tables and CSV ingestion."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .errors import (
    DegenerateTable,
    EmptyAfterFiltering,
    MissingColumn,
    NonBinaryOutcome,
)

RESERVED = ("y", "x", "z")


def _frozen(a, name: str) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"column {name!r} contains missing or non-finite values")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Binary outcome ``y``, exposure ``x``, instrument ``z`` and optional covariates.

    Arrays are copied and made read-only on construction. ``extra`` holds
    derived columns (fitted exposure, residuals, ...) that estimators add for
    second-stage designs; they are never treated as covariates.
    """

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)
    extra: Mapping[str, np.ndarray] = field(default_factory=dict)
    dropped: int = 0

    def __post_init__(self):
        y = _frozen(self.y, "y")
        x = _frozen(self.x, "x")
        z = _frozen(self.z, "z")
        n = y.size
        if n == 0:
            raise EmptyAfterFiltering("dataset has no rows")
        if x.size != n or z.size != n:
            raise ValueError("y, x and z must have equal length")
        if not np.all((y == 0) | (y == 1)):
            raise NonBinaryOutcome("outcome must take values in {0, 1}")
        cov = {}
        for name, col in dict(self.covariates).items():
            if name in RESERVED:
                raise ValueError(f"covariate name {name!r} is reserved")
            cov[name] = _frozen(col, name)
            if cov[name].size != n:
                raise ValueError(f"covariate {name!r} has wrong length")
        extra = {}
        for name, col in dict(self.extra).items():
            if name in RESERVED or name in cov:
                raise ValueError(f"derived column {name!r} shadows an existing column")
            extra[name] = _frozen(col, name)
            if extra[name].size != n:
                raise ValueError(f"derived column {name!r} has wrong length")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "covariates", MappingProxyType(cov))
        object.__setattr__(self, "extra", MappingProxyType(extra))

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return tuple(self.covariates)

    @property
    def c(self) -> np.ndarray | None:
        """Covariate matrix (n, k), or None when there are no covariates."""
        if not self.covariates:
            return None
        return np.column_stack([self.covariates[k] for k in self.covariates])

    def frame(self) -> dict[str, np.ndarray]:
        out = {"y": self.y, "x": self.x, "z": self.z}
        out.update(self.covariates)
        out.update(self.extra)
        return out

    def with_columns(self, **cols) -> "Dataset":
        extra = dict(self.extra)
        extra.update(cols)
        return Dataset(self.y, self.x, self.z, self.covariates, extra, self.dropped)

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        return Dataset(
            self.y[mask],
            self.x[mask],
            self.z[mask],
            {k: v[mask] for k, v in self.covariates.items()},
            {k: v[mask] for k, v in self.extra.items()},
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, col in sorted(self.frame().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(col).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class CountTable2x2x2:
    """Counts ``n[x][z][y]`` for binary exposure, instrument and outcome."""

    counts: tuple

    def __post_init__(self):
        arr = np.asarray(self.counts)
        if arr.shape != (2, 2, 2):
            raise DegenerateTable("count table must have shape (2, 2, 2)")
        if np.any(arr < 0) or np.any(arr != np.round(arr)):
            raise DegenerateTable("counts must be nonnegative integers")
        if arr.sum() <= 0:
            raise DegenerateTable("count table is empty")
        object.__setattr__(
            self, "counts", tuple(tuple(tuple(int(v) for v in row) for row in m) for m in arr)
        )

    @classmethod
    def from_flat(cls, values) -> "CountTable2x2x2":
        """Build from the row order of the published layout.

        ``values`` is ``(x0z0y0, x0z0y1, x0z1y0, x0z1y1, x1z0y0, x1z0y1, x1z1y0, x1z1y1)``.
        """
        v = list(values)
        if len(v) != 8:
            raise DegenerateTable("expected 8 counts")
        return cls(np.asarray(v).reshape(2, 2, 2))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=float)

    @property
    def total(self) -> int:
        return int(self.array.sum())

    def check_estimable(self) -> None:
        margins = self.array.sum(axis=2)
        if np.any(margins <= 0):
            raise DegenerateTable("every (x, z) cell needs at least one subject")

    def cells(self):
        """Yield ``(x, z, y, count)`` for the eight cells."""
        for x in (0, 1):
            for z in (0, 1):
                for y in (0, 1):
                    yield x, z, y, self.counts[x][z][y]


def expand_table(table: CountTable2x2x2) -> Dataset:
    """One row per counted subject."""
    xs, zs, ys = [], [], []
    for x, z, y, c in table.cells():
        xs.append(np.full(c, x))
        zs.append(np.full(c, z))
        ys.append(np.full(c, y))
    return Dataset(np.concatenate(ys), np.concatenate(xs), np.concatenate(zs))


def tabulate(data: Dataset) -> CountTable2x2x2:
    """Inverse of :func:`expand_table` for binary exposure and instrument."""
    if not (np.all(np.isin(data.x, (0, 1))) and np.all(np.isin(data.z, (0, 1)))):
        raise DegenerateTable("tabulation needs binary exposure and instrument")
    arr = np.zeros((2, 2, 2), dtype=int)
    np.add.at(arr, (data.x.astype(int), data.z.astype(int), data.y.astype(int)), 1)
    return CountTable2x2x2(arr)


@dataclass(frozen=True)
class IngestResult:
    data: Dataset
    dropped: int
    path: str
    sha256: str


def ingest_csv(
    path,
    y: str = "y",
    x: str = "x",
    z: str = "z",
    covariates=(),
) -> IngestResult:
    """Read a headed CSV file into a :class:`Dataset`.

    Rows with an empty or non-numeric value in any mapped column are dropped
    and counted. Parsing is locale independent: only ``.`` is accepted as the
    decimal separator.
    """
    path = Path(path)
    raw = path.read_bytes()
    mapping = {"y": y, "x": x, "z": z}
    for c in covariates:
        mapping[c] = c
    rows: dict[str, list[float]] = {k: [] for k in mapping}
    dropped = 0
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [col for col in mapping.values() if col not in header]
        if missing:
            raise MissingColumn(f"column(s) not found in header: {', '.join(missing)}")
        for rec in reader:
            try:
                vals = {k: _parse_number(rec[col]) for k, col in mapping.items()}
            except ValueError:
                dropped += 1
                continue
            for k, v in vals.items():
                rows[k].append(v)
    if not rows["y"]:
        raise EmptyAfterFiltering(f"no usable rows in {path} ({dropped} dropped)")
    yv = np.asarray(rows["y"])
    if not np.all((yv == 0) | (yv == 1)):
        bad = sorted(set(yv[(yv != 0) & (yv != 1)].tolist()))[:5]
        raise NonBinaryOutcome(f"outcome column {y!r} has non-binary values {bad}")
    data = Dataset(
        yv,
        rows["x"],
        rows["z"],
        {c: rows[c] for c in covariates},
        dropped=dropped,
    )
    return IngestResult(data, dropped, str(path), hashlib.sha256(raw).hexdigest())


def _parse_number(text) -> float:
    if text is None:
        raise ValueError("missing")
    s = text.strip()
    if not s or "," in s:
        raise ValueError("empty or locale-formatted number")
    v = float(s)
    if not np.isfinite(v):
        raise ValueError("non-finite")
    return v


FIXTURES = {"brookhart": "brookhart_counts.csv"}


def load_fixture(name: str) -> CountTable2x2x2:
    """Load a shipped count table (``x,z,y,count`` rows)."""
    try:
        fname = FIXTURES[name]
    except KeyError:
        raise MissingColumn(f"unknown fixture {name!r}; available: {', '.join(FIXTURES)}") from None
    text = resources.files("ivodds").joinpath("fixtures").joinpath(fname).read_text(encoding="utf-8")
    arr = np.zeros((2, 2, 2), dtype=int)
    for rec in csv.DictReader(text.splitlines()):
        arr[int(rec["x"]), int(rec["z"]), int(rec["y"])] = int(rec["count"])
    return CountTable2x2x2(arr)
