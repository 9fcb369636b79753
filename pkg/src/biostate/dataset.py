"""Biomarker panels: CSV ingestion, validation and z-score normalization.

Panels are read from a flat CSV whose first column holds subject ids and
whose remaining headers encode ``NAME@WINDOW`` (``Pre``, ``Post`` or
``Rec24h``; a bare ``NAME`` means ``Pre``).  Lines starting with ``#`` are
metadata comments and are skipped.
"""
from __future__ import annotations

import csv
import enum
import io
import json
import math
import os
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

import numpy as np

from .errors import (
    DuplicateColumn,
    DuplicateSubject,
    EmptyPanel,
    MalformedCsv,
    NonFiniteValue,
    ShapeMismatch,
    ZeroVariance,
)

# Trailing columns written by the augmentation and projection steps.  They
# are never part of the biomarker feature space.
METADATA_COLUMNS = ("provenance", "component", "cluster", "true_state")


class Window(str, enum.Enum):
    PRE = "Pre"
    POST = "Post"
    REC24H = "Rec24h"

    @classmethod
    def parse(cls, text: str) -> "Window":
        key = text.strip().lower()
        aliases = {"pre": cls.PRE, "post": cls.POST, "rec24h": cls.REC24H, "24h": cls.REC24H}
        try:
            return aliases[key]
        except KeyError:
            raise MalformedCsv(f"unknown acquisition window {text!r}") from None


@dataclass(frozen=True)
class BiomarkerDescriptor:
    name: str
    unit: str = ""
    window: Window = Window.PRE

    @property
    def label(self) -> str:
        return f"{self.name}@{self.window.value}"

    @classmethod
    def from_header(cls, header: str, unit: str = "") -> "BiomarkerDescriptor":
        name, sep, window = header.strip().partition("@")
        name = name.strip()
        if not name:
            raise MalformedCsv(f"empty biomarker name in header {header!r}")
        return cls(name, unit, Window.parse(window) if sep else Window.PRE)

    def to_dict(self) -> dict:
        return {"name": self.name, "unit": self.unit, "window": self.window.value}

    @classmethod
    def from_dict(cls, d: dict) -> "BiomarkerDescriptor":
        return cls(d["name"], d.get("unit", ""), Window.parse(d.get("window", "Pre")))


def _check_schema(schema: Sequence[BiomarkerDescriptor]) -> None:
    seen = set()
    for desc in schema:
        key = (desc.name, desc.window)
        if key in seen:
            raise DuplicateColumn(f"duplicate column {desc.label!r}")
        seen.add(key)


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


# The 18 marker/window combinations of the real-world cohort.
TABLE1_SCHEMA: tuple[BiomarkerDescriptor, ...] = tuple(
    [
        BiomarkerDescriptor(name, unit, w)
        for name, unit in [
            ("CK", "U/L"),
            ("LDH", "U/L"),
            ("CRP", "mg/L"),
            ("Cortisol", "ug/dL"),
            ("Testosterone", "ng/dL"),
        ]
        for w in Window
    ]
    + [
        BiomarkerDescriptor("SpO2", "%", Window.PRE),
        BiomarkerDescriptor("HeartRate", "bpm", Window.PRE),
        BiomarkerDescriptor("BloodPressure", "mmHg", Window.PRE),
    ]
)


@dataclass(frozen=True, eq=False)
class BiomarkerPanel:
    """Athletes x biomarkers matrix in native units."""

    subjects: tuple[str, ...]
    schema: tuple[BiomarkerDescriptor, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(str(s) for s in self.subjects))
        object.__setattr__(self, "schema", tuple(self.schema))
        values = _frozen(self.values)
        object.__setattr__(self, "values", values)
        n, b = len(self.subjects), len(self.schema)
        if n < 2 or b < 1:
            raise EmptyPanel(f"panel needs n >= 2 subjects and b >= 1 columns, got n={n}, b={b}")
        if values.shape != (n, b):
            raise ShapeMismatch(f"values shape {values.shape} does not match ({n}, {b})")
        if len(set(self.subjects)) != n:
            dup = next(s for s in self.subjects if self.subjects.count(s) > 1)
            raise DuplicateSubject(f"duplicate subject id {dup!r}")
        _check_schema(self.schema)
        bad = np.argwhere(~np.isfinite(values))
        if len(bad):
            i, j = bad[0]
            raise NonFiniteValue(int(i), self.schema[j].label, self.subjects[i])

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def labels(self) -> list[str]:
        return [d.label for d in self.schema]

    def __eq__(self, other):
        if not isinstance(other, BiomarkerPanel):
            return NotImplemented
        return (
            self.subjects == other.subjects
            and self.schema == other.schema
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )

    __hash__ = None

    def subset(self, subjects: Iterable[str]) -> "BiomarkerPanel":
        index = {s: i for i, s in enumerate(self.subjects)}
        keep = [index[s] for s in subjects]
        return BiomarkerPanel(tuple(self.subjects[i] for i in keep), self.schema, self.values[keep])


@dataclass(frozen=True, eq=False)
class NormalizationParams:
    means: np.ndarray
    stds: np.ndarray
    schema: tuple[BiomarkerDescriptor, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "means", _frozen(self.means))
        object.__setattr__(self, "stds", _frozen(self.stds))
        object.__setattr__(self, "schema", tuple(self.schema))
        if self.means.ndim != 1 or self.means.shape != self.stds.shape:
            raise ShapeMismatch("means and stds must be vectors of equal length")
        if self.schema and len(self.schema) != len(self.means):
            raise ShapeMismatch("schema length does not match parameter length")
        if not np.all(self.stds > 0):
            cols = [
                self.schema[j].label if self.schema else str(j)
                for j in np.flatnonzero(~(self.stds > 0))
            ]
            raise ZeroVariance(cols)

    @classmethod
    def identity(cls, schema: Sequence[BiomarkerDescriptor]) -> "NormalizationParams":
        """Parameters for data that is already expressed in z-space."""
        b = len(schema)
        return cls(np.zeros(b), np.ones(b), tuple(schema))

    def to_dict(self) -> dict:
        return {
            "means": [float(v) for v in self.means],
            "stds": [float(v) for v in self.stds],
            "schema": [d.to_dict() for d in self.schema],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationParams":
        return cls(
            np.asarray(d["means"], dtype=float),
            np.asarray(d["stds"], dtype=float),
            tuple(BiomarkerDescriptor.from_dict(s) for s in d.get("schema", [])),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "NormalizationParams":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class NormalizedPanel:
    """z-scored panel together with the parameters that produced it."""

    subjects: tuple[str, ...]
    schema: tuple[BiomarkerDescriptor, ...]
    z: np.ndarray
    params: NormalizationParams

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(str(s) for s in self.subjects))
        object.__setattr__(self, "schema", tuple(self.schema))
        z = _frozen(self.z)
        object.__setattr__(self, "z", z)
        n, b = len(self.subjects), len(self.schema)
        if n < 2 or b < 1:
            raise EmptyPanel(f"panel needs n >= 2 subjects and b >= 1 columns, got n={n}, b={b}")
        if z.shape != (n, b):
            raise ShapeMismatch(f"z shape {z.shape} does not match ({n}, {b})")
        if len(self.params.means) != b:
            raise ShapeMismatch("normalization params do not match column count")
        if len(set(self.subjects)) != n:
            raise DuplicateSubject("duplicate subject id in normalized panel")
        bad = np.argwhere(~np.isfinite(z))
        if len(bad):
            i, j = bad[0]
            raise NonFiniteValue(int(i), self.schema[j].label, self.subjects[i])

    @classmethod
    def from_z(cls, z, subjects=None, schema=None) -> "NormalizedPanel":
        """Wrap a matrix that is already in z-space (identity parameters)."""
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        n, b = z.shape
        if subjects is None:
            subjects = [f"s{i:03d}" for i in range(n)]
        if schema is None:
            schema = [BiomarkerDescriptor(f"m{j}") for j in range(b)]
        return cls(tuple(subjects), tuple(schema), z, NormalizationParams.identity(schema))

    @property
    def shape(self) -> tuple[int, int]:
        return self.z.shape

    @property
    def labels(self) -> list[str]:
        return [d.label for d in self.schema]

    def subset(self, subjects: Iterable[str]) -> "NormalizedPanel":
        index = {s: i for i, s in enumerate(self.subjects)}
        keep = [index[s] for s in subjects]
        return NormalizedPanel(
            tuple(self.subjects[i] for i in keep), self.schema, self.z[keep], self.params
        )


def _open_text(source) -> tuple[IO[str], bool]:
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", encoding="utf-8", newline=""), True
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8"), newline=""), True
    if isinstance(source, io.TextIOBase):
        return source, False
    # binary file object
    return io.TextIOWrapper(source, encoding="utf-8", newline=""), False


def _read_rows(source) -> list[list[str]]:
    fh, owned = _open_text(source)
    try:
        lines = [line for line in fh if line.strip() and not line.lstrip().startswith("#")]
    except UnicodeDecodeError as exc:
        raise MalformedCsv(f"input is not valid UTF-8: {exc}") from None
    finally:
        if owned:
            fh.close()
    return list(csv.reader(lines))


def _parse_float(cell: str, row: int, column: str, subject: str) -> float:
    text = cell.strip()
    if not text:
        raise MalformedCsv(f"missing value at row {row}, column {column!r}")
    try:
        value = float(text)
    except ValueError:
        raise MalformedCsv(f"unparseable number {cell!r} at row {row}, column {column!r}") from None
    if not math.isfinite(value):
        raise NonFiniteValue(row, column, subject)
    return value


def read_table(source, schema: Sequence[BiomarkerDescriptor] | None = None):
    """Parse a panel CSV, returning ``(panel, metadata)``.

    ``metadata`` maps each trailing metadata column present in the file
    (see ``METADATA_COLUMNS``) to its list of raw string values.
    """
    rows = _read_rows(source)
    if not rows:
        raise MalformedCsv("empty CSV: no header row")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2:
        raise EmptyPanel("CSV has no biomarker columns")
    meta_idx = [j for j, h in enumerate(header) if j > 0 and h.lower() in METADATA_COLUMNS]
    data_idx = [j for j in range(1, len(header)) if j not in meta_idx]

    if len(set(header[j] for j in data_idx)) != len(data_idx):
        dup = next(header[j] for j in data_idx if [header[k] for k in data_idx].count(header[j]) > 1)
        raise DuplicateColumn(f"duplicate column {dup!r}")
    parsed = [BiomarkerDescriptor.from_header(header[j]) for j in data_idx]
    if schema is not None:
        schema = tuple(schema)
        if [(d.name, d.window) for d in parsed] != [(d.name, d.window) for d in schema]:
            raise MalformedCsv(
                "CSV header does not match the explicit schema: "
                f"{[d.label for d in parsed]} vs {[d.label for d in schema]}"
            )
        parsed = list(schema)
    _check_schema(parsed)

    subjects: list[str] = []
    values: list[list[float]] = []
    metadata: dict[str, list[str]] = {header[j].lower(): [] for j in meta_idx}
    for r, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise MalformedCsv(f"ragged row {r}: expected {len(header)} fields, got {len(row)}")
        subject = row[0].strip()
        if not subject:
            raise MalformedCsv(f"empty subject id at row {r}")
        subjects.append(subject)
        values.append([_parse_float(row[j], r, header[j], subject) for j in data_idx])
        for j in meta_idx:
            metadata[header[j].lower()].append(row[j].strip())
    if len(set(subjects)) != len(subjects):
        dup = next(s for s in subjects if subjects.count(s) > 1)
        raise DuplicateSubject(f"duplicate subject id {dup!r}")
    if len(subjects) < 2:
        raise EmptyPanel(f"panel needs at least 2 subjects, got {len(subjects)}")
    panel = BiomarkerPanel(tuple(subjects), tuple(parsed), np.array(values, dtype=float))
    return panel, metadata


def load_panel(source, schema: Sequence[BiomarkerDescriptor] | None = None) -> BiomarkerPanel:
    """Load and validate a biomarker panel.

    Parameters
    ----------
    source : path, bytes, or text/binary file object
        UTF-8 CSV with header ``id,NAME@WINDOW,...``.
    schema : sequence of BiomarkerDescriptor, optional
        Explicit schema. The CSV header must list the same (name, window)
        pairs in the same order; units are taken from the schema. When
        omitted the schema is derived from the header with empty units.
    """
    return read_table(source, schema)[0]


def format_float(x: float) -> str:
    # repr round-trips exactly through float()
    return repr(float(x))


def dump_panel(
    panel: BiomarkerPanel,
    extra: dict[str, Sequence] | None = None,
    comment: str | None = None,
) -> str:
    """Canonical CSV serialization; ``load_panel(dump_panel(p)) == p``."""
    buf = io.StringIO()
    if comment:
        for line in comment.splitlines():
            buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    extra = extra or {}
    writer.writerow(["id", *panel.labels, *extra.keys()])
    for i, subject in enumerate(panel.subjects):
        writer.writerow(
            [subject, *(format_float(v) for v in panel.values[i]), *(str(col[i]) for col in extra.values())]
        )
    return buf.getvalue()


def fit_normalization(panel: BiomarkerPanel) -> NormalizationParams:
    """Column means and population (divisor n) standard deviations."""
    x = panel.values
    means = x.mean(axis=0)
    stds = np.sqrt(((x - means) ** 2).mean(axis=0))
    zero = np.flatnonzero(stds == 0)
    if len(zero):
        raise ZeroVariance([panel.schema[j].label for j in zero])
    return NormalizationParams(means, stds, panel.schema)


def apply_normalization(panel: BiomarkerPanel, params: NormalizationParams) -> NormalizedPanel:
    if panel.values.shape[1] != len(params.means):
        raise ShapeMismatch(
            f"panel has {panel.values.shape[1]} columns, params have {len(params.means)}"
        )
    z = (panel.values - params.means) / params.stds
    return NormalizedPanel(panel.subjects, panel.schema, z, params)


def normalize(panel: BiomarkerPanel) -> NormalizedPanel:
    return apply_normalization(panel, fit_normalization(panel))


def invert_normalization(panel: NormalizedPanel) -> BiomarkerPanel:
    """Map z-scores back to native units."""
    p = panel.params
    return BiomarkerPanel(panel.subjects, panel.schema, panel.z * p.stds + p.means)


def as_z_space(panel: BiomarkerPanel) -> NormalizedPanel:
    """Treat a panel whose values are already z-scores as normalized."""
    return NormalizedPanel(
        panel.subjects, panel.schema, panel.values, NormalizationParams.identity(panel.schema)
    )
