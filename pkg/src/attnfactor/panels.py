"""Timestamped panels, standardization, frequency collapsing and CSV I/O.

Timestamps are integer period indices counted from year 0 in the panel's
own sampling unit: months for high-frequency panels, quarters (or more
generally blocks of ``period_months`` months) for low-frequency panels.
A monthly index ``m`` is ``year * 12 + month - 1``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

HIGH = "high"
LOW = "low"
_FREQUENCIES = (HIGH, LOW)


class PanelError(ValueError):
    """Structural problem with a panel or its source file."""


@dataclass(frozen=True)
class SeriesMeta:
    id: int
    name: str
    frequency: str
    category: str = ""

    def __post_init__(self):
        if self.frequency not in _FREQUENCIES:
            raise PanelError(f"unknown frequency {self.frequency!r} for {self.name}")

    def to_dict(self) -> dict:
        return {"name": self.name, "frequency": self.frequency, "category": self.category}


@dataclass(frozen=True)
class Panel:
    """T x N value matrix with per-column metadata and a missing mask.

    Masked cells hold NaN in ``values``.
    """

    values: np.ndarray
    timestamps: np.ndarray
    meta: tuple
    mask: np.ndarray
    frequency: str = HIGH
    period_months: int = 1

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        if values.ndim != 2:
            raise PanelError("values must be a T x N matrix")
        ts = np.asarray(self.timestamps, dtype=np.int64).copy()
        mask = np.array(self.mask, dtype=bool, copy=True)
        if ts.shape != (values.shape[0],):
            raise PanelError("timestamps length differs from row count")
        if mask.shape != values.shape:
            raise PanelError("mask shape differs from values shape")
        if len(self.meta) != values.shape[1]:
            raise PanelError("column count differs from meta count")
        if ts.size > 1 and np.any(np.diff(ts) <= 0):
            raise PanelError("timestamps must be strictly increasing")
        mask |= ~np.isfinite(values)
        values[mask] = np.nan
        if self.frequency not in _FREQUENCIES:
            raise PanelError(f"unknown frequency {self.frequency!r}")
        ids = [m.id for m in self.meta]
        if len(set(ids)) != len(ids):
            raise PanelError("series ids must be unique")
        for arr in (values, ts, mask):
            arr.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "meta", tuple(self.meta))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.meta]

    def rows(self, index) -> "Panel":
        """Sub-panel with the selected rows (sorted order is preserved)."""
        index = np.asarray(index)
        return replace(self, values=self.values[index], timestamps=self.timestamps[index],
                       mask=self.mask[index])

    def dense(self) -> np.ndarray:
        """Values as a fully observed matrix; raises if any cell is masked."""
        if self.mask.any():
            raise PanelError("panel has masked cells; linear estimators need complete data")
        return np.array(self.values)

    def month_end(self) -> np.ndarray:
        """Monthly index of the last month of each period."""
        return self.timestamps * self.period_months + self.period_months - 1


def make_panel(values, *, names: Sequence[str] | None = None, frequency: str = HIGH,
               timestamps=None, period_months: int | None = None, start: int = 0,
               first_id: int = 0, categories: Sequence[str] | None = None) -> Panel:
    """Convenience constructor for a fully observed panel."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    T, N = values.shape
    if names is None:
        names = [f"{'x' if frequency == HIGH else 'y'}{i + 1}" for i in range(N)]
    categories = categories or [""] * N
    meta = tuple(SeriesMeta(first_id + i, n, frequency, c)
                 for i, (n, c) in enumerate(zip(names, categories)))
    if timestamps is None:
        timestamps = np.arange(start, start + T)
    if period_months is None:
        period_months = 1 if frequency == HIGH else 3
    return Panel(values, timestamps, meta, ~np.isfinite(values), frequency, period_months)


# -- dates -----------------------------------------------------------------

def parse_year_month(text: str) -> tuple[int, int]:
    """Parse ``YYYY-MM`` (an optional ``-DD`` suffix is ignored)."""
    parts = text.strip().split("-")
    if len(parts) < 2:
        raise ValueError(f"not a year-month date: {text!r}")
    year, month = int(parts[0]), int(parts[1])
    if not 1 <= month <= 12:
        raise ValueError(f"month out of range: {text!r}")
    return year, month


def to_period_index(year: int, month: int, period_months: int) -> int:
    return (year * 12 + month - 1) // period_months


def format_period(index: int, period_months: int) -> str:
    """ISO year-month of the last month of the period."""
    m = int(index) * period_months + period_months - 1
    return f"{m // 12:04d}-{m % 12 + 1:02d}"


# -- CSV -------------------------------------------------------------------

def _coerce_meta(schema: Mapping[str, object]) -> dict[str, SeriesMeta]:
    out = {}
    for i, (col, m) in enumerate(schema.items()):
        if isinstance(m, SeriesMeta):
            out[col] = m
        else:
            m = dict(m)
            out[col] = SeriesMeta(int(m.get("id", i)), m.get("name", col),
                                  m["frequency"], m.get("category", ""))
    return out


def load_csv(path, schema: Mapping[str, object], period_months: int | None = None) -> Panel:
    """Read a comma-separated panel whose first column is ``date``.

    Parameters
    ----------
    path : path-like
    schema : mapping
        Column name to :class:`SeriesMeta` (or a dict with ``frequency``,
        optional ``name``, ``category`` and ``id``). The header must list
        exactly these columns after ``date``.
    period_months : int, optional
        Months per period; defaults to 1 for high and 3 for low frequency.
    """
    metas = _coerce_meta(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if not header or header[0] != "date":
            raise PanelError(f"{path}: first column must be 'date'")
        cols = header[1:]
        if set(cols) != set(metas) or len(cols) != len(metas):
            missing = sorted(set(metas) - set(cols))
            extra = sorted(set(cols) - set(metas))
            raise PanelError(f"{path}: header does not match schema "
                             f"(missing {missing}, unexpected {extra})")
        freqs = {metas[c].frequency for c in cols}
        if len(freqs) != 1:
            raise PanelError(f"{path}: mixed frequencies in one file")
        freq = freqs.pop()
        pm = period_months or (1 if freq == HIGH else 3)
        stamps, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise PanelError(f"{path}: row {lineno} has {len(row)} fields")
            try:
                y, m = parse_year_month(row[0])
            except ValueError as exc:
                raise PanelError(f"{path}: malformed date on row {lineno}: {exc}") from None
            stamps.append(to_period_index(y, m, pm))
            vals = []
            for c in row[1:]:
                c = c.strip()
                vals.append(float(c) if c else math.nan)
            rows.append(vals)
    ts = np.asarray(stamps, dtype=np.int64)
    d = np.diff(ts)
    if np.any(d == 0):
        raise PanelError(f"{path}: duplicate timestamp {format_period(ts[1:][d == 0][0], pm)}")
    if np.any(d < 0):
        raise PanelError(f"{path}: dates are not monotone increasing")
    values = np.asarray(rows, dtype=float).reshape(len(rows), len(cols))
    meta = tuple(metas[c] for c in cols)
    return Panel(values, ts, meta, np.isnan(values), freq, pm)


def save_csv(panel: Panel, path) -> tuple[Path, Path]:
    """Write ``panel`` as CSV plus a ``.meta.json`` sidecar. Returns both paths."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date"] + panel.names)
        for t in range(panel.T):
            cells = ["" if panel.mask[t, j] else repr(float(panel.values[t, j]))
                     for j in range(panel.N)]
            w.writerow([format_period(panel.timestamps[t], panel.period_months)] + cells)
    side = path.with_suffix(".meta.json")
    meta = {m.name: dict(m.to_dict(), id=m.id) for m in panel.meta}
    side.write_text(json.dumps({"period_months": panel.period_months, "columns": meta},
                               indent=2, sort_keys=True))
    return path, side


def load_saved(path) -> Panel:
    """Inverse of :func:`save_csv` using the sidecar metadata."""
    path = Path(path)
    side = json.loads(path.with_suffix(".meta.json").read_text())
    return load_csv(path, side["columns"], side["period_months"])


# -- standardization -------------------------------------------------------

@dataclass(frozen=True)
class StandardizationStats:
    mean: dict
    std: dict
    fit_range: tuple

    def lookup(self, name: str) -> tuple[float, float]:
        try:
            return self.mean[name], self.std[name]
        except KeyError:
            raise KeyError(f"no standardization stats for series {name!r}") from None


def standardize_fit(panel: Panel, in_sample_end: int | None = None) -> StandardizationStats:
    """Per-series mean and sample standard deviation (ddof=1) on rows with
    timestamp <= ``in_sample_end``. Columns without in-sample data are skipped."""
    end = int(panel.timestamps[-1]) if in_sample_end is None else int(in_sample_end)
    rows = panel.timestamps <= end
    mean, std = {}, {}
    for j, m in enumerate(panel.meta):
        col = panel.values[rows, j]
        col = col[~panel.mask[rows, j]]
        if col.size == 0:
            continue
        if col.size < 2 or np.ptp(col) == 0:
            raise PanelError(f"series {m.name!r} is constant in sample; cannot standardize")
        mean[m.name] = float(col.mean())
        std[m.name] = float(col.std(ddof=1))
    start = int(panel.timestamps[0]) if panel.T else end
    return StandardizationStats(mean, std, (start, end))


def standardize_apply(panel: Panel, stats: StandardizationStats, inverse: bool = False) -> Panel:
    """Apply (or undo, with ``inverse=True``) the affine standardization."""
    out = np.array(panel.values)
    for j, m in enumerate(panel.meta):
        if panel.mask[:, j].all():
            continue
        mu, sd = stats.lookup(m.name)
        out[:, j] = out[:, j] * sd + mu if inverse else (out[:, j] - mu) / sd
    return replace(panel, values=out)


# -- frequency handling ----------------------------------------------------

def collapse_to_low_frequency(high: Panel, r: int, method: str = "last") -> Panel:
    """Aggregate blocks of ``r`` consecutive high-frequency periods.

    Periods are calendar blocks ``timestamp // r``; incomplete blocks at
    either end are dropped. ``last`` takes the period-end value (masked if
    that cell is masked); ``mean`` averages the unmasked values.
    """
    if r < 1:
        raise ValueError("r must be a positive integer")
    if method not in ("last", "mean"):
        raise ValueError(f"unknown collapse method {method!r}")
    block = high.timestamps // r
    keep_blocks = []
    for b in np.unique(block):
        idx = np.flatnonzero(block == b)
        if idx.size == r and np.all(high.timestamps[idx] == b * r + np.arange(r)):
            keep_blocks.append((b, idx))
    N = high.N
    vals = np.full((len(keep_blocks), N), np.nan)
    for i, (b, idx) in enumerate(keep_blocks):
        chunk = high.values[idx]
        if method == "last":
            vals[i] = chunk[-1]
        else:
            obs = ~high.mask[idx]
            cnt = obs.sum(axis=0)
            tot = np.where(obs, chunk, 0.0).sum(axis=0)
            vals[i] = np.where(cnt > 0, tot / np.maximum(cnt, 1), np.nan)
    ts = np.array([b for b, _ in keep_blocks], dtype=np.int64)
    meta = tuple(replace(m, frequency=LOW) for m in high.meta)
    return Panel(vals, ts, meta, np.isnan(vals), LOW, high.period_months * r)


def align_common_clock(high: Panel, low: Panel, r: int, method: str = "last") -> tuple[Panel, Panel]:
    """Collapse ``high`` to the low-frequency clock and keep shared periods."""
    collapsed = collapse_to_low_frequency(high, r, method)
    common = np.intersect1d(collapsed.timestamps, low.timestamps)
    if common.size == 0:
        raise PanelError("panels share no common periods")
    hi = collapsed.rows(np.searchsorted(collapsed.timestamps, common))
    lo = low.rows(np.searchsorted(low.timestamps, common))
    return hi, lo


# -- variable manifest -----------------------------------------------------

def load_manifest() -> dict:
    """Shipped monthly/quarterly variable manifest for the empirical study."""
    path = Path(__file__).with_name("data") / "fred_manifest.json"
    return json.loads(path.read_text())


def manifest_schema(frequency: str, names: Iterable[str] | None = None, first_id: int = 0) -> dict:
    """Schema mapping for :func:`load_csv` built from the shipped manifest.

    ``frequency`` is ``"monthly"`` or ``"quarterly"``.
    """
    entries = load_manifest()[frequency]
    by_name = {e["mnemonic"]: e for e in entries}
    names = list(by_name) if names is None else list(names)
    missing = [n for n in names if n not in by_name]
    if missing:
        raise PanelError(f"mnemonics not in manifest: {missing}")
    freq = HIGH if frequency == "monthly" else LOW
    return {n: SeriesMeta(first_id + i, n, freq, by_name[n]["category"])
            for i, n in enumerate(names)}
