"""Dataset ingestion, chronological splits, windowing, subsetting and masks.

Datasets are immutable after load.  CSV files must be UTF-8 with one header
row, an optional leading timestamp column (ISO-8601 or integer index, used
only for an ordering check) and finite decimal value columns; missing cells
are rejected rather than imputed.  A JSON manifest maps dataset names to
file paths plus frequency/split/label metadata.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path

import numpy as np

from .errors import FormatError, InsufficientData, InvalidInput
from .rng import RandomStream

FREQUENCIES = (
    "yearly",
    "quarterly",
    "monthly",
    "weekly",
    "daily",
    "hourly",
    "minutely",
    "unknown",
)

# Seasonal-naive lags per frequency, M-competition convention.
SEASONAL_PERIOD_BY_FREQ = {
    "yearly": 1,
    "quarterly": 4,
    "monthly": 12,
    "weekly": 1,
    "daily": 7,
    "hourly": 24,
    "minutely": 1,
    "unknown": 1,
}

_TIMESTAMP_HEADERS = {"date", "time", "timestamp", "datetime"}


@dataclass(frozen=True)
class SplitSpec:
    """Chronological train/val/test fractions; must sum to 1."""

    train: float = 0.7
    val: float = 0.1
    test: float = 0.2

    def __post_init__(self):
        total = self.train + self.val + self.test
        if abs(total - 1.0) > 1e-9:
            raise InvalidInput(f"split fractions sum to {total}, expected 1")
        if min(self.train, self.val, self.test) < 0:
            raise InvalidInput("split fractions must be nonnegative")


@dataclass(frozen=True)
class SplitBounds:
    """Resolved half-open index ranges for the three contiguous segments."""

    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]

    def segment(self, name: str) -> tuple[int, int]:
        return getattr(self, name)


@dataclass(frozen=True)
class WindowSpec:
    lookback: int
    horizon: int
    stride: int = 1

    def __post_init__(self):
        if self.lookback < 1:
            raise InvalidInput("lookback must be >= 1")
        if self.horizon < 0:
            raise InvalidInput("horizon must be >= 0")
        if self.stride < 1:
            raise InvalidInput("stride must be >= 1")


@dataclass(frozen=True)
class ImputationMask:
    """Binary mask over a window: 1 = observed, 0 = masked."""

    mask: np.ndarray
    ratio: float


@dataclass(frozen=True)
class TimeSeriesDataset:
    """A multivariate series with frequency, split and label metadata.

    ``labels`` is either one integer per channel (label_kind="series",
    classification corpora store one sample series per channel) or one
    binary value per timestep (label_kind="timestep", anomaly ground truth).
    """

    name: str
    values: np.ndarray  # (T, C) float64
    frequency: str = "unknown"
    seasonal_period: int | None = None
    labels: np.ndarray | None = None
    label_kind: str | None = None  # "series" | "timestep" | None
    split: SplitSpec = field(default_factory=SplitSpec)
    bounds: SplitBounds | None = None  # explicit override (few-shot subsetting)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise InvalidInput(f"values must be (T, C) with T,C >= 1, got {v.shape}")
        object.__setattr__(self, "values", v)
        if self.frequency not in FREQUENCIES:
            raise InvalidInput(f"unknown frequency {self.frequency!r}")
        if self.labels is not None:
            lab = np.asarray(self.labels)
            object.__setattr__(self, "labels", lab)
            if self.label_kind == "series" and lab.shape != (v.shape[1],):
                raise InvalidInput("series labels must have one entry per channel")
            if self.label_kind == "timestep" and lab.shape != (v.shape[0],):
                raise InvalidInput("timestep labels must have one entry per timestep")

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def effective_seasonal_period(self) -> int:
        if self.seasonal_period is not None:
            return self.seasonal_period
        return SEASONAL_PERIOD_BY_FREQ[self.frequency]

    def split_bounds(self) -> SplitBounds:
        if self.bounds is not None:
            return self.bounds
        t = self.n_steps
        n_train = int(math.floor(self.split.train * t))
        n_val = int(math.floor(self.split.val * t))
        return SplitBounds(
            train=(0, n_train),
            val=(n_train, n_train + n_val),
            test=(n_train + n_val, t),
        )


@dataclass(frozen=True)
class CsvSchema:
    """Column roles for load_csv.

    With timestamp_column=None the first column is auto-detected as a
    timestamp when its header is one of {date, time, timestamp, datetime}
    (case-insensitive) or its values parse as ISO-8601 but not as numbers.
    """

    timestamp_column: str | None = None
    value_columns: tuple[str, ...] | None = None
    label_column: str | None = None


def load_csv(path, schema: CsvSchema | None = None, name: str | None = None) -> TimeSeriesDataset:
    """Read a CSV into a dataset, validating order and cell finiteness."""
    schema = schema or CsvSchema()
    path = Path(path)
    if not path.exists():
        raise FormatError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        rows = list(reader)
    if not rows:
        raise FormatError(f"{path}: no data rows")
    header = [h.strip() for h in header]

    ts_col = _resolve_timestamp_column(header, rows, schema)
    candidates = [h for h in header if h != ts_col and h != schema.label_column]
    if schema.value_columns is not None:
        missing = [c for c in schema.value_columns if c not in header]
        if missing:
            raise FormatError(f"{path}: value columns not found: {missing}")
        value_cols = list(schema.value_columns)
    else:
        value_cols = candidates
    if not value_cols:
        raise FormatError(f"{path}: no value columns")

    col_index = {h: i for i, h in enumerate(header)}
    values = np.empty((len(rows), len(value_cols)), dtype=np.float64)
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise FormatError(f"{path}: row {r + 2} has {len(row)} cells, expected {len(header)}")
        for c, colname in enumerate(value_cols):
            cell = row[col_index[colname]].strip()
            values[r, c] = _parse_cell(cell, path, r + 2, colname)

    if ts_col is not None:
        _check_monotone_timestamps(
            [row[col_index[ts_col]].strip() for row in rows], path
        )

    labels = None
    label_kind = None
    if schema.label_column is not None:
        if schema.label_column not in col_index:
            raise FormatError(f"{path}: label column {schema.label_column!r} not found")
        raw = [row[col_index[schema.label_column]].strip() for row in rows]
        try:
            labels = np.array([int(float(x)) for x in raw], dtype=np.int64)
        except ValueError as exc:
            raise FormatError(f"{path}: unparseable label: {exc}") from None
        label_kind = "timestep"

    return TimeSeriesDataset(
        name=name or path.stem,
        values=values,
        labels=labels,
        label_kind=label_kind,
    )


def _parse_cell(cell: str, path, rownum: int, colname: str) -> float:
    if cell == "":
        raise FormatError(f"{path}: missing cell at row {rownum}, column {colname!r}")
    try:
        v = float(cell)
    except ValueError:
        raise FormatError(
            f"{path}: unparseable cell {cell!r} at row {rownum}, column {colname!r}"
        ) from None
    if not math.isfinite(v):
        raise FormatError(
            f"{path}: non-finite cell {cell!r} at row {rownum}, column {colname!r}"
        )
    return v


def _resolve_timestamp_column(header, rows, schema: CsvSchema):
    if schema.timestamp_column is not None:
        if schema.timestamp_column not in header:
            raise FormatError(f"timestamp column {schema.timestamp_column!r} not found")
        return schema.timestamp_column
    first = header[0]
    if first.lower() in _TIMESTAMP_HEADERS:
        return first
    sample = rows[0][0].strip()
    try:
        float(sample)
        return None  # numeric first column: treat as data
    except ValueError:
        pass
    try:
        datetime.fromisoformat(sample)
        return first
    except ValueError:
        return None


def _check_monotone_timestamps(raw: list[str], path) -> None:
    keys = []
    for i, cell in enumerate(raw):
        try:
            keys.append(float(cell))
            continue
        except ValueError:
            pass
        try:
            keys.append(datetime.fromisoformat(cell))
        except ValueError:
            raise FormatError(f"{path}: unparseable timestamp {cell!r} at row {i + 2}") from None
    for i in range(1, len(keys)):
        if not keys[i] > keys[i - 1]:
            raise FormatError(f"{path}: timestamps not strictly increasing at row {i + 2}")


def load_manifest(path) -> dict:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not valid JSON: {exc}") from None
    if not isinstance(manifest, dict):
        raise FormatError(f"manifest {path} must map names to entries")
    return manifest


def load_from_manifest(manifest_path, name: str) -> TimeSeriesDataset:
    """Load one named dataset, applying the manifest's metadata."""
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    if name not in manifest:
        raise FormatError(f"dataset {name!r} not in manifest {manifest_path}")
    entry = manifest[name]
    if "path" not in entry:
        raise FormatError(f"manifest entry {name!r} lacks a path")
    csv_path = Path(entry["path"])
    if not csv_path.is_absolute():
        csv_path = manifest_path.parent / csv_path
    schema = CsvSchema(
        timestamp_column=entry.get("timestamp_column"),
        label_column=entry.get("label_column"),
    )
    ds = load_csv(csv_path, schema, name=name)
    split = SplitSpec(*entry["split"]) if "split" in entry else SplitSpec()
    frequency = entry.get("frequency", "unknown")
    labels = ds.labels
    label_kind = ds.label_kind
    if "labels" in entry:  # per-channel labels (classification corpora)
        labels = np.asarray(entry["labels"], dtype=np.int64)
        label_kind = "series"
    return replace(
        ds,
        frequency=frequency,
        seasonal_period=entry.get("seasonal_period"),
        split=split,
        labels=labels,
        label_kind=label_kind,
    )


def channel_split(d: TimeSeriesDataset) -> list[TimeSeriesDataset]:
    """One univariate dataset per channel, metadata preserved."""
    out = []
    for c in range(d.n_channels):
        labels = d.labels
        if labels is not None and d.label_kind == "series":
            labels = labels[c : c + 1]
        out.append(
            replace(
                d,
                name=f"{d.name}[{c}]",
                values=d.values[:, c : c + 1],
                labels=labels,
            )
        )
    return out


def make_windows(
    d: TimeSeriesDataset, w: WindowSpec, split: str
) -> tuple[np.ndarray, np.ndarray]:
    """Sliding (input, target) windows for one split.

    Returns (inputs, targets) shaped (n_windows, L, C) and (n_windows, O, C).
    Targets tile the split's own region; validation/test inputs extend
    backward into earlier data by up to L steps, so no target ever leaks
    across a split boundary.  Window count over the effective segment of
    length S is floor((S - L - O) / stride) + 1.
    """
    if split not in ("train", "val", "test"):
        raise InvalidInput(f"unknown split {split!r}")
    bounds = d.split_bounds()
    lo, hi = bounds.segment(split)
    if split != "train":
        lo = max(0, lo - w.lookback)  # inputs may reach back into earlier data
    seg_len = hi - lo
    need = w.lookback + w.horizon
    if seg_len < need:
        raise InsufficientData(
            f"{split} segment has {seg_len} steps, need at least {need}"
        )
    n = (seg_len - need) // w.stride + 1
    starts = lo + np.arange(n) * w.stride
    in_idx = starts[:, None] + np.arange(w.lookback)[None, :]
    inputs = d.values[in_idx]  # (n, L, C)
    if w.horizon > 0:
        out_idx = starts[:, None] + w.lookback + np.arange(w.horizon)[None, :]
        targets = d.values[out_idx]
    else:
        targets = np.empty((n, 0, d.n_channels), dtype=np.float64)
    return inputs, targets


def few_shot_subset(
    d: TimeSeriesDataset, percent: float, position: str = "suffix"
) -> TimeSeriesDataset:
    """Restrict the training split to ceil(percent * train_len) timesteps.

    The kept portion is the training suffix by default (most recent data,
    adjacent to validation); validation and test are untouched.
    """
    if not 0.0 < percent <= 1.0:
        raise InvalidInput("percent must be in (0, 1]")
    if position not in ("suffix", "prefix"):
        raise InvalidInput("position must be 'suffix' or 'prefix'")
    bounds = d.split_bounds()
    t0, t1 = bounds.train
    train_len = t1 - t0
    keep = math.ceil(round(percent * train_len, 9))
    keep = min(max(keep, 1), train_len)
    if position == "suffix":
        new_train = (t1 - keep, t1)
    else:
        new_train = (t0, t0 + keep)
    return replace(d, bounds=SplitBounds(train=new_train, val=bounds.val, test=bounds.test))


def mask_with_count(shape: tuple[int, int], n_masked: int, rng: RandomStream) -> np.ndarray:
    """Binary (1=observed) mask with exactly n_masked zeros placed uniformly."""
    steps, channels = shape
    total = steps * channels
    if not 0 <= n_masked <= total:
        raise InvalidInput(f"cannot mask {n_masked} of {total} cells")
    flat = np.ones(total, dtype=np.float64)
    flat[rng.choice_no_replace(total, n_masked)] = 0.0
    return flat.reshape(steps, channels)


def random_mask(shape: tuple[int, int], ratio: float, rng: RandomStream) -> ImputationMask:
    """Mask round(ratio * cells) positions uniformly without replacement."""
    if not 0.0 < ratio < 1.0:
        raise InvalidInput("mask ratio must be in (0, 1)")
    steps, channels = int(shape[0]), int(shape[1])
    n_masked = int(math.floor(ratio * steps * channels + 0.5))  # round half up
    return ImputationMask(mask=mask_with_count((steps, channels), n_masked, rng), ratio=ratio)
