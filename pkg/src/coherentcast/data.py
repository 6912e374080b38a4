"""Session ingestion, hourly aggregation, covariates, windowing and splits.

Timestamps are timezone-naive local time. Hourly frames are indexed by the
start of each hour bin.
"""

import csv
import io
import urllib.request
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, EmptyDatasetError

WEATHER_COLUMNS = ("temp_c", "dewpoint_c", "precip_mm")
CALENDAR_COLUMNS = ("holiday", "weekday", "hod_sin", "hod_cos", "hoy_sin", "hoy_cos")
FEATURE_NAMES = WEATHER_COLUMNS + CALENDAR_COLUMNS
HOURS_PER_YEAR = 8760
SESSION_HEADER = ("station_id", "connect_time", "disconnect_time", "energy_kwh")


class InputError(ConfigurationError):
    """Malformed input file; message carries the path and line number."""


@dataclass(frozen=True)
class SessionRecord:
    station_id: str
    connect_time: pd.Timestamp
    disconnect_time: pd.Timestamp
    energy: float


def read_sessions(path):
    """Parse a sessions CSV. Errors name the offending line (header is line 1)."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != SESSION_HEADER:
            raise InputError(f"{path}:1: expected header {','.join(SESSION_HEADER)}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise InputError(f"{path}:{line}: expected 4 fields, got {len(row)}")
            try:
                start = pd.Timestamp(row[1].strip())
                end = pd.Timestamp(row[2].strip())
                energy = float(row[3])
            except (ValueError, TypeError) as exc:
                raise InputError(f"{path}:{line}: {exc}") from exc
            if start is pd.NaT or end is pd.NaT:
                raise InputError(f"{path}:{line}: missing timestamp")
            if not np.isfinite(energy) or energy < 0:
                raise InputError(f"{path}:{line}: energy must be a finite value >= 0")
            records.append(SessionRecord(row[0].strip(), start, end, energy))
    if not records:
        raise EmptyDatasetError(f"{path}: no sessions")
    return records


def write_sessions(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SESSION_HEADER)
        for r in records:
            w.writerow([r.station_id, r.connect_time.strftime("%Y-%m-%dT%H:%M"),
                        r.disconnect_time.strftime("%Y-%m-%dT%H:%M"), repr(float(r.energy))])


@dataclass
class TimeSeriesFrame:
    """Hourly demand per station; the total is always derived, never stored."""

    timestamps: pd.DatetimeIndex
    stations: tuple
    values: np.ndarray  # (T, n) kWh per hour

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.stations = tuple(self.stations)
        if self.values.shape != (len(self.timestamps), len(self.stations)):
            raise ConfigurationError("values shape does not match timestamps x stations")
        if len(self.timestamps) > 1:
            steps = np.diff(self.timestamps.values).astype("timedelta64[m]").astype(np.int64)
            if np.any(steps != 60):
                raise ConfigurationError("timestamps must be hourly and contiguous")

    @property
    def total(self):
        return self.values.sum(axis=1)

    @property
    def series_names(self):
        return ("total",) + self.stations

    def hierarchy_matrix(self):
        """``(T, n + 1)`` array ordered ``[total, stations...]``."""
        return np.column_stack([self.total, self.values])

    def to_csv(self, path):
        df = pd.DataFrame(self.values, index=self.timestamps, columns=list(self.stations))
        df["total"] = self.total
        df.index.name = "timestamp"
        df.to_csv(path, date_format="%Y-%m-%dT%H:%M", float_format="%.17g")

    @classmethod
    def read_csv(cls, path):
        df = pd.read_csv(path, parse_dates=["timestamp"], index_col="timestamp")
        stations = [c for c in df.columns if c != "total"]
        return cls(pd.DatetimeIndex(df.index), tuple(stations), df[stations].to_numpy())


def aggregate_sessions(records, start=None, end=None, stations=None):
    """Prorate each session's energy uniformly over its duration into hour bins.

    ``start``/``end`` bound the clock range (defaults: the records' span,
    floored/ceiled to the hour). ``stations`` fixes column order; unknown
    stations are appended with a warning.
    """
    if not records:
        raise EmptyDatasetError("no sessions")
    for k, r in enumerate(records):
        if r.disconnect_time <= r.connect_time:
            raise ConfigurationError(f"session {k}: disconnect time must be after connect time")
    lo = min(r.connect_time for r in records).floor("h")
    hi = max(r.disconnect_time for r in records).ceil("h")
    start = pd.Timestamp(start) if start is not None else lo
    end = pd.Timestamp(end) if end is not None else hi
    if lo < start or hi > end:
        raise ConfigurationError("sessions fall outside the clock range")
    names = list(stations or [])
    for r in records:
        if r.station_id not in names:
            if stations:
                warnings.warn(f"unknown station {r.station_id!r}; adding a column", stacklevel=2)
            names.append(r.station_id)
    col = {s: i for i, s in enumerate(names)}
    stamps = pd.date_range(start, end, freq="h", inclusive="left")
    values = np.zeros((len(stamps), len(names)))
    base = start.value // 60_000_000_000  # minutes since epoch
    for r in records:
        c = r.connect_time.value / 60e9 - base
        d = r.disconnect_time.value / 60e9 - base
        first, last = int(np.floor(c / 60.0)), int(np.ceil(d / 60.0))
        edges = np.arange(first, last + 1) * 60.0
        overlap = np.minimum(edges[1:], d) - np.maximum(edges[:-1], c)
        values[first:last, col[r.station_id]] += r.energy * overlap / (d - c)
    return TimeSeriesFrame(stamps, tuple(names), values)


# ---------------------------------------------------------------------------
# weather and calendar


def parse_weather_csv(text, source="weather"):
    df = pd.read_csv(io.StringIO(text) if isinstance(text, str) else text)
    missing = [c for c in ("timestamp",) + WEATHER_COLUMNS if c not in df.columns]
    if missing:
        raise InputError(f"{source}: missing columns {missing}")
    df["timestamp"] = pd.to_datetime(df["timestamp"])
    df = df.set_index("timestamp").sort_index()[list(WEATHER_COLUMNS)].astype(np.float64)
    if df.empty or df.notna().sum().min() == 0:
        raise ConfigurationError(f"{source}: weather table is empty")
    return df


@dataclass
class FileWeatherProvider:
    path: str

    def load(self):
        with open(self.path) as fh:
            return parse_weather_csv(fh.read(), self.path)


@dataclass
class HttpWeatherProvider:
    """Fetches the weather CSV schema with a GET request."""

    url: str
    timeout: float = 30.0

    def load(self):
        with urllib.request.urlopen(self.url, timeout=self.timeout) as resp:
            return parse_weather_csv(resp.read().decode("utf-8"), self.url)


def weather_provider(source):
    if str(source).startswith(("http://", "https://")):
        return HttpWeatherProvider(source)
    return FileWeatherProvider(source)


def read_holidays(path):
    out = set()
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            try:
                out.add(pd.Timestamp(s).date())
            except ValueError as exc:
                raise InputError(f"{path}:{line_no}: {exc}") from exc
    return out


def calendar_features(timestamps, holidays=()):
    """``(T, 6)`` holiday, weekday and hour-of-day / hour-of-year harmonics."""
    ts = pd.DatetimeIndex(timestamps)
    holidays = set(holidays)
    hol = np.array([d in holidays for d in ts.date], dtype=np.float64)
    weekday = (ts.dayofweek < 5).astype(np.float64)
    hod = 2.0 * np.pi * ts.hour.to_numpy() / 24.0
    hoy = 2.0 * np.pi * ((ts.dayofyear.to_numpy() - 1) * 24 + ts.hour.to_numpy()) / HOURS_PER_YEAR
    return np.column_stack([hol, weekday, np.sin(hod), np.cos(hod), np.sin(hoy), np.cos(hoy)])


def build_features(timestamps, weather, holidays=()):
    """``(T, 9)`` covariates in :data:`FEATURE_NAMES` order.

    Weather is aligned to ``timestamps``; interior gaps are filled by linear
    interpolation in time, leading and trailing gaps by the nearest value.
    """
    ts = pd.DatetimeIndex(timestamps)
    if weather is None or len(weather) == 0:
        raise ConfigurationError("weather table is empty")
    w = weather[list(WEATHER_COLUMNS)]
    w = w[~w.index.duplicated(keep="first")]
    union = w.reindex(w.index.union(ts))
    filled = union.interpolate(method="time", limit_area="inside").ffill().bfill()
    aligned = filled.reindex(ts).to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(aligned)):
        raise ConfigurationError("weather column has no observations")
    return np.column_stack([aligned, calendar_features(ts, holidays)])


# ---------------------------------------------------------------------------
# scaling, windows and splits


@dataclass
class MinMaxScaler:
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, data):
        data = np.asarray(data, dtype=np.float64)
        return cls(data.min(axis=0), data.max(axis=0))

    @property
    def span(self):
        s = np.asarray(self.hi - self.lo, dtype=np.float64)
        return np.where(s > 0, s, 1.0)

    def transform(self, x):
        return (np.asarray(x) - self.lo) / self.span

    def inverse(self, x):
        return np.asarray(x) * self.span + self.lo


@dataclass(frozen=True)
class FeatureWindow:
    context: np.ndarray  # (C, d)
    future: np.ndarray  # (tau, d_f)
    target: np.ndarray  # (tau, S)
    origin: pd.Timestamp


@dataclass
class WindowSet:
    """Stacked windows; ``origins`` are the first horizon timestamps."""

    context: np.ndarray  # (N, C, d)
    future: np.ndarray  # (N, tau, d_f)
    target: np.ndarray  # (N, tau, S)
    origins: pd.DatetimeIndex

    def __len__(self):
        return len(self.origins)

    def __getitem__(self, k):
        if isinstance(k, (int, np.integer)):
            return FeatureWindow(self.context[k], self.future[k], self.target[k], self.origins[k])
        return WindowSet(self.context[k], self.future[k], self.target[k], self.origins[k])

    def sorted(self):
        order = np.argsort(self.origins.values, kind="stable")
        return self[order]


def make_windows(values, covariates, timestamps, context=168, horizon=24, stride=1, future_columns=None):
    """Sliding windows over aligned ``values`` ``(L, S)`` and ``covariates`` ``(L, d)``.

    Context rows are ``[values, covariates]``; ``future`` holds the selected
    covariate columns over the horizon. Count is ``(L - context - horizon) //
    stride + 1``; the arrays are strided views, not copies.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    covariates = np.asarray(covariates, dtype=np.float64).reshape(len(values), -1)
    if context < 1 or horizon < 1 or stride < 1:
        raise ConfigurationError("context, horizon and stride must be >= 1")
    L = len(values)
    if L < context + horizon:
        raise EmptyDatasetError(f"series of length {L} is shorter than context + horizon = {context + horizon}")
    cols = list(range(covariates.shape[1])) if future_columns is None else list(future_columns)
    full = np.concatenate([values, covariates], axis=1)
    n = L - context - horizon + 1
    ctx = sliding_window_view(full, context, axis=0)[:n:stride].swapaxes(1, 2)
    fut = sliding_window_view(covariates[:, cols], horizon, axis=0)[context:context + n:stride].swapaxes(1, 2)
    tgt = sliding_window_view(values, horizon, axis=0)[context:context + n:stride].swapaxes(1, 2)
    origins = pd.DatetimeIndex(timestamps)[context:context + n:stride]
    return WindowSet(ctx, fut, tgt, origins)


@dataclass(frozen=True)
class SplitSpec:
    """Chronological boundaries on window origins (first horizon hour)."""

    train_end: pd.Timestamp
    val_end: pd.Timestamp
    reconciler_fraction: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "train_end", pd.Timestamp(self.train_end))
        object.__setattr__(self, "val_end", pd.Timestamp(self.val_end))
        if not self.train_end < self.val_end:
            raise ConfigurationError("split boundaries must be strictly increasing")
        if not 0.0 < self.reconciler_fraction < 1.0:
            raise ConfigurationError("reconciler fraction must lie in (0, 1)")


PARTITIONS = ("base_train", "base_val", "test", "dcl_train", "dcl_val")


@dataclass
class Splits:
    parts: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.parts[name]


def split_dataset(windows, spec):
    """Partition windows by origin; the reconciler splits base_val 80/20."""
    windows = windows.sorted()
    o = windows.origins
    idx = {
        "base_train": np.flatnonzero(o < spec.train_end),
        "base_val": np.flatnonzero((o >= spec.train_end) & (o < spec.val_end)),
        "test": np.flatnonzero(o >= spec.val_end),
    }
    val = idx["base_val"]
    cut = int(round(spec.reconciler_fraction * len(val)))
    idx["dcl_train"], idx["dcl_val"] = val[:cut], val[cut:]
    for name in PARTITIONS:
        if len(idx[name]) == 0:
            raise ConfigurationError(f"partition {name} is empty")
    return Splits({name: windows[idx[name]] for name in PARTITIONS}), idx
