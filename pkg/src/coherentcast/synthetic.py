"""Hermetic synthetic inputs: charging sessions, weather, holidays, and a
conditionally Gaussian series with a known quantile function."""

import os
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import ndtri

from .data import SessionRecord, calendar_features, write_sessions


@dataclass(frozen=True)
class SyntheticSpec:
    start: str = "2024-03-04"
    days: int = 60
    stations: tuple = ("s1", "s2", "s3")
    # mean session arrivals per hour at the daily peak, per station
    peak_rate: tuple = (2.0, 1.2, 0.8)
    # mean energy per session (kWh); the last station is much noisier
    energy_scale: tuple = (6.0, 8.0, 5.0)
    energy_shape: tuple = (4.0, 4.0, 0.6)
    seed: int = 7


def _daily_profile(hour):
    # morning commuter peak plus a smaller afternoon bump
    return 0.05 + np.exp(-0.5 * ((hour - 8.5) / 1.5) ** 2) + 0.5 * np.exp(-0.5 * ((hour - 14) / 2.5) ** 2)


def generate_sessions(spec=SyntheticSpec()):
    rng = np.random.default_rng(spec.seed)
    hours = pd.date_range(spec.start, periods=24 * spec.days, freq="h")
    hod = hours.hour.to_numpy()
    weekday = hours.dayofweek.to_numpy() < 5
    profile = _daily_profile(hod) * np.where(weekday, 1.0, 0.35)
    records = []
    for s, name in enumerate(spec.stations):
        counts = rng.poisson(spec.peak_rate[s] * profile)
        for t in np.flatnonzero(counts):
            for _ in range(counts[t]):
                start = hours[t] + pd.Timedelta(minutes=int(rng.integers(0, 60)))
                minutes = int(30 + rng.gamma(2.0, 90.0))
                energy = rng.gamma(spec.energy_shape[s], spec.energy_scale[s] / spec.energy_shape[s])
                records.append(SessionRecord(name, start, start + pd.Timedelta(minutes=minutes), float(energy)))
    # keep every session inside the covered range
    end = hours[-1] + pd.Timedelta(hours=1)
    return [r for r in records if r.disconnect_time <= end], hours


def generate_weather(hours, seed=11, blank_fraction=0.05):
    rng = np.random.default_rng(seed)
    n = len(hours)
    hod = hours.hour.to_numpy()
    day = np.arange(n) / 24.0
    temp = 12 + 0.1 * day + 6 * np.sin(2 * np.pi * (hod - 9) / 24) + rng.normal(0, 1.0, n)
    dew = temp - 4 - np.abs(rng.normal(0, 1.5, n))
    precip = np.where(rng.random(n) < 0.08, rng.gamma(1.0, 1.5, n), 0.0)
    df = pd.DataFrame({"timestamp": hours, "temp_c": temp, "dewpoint_c": dew, "precip_mm": precip})
    for col in ("temp_c", "dewpoint_c", "precip_mm"):
        df.loc[rng.random(n) < blank_fraction, col] = np.nan
    return df


def default_holidays(hours):
    days = sorted(set(hours.date))
    return [days[k] for k in (10, 31) if k < len(days)]


def write_synthetic_inputs(out_dir, spec=SyntheticSpec()):
    """Write sessions, weather and holiday files; returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    records, hours = generate_sessions(spec)
    paths = {
        "sessions": os.path.join(out_dir, "sessions.csv"),
        "weather": os.path.join(out_dir, "weather.csv"),
        "holidays": os.path.join(out_dir, "holidays.txt"),
    }
    write_sessions(records, paths["sessions"])
    generate_weather(hours).to_csv(paths["weather"], index=False, date_format="%Y-%m-%dT%H:%M",
                                   float_format="%.6f", na_rep="")
    with open(paths["holidays"], "w") as fh:
        for d in default_holidays(hours):
            fh.write(d.isoformat() + "\n")
    return paths


# ---------------------------------------------------------------------------
# conditionally Gaussian target


def gaussian_mean(hod):
    return 1.0 + 0.8 * np.sin(2 * np.pi * hod / 24.0)


def gaussian_std(hod):
    return 0.15 + 0.1 * (1.0 + np.cos(2 * np.pi * hod / 24.0))


@dataclass
class GaussianSeries:
    timestamps: pd.DatetimeIndex
    values: np.ndarray
    covariates: np.ndarray  # calendar features

    def mean(self, idx):
        return gaussian_mean(self.timestamps[idx].hour.to_numpy())

    def std(self, idx):
        return gaussian_std(self.timestamps[idx].hour.to_numpy())

    def oracle_quantile(self, idx, alpha):
        return self.mean(idx) + self.std(idx) * ndtri(alpha)


def generate_gaussian_series(hours=24 * 90, seed=3, start="2024-01-01"):
    """Independent draws ``y_t ~ N(mean(hour_t), std(hour_t)^2)``."""
    rng = np.random.default_rng(seed)
    ts = pd.date_range(start, periods=hours, freq="h")
    hod = ts.hour.to_numpy()
    y = gaussian_mean(hod) + gaussian_std(hod) * rng.standard_normal(hours)
    return GaussianSeries(ts, y, calendar_features(ts))
