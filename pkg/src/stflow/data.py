"""Flow-grid datasets: portable on-disk format, min-max normalization,
closeness-window sample construction, chronological train/test splitting, and
a seeded synthetic generator for desk-scale experiments.

On-disk format of a dataset directory:
  meta.json      {"grid": [N, M], "period_minutes": int,
                  "start_timestamp": ISO-8601, "T": int}
  flows.f32le    raw little-endian float32, row-major (t, channel, row, col),
                 channel 0 = inflow, channel 1 = outflow
  external.csv   header: timestamp,temperature,wind_speed,condition,holiday
                 one row per frame, condition in {sun,rain,snow}
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from datetime import datetime, timedelta

import numpy as np

from .tensor import Rng

EXTERNAL_SCHEMA = (
    ("day_of_week", 7),
    ("weekend", 1),
    ("holiday", 1),
    ("temperature", 1),
    ("wind_speed", 1),
    ("condition", 3),
)
CONDITIONS = ("sun", "rain", "snow")


def external_width() -> int:
    return sum(w for _, w in EXTERNAL_SCHEMA)


class DataFormatError(ValueError):
    """Dataset files or values violate the documented format."""


@dataclass
class FlowDataset:
    """T x 2 x N x M inflow/outflow counts on a fixed-period clock."""

    flows: np.ndarray            # (T, 2, N, M) float32, finite, >= 0
    start: datetime
    period_minutes: int

    def __post_init__(self):
        f = self.flows
        if f.ndim != 4 or f.shape[1] != 2:
            raise DataFormatError(f"flows must be (T,2,N,M), got {f.shape}")
        if not np.isfinite(f).all():
            raise DataFormatError("flows contain NaN or infinite values")
        if (f < 0).any():
            raise DataFormatError("flows contain negative values")
        if self.period_minutes <= 0:
            raise DataFormatError("period must be positive")

    @property
    def T(self) -> int:
        return self.flows.shape[0]

    @property
    def grid(self) -> tuple:
        return self.flows.shape[2], self.flows.shape[3]

    def timestamp(self, t: int) -> datetime:
        return self.start + timedelta(minutes=self.period_minutes * int(t))

    def timestamps(self) -> list:
        return [self.timestamp(t) for t in range(self.T)]

    def frames_nhwc(self) -> np.ndarray:
        """(T, N, M, 2) channels-last view used by the model."""
        return np.ascontiguousarray(self.flows.transpose(0, 2, 3, 1))

    def index_of(self, when: datetime) -> int:
        delta = (when - self.start).total_seconds() / 60.0
        idx = delta / self.period_minutes
        if idx != int(idx):
            raise DataFormatError(f"{when.isoformat()} is not on the dataset "
                                  f"clock (period {self.period_minutes} min)")
        return int(idx)


@dataclass
class ExternalTable:
    """Per-frame weather and holiday covariates, aligned with the flows."""

    temperature: np.ndarray      # (T,)
    wind_speed: np.ndarray       # (T,)
    condition: list              # (T,) strings from CONDITIONS
    holiday: np.ndarray          # (T,) 0/1

    def __post_init__(self):
        n = len(self.temperature)
        if not (len(self.wind_speed) == len(self.condition)
                == len(self.holiday) == n):
            raise DataFormatError("external table columns have unequal length")
        bad = set(self.condition) - set(CONDITIONS)
        if bad:
            raise DataFormatError(f"unknown condition labels: {sorted(bad)}")


@dataclass
class Normalizer:
    """Min-max map onto [-1, 1], fitted on the training portion only."""

    data_min: float
    data_max: float

    def __post_init__(self):
        if not self.data_max > self.data_min:
            raise DataFormatError(
                f"degenerate normalizer: max {self.data_max} "
                f"<= min {self.data_min}")

    @classmethod
    def fit(cls, x: np.ndarray) -> "Normalizer":
        return cls(float(x.min()), float(x.max()))

    def normalize(self, x):
        span = self.data_max - self.data_min
        return (2.0 * (np.asarray(x, dtype=np.float32) - self.data_min) / span
                - 1.0).astype(np.float32)

    def denormalize(self, y):
        span = self.data_max - self.data_min
        return ((np.asarray(y, dtype=np.float64) + 1.0) * 0.5 * span
                + self.data_min)


# ---------------------------------------------------------------------------
# save / load

def save_dataset(out_dir, ds: FlowDataset, ext: ExternalTable) -> None:
    os.makedirs(out_dir, exist_ok=True)
    n, m = ds.grid
    meta = {"grid": [n, m], "period_minutes": ds.period_minutes,
            "start_timestamp": ds.start.isoformat(), "T": ds.T}
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True, separators=(",", ":"))
    ds.flows.astype("<f4").tofile(os.path.join(out_dir, "flows.f32le"))
    with open(os.path.join(out_dir, "external.csv"), "w") as fh:
        fh.write("timestamp,temperature,wind_speed,condition,holiday\n")
        for t in range(ds.T):
            fh.write(f"{ds.timestamp(t).isoformat()},"
                     f"{ext.temperature[t]:.6f},{ext.wind_speed[t]:.6f},"
                     f"{ext.condition[t]},{int(ext.holiday[t])}\n")


def load_dataset(dir_path):
    """Read a dataset directory; validates sizes, clock and values."""
    meta_path = os.path.join(dir_path, "meta.json")
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise DataFormatError(f"{dir_path}: missing meta.json") from None
    for key in ("grid", "period_minutes", "start_timestamp", "T"):
        if key not in meta:
            raise DataFormatError(f"meta.json missing key {key!r}")
    n, m = meta["grid"]
    t_count = int(meta["T"])
    period = int(meta["period_minutes"])
    start = datetime.fromisoformat(meta["start_timestamp"])
    raw = np.fromfile(os.path.join(dir_path, "flows.f32le"), dtype="<f4")
    expected = t_count * 2 * n * m
    if raw.size != expected:
        raise DataFormatError(
            f"flows.f32le holds {raw.size} values ({raw.size * 4} bytes), "
            f"meta implies {expected} ({expected * 4} bytes)")
    flows = raw.reshape(t_count, 2, n, m).astype(np.float32)
    ds = FlowDataset(flows, start, period)

    temps, winds, conds, hols = [], [], [], []
    with open(os.path.join(dir_path, "external.csv")) as fh:
        header = fh.readline().strip()
        if header != "timestamp,temperature,wind_speed,condition,holiday":
            raise DataFormatError(f"external.csv: unexpected header {header!r}")
        prev = None
        for line in fh:
            ts_s, temp, wind, cond, hol = line.strip().split(",")
            ts = datetime.fromisoformat(ts_s)
            if prev is not None and ts <= prev:
                raise DataFormatError("external.csv timestamps not strictly "
                                      "increasing")
            if prev is not None and (ts - prev) != timedelta(minutes=period):
                raise DataFormatError("external.csv timestamps not on a "
                                      f"constant {period}-minute step")
            prev = ts
            temps.append(float(temp))
            winds.append(float(wind))
            conds.append(cond)
            hols.append(int(hol))
    if len(temps) != t_count:
        raise DataFormatError(f"external.csv has {len(temps)} rows, meta "
                              f"implies {t_count}")
    ext = ExternalTable(np.array(temps), np.array(winds), conds,
                        np.array(hols, dtype=np.int64))
    return ds, ext


# ---------------------------------------------------------------------------
# samples

@dataclass
class WeatherStats:
    """Train-split min/max for the continuous external features."""

    temp_min: float
    temp_max: float
    wind_min: float
    wind_max: float

    @staticmethod
    def _scale(v, lo, hi):
        if hi <= lo:
            return 0.0
        return float((v - lo) / (hi - lo))

    def temp(self, v):
        return self._scale(v, self.temp_min, self.temp_max)

    def wind(self, v):
        return self._scale(v, self.wind_min, self.wind_max)


def external_vector(timestamp: datetime, temperature, wind_speed,
                    condition: str, holiday, stats: WeatherStats) -> np.ndarray:
    """Fixed-order covariate encoding (width 14): day-of-week one-hot
    (Monday=0), weekend flag (Sat/Sun), holiday flag, min-max temperature and
    wind, condition one-hot."""
    if condition not in CONDITIONS:
        raise DataFormatError(f"unknown condition label {condition!r}")
    v = np.zeros(external_width(), dtype=np.float32)
    wd = timestamp.weekday()
    v[wd] = 1.0
    v[7] = 1.0 if wd >= 5 else 0.0
    v[8] = 1.0 if holiday else 0.0
    v[9] = stats.temp(temperature)
    v[10] = stats.wind(wind_speed)
    v[11 + CONDITIONS.index(condition)] = 1.0
    return v


@dataclass
class Sample:
    """One training example: p normalized frames, covariates at the target
    instant, and the normalized target frame."""

    closeness: np.ndarray        # (p, N, M, 2) normalized
    external: np.ndarray         # (external_width,)
    target: np.ndarray           # (N, M, 2) normalized
    t_index: int
    timestamp: datetime


@dataclass
class PreparedData:
    train: list
    test: list
    normalizer: Normalizer
    weather: WeatherStats
    boundary_index: int


def resolve_boundary(ds: FlowDataset, split) -> int:
    """Split spec -> first test frame index. Accepts a fraction in (0,1) or
    an ISO timestamp / datetime."""
    if isinstance(split, (int, np.integer)):
        idx = int(split)
    elif isinstance(split, float):
        if not 0.0 < split < 1.0:
            raise DataFormatError(f"fractional split must be in (0,1), "
                                  f"got {split}")
        idx = int(ds.T * split)
    else:
        when = (datetime.fromisoformat(split) if isinstance(split, str)
                else split)
        idx = ds.index_of(when)
    if not 0 < idx < ds.T:
        raise DataFormatError(f"split boundary index {idx} outside (0, {ds.T})")
    return idx


def make_samples(ds: FlowDataset, ext: ExternalTable, p: int,
                 split) -> PreparedData:
    """Build chronological closeness samples and split them at a boundary.

    The normalizer and weather statistics are fitted on frames strictly
    before the boundary; test information never reaches them. Sample t' uses
    frames [t'-p, t') as input and frame t' as target.
    """
    if ds.T <= p:
        raise DataFormatError(f"dataset too short: T={ds.T} <= p={p}")
    boundary = resolve_boundary(ds, split)
    nrm = Normalizer.fit(ds.flows[:boundary])
    weather = WeatherStats(
        float(ext.temperature[:boundary].min()),
        float(ext.temperature[:boundary].max()),
        float(ext.wind_speed[:boundary].min()),
        float(ext.wind_speed[:boundary].max()),
    )
    frames = ds.frames_nhwc()
    normalized = nrm.normalize(frames)
    train, test = [], []
    for t in range(p, ds.T):
        ts = ds.timestamp(t)
        sample = Sample(
            closeness=normalized[t - p:t].copy(),
            external=external_vector(ts, ext.temperature[t],
                                     ext.wind_speed[t], ext.condition[t],
                                     ext.holiday[t], weather),
            target=normalized[t].copy(),
            t_index=t,
            timestamp=ts,
        )
        (train if t < boundary else test).append(sample)
    if not train or not test:
        raise DataFormatError(
            f"empty split: {len(train)} train / {len(test)} test samples "
            f"(boundary index {boundary}, p={p})")
    return PreparedData(train, test, nrm, weather, boundary)


def stack_batch(samples) -> tuple:
    """List of samples -> (closeness, external, target) batch arrays."""
    x = np.stack([s.closeness for s in samples])
    e = np.stack([s.external for s in samples])
    y = np.stack([s.target for s in samples])
    return x, e, y


# ---------------------------------------------------------------------------
# synthetic generator

@dataclass
class SynthSpec:
    """Knobs of the synthetic city: grid size, length, clock, pattern
    amplitudes and the noise scale. noise=0 makes the flows exactly
    weekly-periodic."""

    grid: tuple = (16, 8)
    days: int = 30
    period_minutes: int = 60
    noise: float = 0.0
    hotspots: int = 3
    amplitude: float = 100.0
    base: float = 10.0
    start: str = "2024-01-01T00:00"    # a Monday

    def __post_init__(self):
        if self.days < 1 or self.period_minutes < 1 or self.hotspots < 1:
            raise DataFormatError("days, period and hotspots must be >= 1")
        if 1440 % self.period_minutes:
            raise DataFormatError("period must divide a day "
                                  f"(got {self.period_minutes} minutes)")


def synth_generate(spec: SynthSpec, seed: int, out_dir=None):
    """Deterministic synthetic dataset: weekly-periodic sinusoidal profiles
    per region over Gaussian hot-spots, plus (scaled by spec.noise) a
    slow AR(1) city-wide amplitude modulation and proportional pixel noise.

    The modulation is persistent over hours, so recent frames carry real
    predictive signal beyond the weekly mean; with noise=0 the construction
    collapses to an exactly periodic signal.
    """
    rng = Rng(seed)
    n, m = spec.grid
    steps_per_day = 1440 // spec.period_minutes
    t_count = spec.days * steps_per_day
    minutes = np.arange(t_count, dtype=np.float64) * spec.period_minutes
    hour_of_day = (minutes % 1440.0) / 60.0
    hour_of_week = (minutes % (1440.0 * 7)) / 60.0

    # spatial hot-spots, one map per channel (outflow centers shifted)
    spot_rng = rng.child(0)
    ii, jj = np.meshgrid(np.arange(n), np.arange(m), indexing="ij")
    maps = np.zeros((2, n, m))
    for _ in range(spec.hotspots):
        ci = spot_rng.integers(0, n)
        cj = spot_rng.integers(0, m)
        sig = 1.0 + 0.25 * float(spot_rng.uniform(0, 1, ()))
        weight = 0.4 + 0.6 * float(spot_rng.uniform(0, 1, ()))
        maps[0] += weight * np.exp(-(((ii - ci) ** 2 + (jj - cj) ** 2)
                                     / (2 * sig ** 2)))
        maps[1] += weight * np.exp(-(((ii - (ci + 1) % n) ** 2
                                      + (jj - (cj + 1) % m) ** 2)
                                     / (2 * sig ** 2)))
    maps = 0.15 + maps / maps.max()

    # daily + weekly sinusoids, phase-shifted between channels
    prof = np.empty((2, t_count))
    for ch, (phase1, phase2) in enumerate(((8.0, 18.0), (9.0, 17.0))):
        daily = (1.0
                 + 0.55 * np.sin(2 * np.pi * (hour_of_day - phase1) / 24.0)
                 + 0.25 * np.sin(4 * np.pi * (hour_of_day - phase2) / 24.0))
        weekly = 1.0 + 0.30 * np.sin(2 * np.pi * hour_of_week / 168.0)
        prof[ch] = np.clip(daily * weekly, 0.05, None)

    pattern = (spec.base
               + spec.amplitude * maps[:, None] * prof[:, :, None, None])
    pattern = pattern.transpose(1, 0, 2, 3)          # (T, 2, N, M)

    flows = pattern.copy()
    if spec.noise > 0:
        mod_rng = rng.child(1)
        rho = 0.93 ** (spec.period_minutes / 60.0)
        innov = mod_rng.normal(1.0, (t_count,), np.float64)
        mod = np.empty(t_count)
        level = 0.0
        sigma_mod = 2.0 * spec.noise
        for t in range(t_count):
            level = rho * level + np.sqrt(1 - rho ** 2) * sigma_mod * innov[t]
            mod[t] = level
        pix = rng.child(2).normal(1.0, flows.shape, np.float64)
        flows = pattern * (1.0 + mod[:, None, None, None]) \
            + spec.noise * pattern * pix
    flows = np.clip(flows, 0.0, None).astype(np.float32)

    start = datetime.fromisoformat(spec.start)
    ds = FlowDataset(flows, start, spec.period_minutes)

    wrng = rng.child(3)
    temp = (12.0 + 8.0 * np.sin(2 * np.pi * (hour_of_day - 14.0) / 24.0)
            + wrng.normal(1.5, (t_count,), np.float64))
    wind = np.abs(2.0 + wrng.normal(1.2, (t_count,), np.float64))
    cond_idx = np.zeros(t_count, dtype=np.int64)
    crng = rng.child(4)
    state = 0
    for t in range(t_count):
        if float(crng.uniform(0, 1, ())) > 0.92:
            state = int(crng.integers(0, len(CONDITIONS)))
        cond_idx[t] = state
    day_index = (minutes // 1440.0).astype(np.int64)
    holiday = ((day_index % 30) == 10).astype(np.int64)
    ext = ExternalTable(temp, wind, [CONDITIONS[i] for i in cond_idx], holiday)

    if out_dir is not None:
        save_dataset(out_dir, ds, ext)
    return ds, ext
