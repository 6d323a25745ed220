from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, DataError, FitError, GapError
from .synthetic import split_bounds
from .types import HOUR, Dataset, WorkloadSeries


def resample_hourly_max(series: WorkloadSeries, fill_forward=False) -> WorkloadSeries:
    """One point per clock hour holding the maximum of that hour's samples."""
    if HOUR % series.interval_seconds:
        raise ConfigError(f"interval {series.interval_seconds}s does not divide an hour")
    if len(series) == 0:
        return series.with_values(series.values)
    hours = series.timestamps // HOUR
    first, last = int(hours[0]), int(hours[-1])
    n = last - first + 1
    out = np.full(n, -np.inf)
    np.maximum.at(out, hours - first, series.values)
    empty = np.flatnonzero(np.isneginf(out))
    if empty.size:
        if not fill_forward:
            raise GapError(f"{series.series_id}: hour {empty[0]} after start has no samples")
        for i in empty:  # first hour always has a sample
            out[i] = out[i - 1]
    ts = (first + np.arange(n, dtype=np.int64)) * HOUR
    return WorkloadSeries(series.series_id, series.device_id, series.app_id, ts, out, HOUR)


@dataclass
class Normalizer:
    mean: float
    std: float
    eps: float = 1e-8

    @classmethod
    def fit(cls, values, eps=1e-8):
        values = np.asarray(values, dtype=np.float64)
        if values.size == 0:
            raise FitError("empty fit range")
        return cls(float(values.mean()), float(values.std()), eps)

    @property
    def scale(self):
        return self.std if self.std > 0 else self.eps

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def invert(self, z):
        return np.asarray(z, dtype=np.float64) * self.scale + self.mean

    def to_dict(self):
        return {"mean": self.mean, "std": self.std, "eps": self.eps}


def fit_apply_normalizer(series: WorkloadSeries, fit_range, direction="apply", reference=None):
    """Z-score ``series`` with statistics of ``fit_range`` (a slice of ``reference``).

    ``reference`` defaults to ``series``; pass the raw series when inverting
    normalized values. Returns the transformed series and the fitted normalizer.
    """
    src = series if reference is None else reference
    if isinstance(fit_range, tuple):
        fit_range = slice(*fit_range)
    norm = Normalizer.fit(src.values[fit_range])
    if direction == "apply":
        return series.with_values(norm.apply(series.values)), norm
    if direction == "invert":
        return series.with_values(norm.invert(series.values)), norm
    raise ConfigError(f"unknown direction {direction!r}")


def make_time_marks(timestamps):
    """``[hour/23 - 0.5, weekday/6 - 0.5]`` per timestamp, Monday = 0, UTC."""
    ts = np.asarray(timestamps, dtype=np.int64)
    hour = (ts // HOUR) % 24
    dow = (ts // 86400 + 3) % 7  # 1970-01-01 was a Thursday
    return np.stack([hour / 23.0 - 0.5, dow / 6.0 - 0.5], axis=-1)


@dataclass(frozen=True)
class Split:
    name: str
    dataset: Dataset
    start: int
    stop: int
    series_ids: tuple
    bounds: tuple  # (train_end, val_end, n) on the shared time grid

    def __len__(self):
        return self.stop - self.start


def _shared_grid(dataset):
    if not dataset.series:
        raise DataError("empty dataset")
    ts = dataset.series[0].timestamps
    for s in dataset.series[1:]:
        if s.timestamps.shape != ts.shape or np.any(s.timestamps != ts):
            raise DataError(f"series {s.series_id} does not cover the shared time range")
    return ts


def chronological_split(dataset: Dataset, ratios=(6, 2, 2), min_length=None):
    """Split every series at shared time boundaries into train/val/test.

    Held-out entities (series with a ``new_device``/``new_app`` event) only
    join the test split. With ``min_length`` set, a split shorter than that
    excludes its series with a warning.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ConfigError(f"bad split ratios {ratios}")
    n = _shared_grid(dataset).size
    train_end, val_end = split_bounds(n, ratios)
    bounds = (train_end, val_end, n)
    regular = tuple(s for s in dataset.series_ids if dataset.new_entity_kind(s) is None)
    out = []
    for name, a, b, ids in (("train", 0, train_end, regular), ("val", train_end, val_end, regular),
                            ("test", val_end, n, tuple(dataset.series_ids))):
        if min_length is not None and b - a < min_length and ids:
            warnings.warn(f"{name} split has {b - a} points < {min_length}; "
                          f"{len(ids)} series excluded", stacklevel=2)
            ids = ()
        out.append(Split(name, dataset, a, b, ids, bounds))
    return tuple(out)


def fit_normalizers(dataset: Dataset, bounds, T=48):
    """Per-series normalizers: training span for known entities, first T test points otherwise."""
    train_end, val_end, n = bounds
    norms = {}
    for s in dataset.series:
        if dataset.new_entity_kind(s.series_id) is None:
            norms[s.series_id] = Normalizer.fit(s.values[:train_end])
        else:
            norms[s.series_id] = Normalizer.fit(s.values[val_end:min(val_end + T, n)])
    return norms


def static_scaler(dataset: Dataset):
    """Column mean/std of the static vectors of known entities."""
    if not dataset.statics:
        return np.zeros(0), np.ones(0)
    known = [s for s in dataset.series_ids if dataset.new_entity_kind(s) is None] or dataset.series_ids
    mat = np.stack([dataset.statics[s].attributes for s in known])
    std = mat.std(axis=0)
    return mat.mean(axis=0), np.where(std > 0, std, 1.0)


@dataclass
class WindowSample:
    series_id: str
    encoder_input: np.ndarray  # T x d_t
    start_token: np.ndarray  # L_token
    decoder_marks: np.ndarray  # (L_token + L) x (d_t - 1)
    target: np.ndarray  # L
    static: np.ndarray  # d_s
    behavior_tag: str
    window_start: int


@dataclass
class WindowSet:
    """Column-oriented store of window samples; indexing yields ``WindowSample``."""

    series_ids: np.ndarray
    encoder_input: np.ndarray
    start_token: np.ndarray
    decoder_marks: np.ndarray
    target: np.ndarray
    static: np.ndarray
    tags: np.ndarray
    window_start: np.ndarray
    interval_seconds: int = HOUR
    T: int = 48
    L: int = 24
    L_token: int = 12

    def __len__(self):
        return self.target.shape[0]

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return WindowSample(str(self.series_ids[i]), self.encoder_input[i], self.start_token[i],
                                self.decoder_marks[i], self.target[i], self.static[i],
                                str(self.tags[i]), int(self.window_start[i]))
        return self.subset(i)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def subset(self, idx):
        return WindowSet(self.series_ids[idx], self.encoder_input[idx], self.start_token[idx],
                         self.decoder_marks[idx], self.target[idx], self.static[idx],
                         self.tags[idx], self.window_start[idx], self.interval_seconds,
                         self.T, self.L, self.L_token)

    def target_timestamps(self):
        offs = (self.T + np.arange(self.L)) * self.interval_seconds
        return self.window_start[:, None] + offs[None, :]

    @classmethod
    def concat(cls, sets):
        sets = list(sets)
        first = sets[0]
        cat = lambda name: np.concatenate([getattr(s, name) for s in sets])  # noqa: E731
        return cls(cat("series_ids"), cat("encoder_input"), cat("start_token"), cat("decoder_marks"),
                   cat("target"), cat("static"), cat("tags"), cat("window_start"),
                   first.interval_seconds, first.T, first.L, first.L_token)


def _tag_windows(dataset, series_id, starts, span):
    tags = np.full(starts.shape, "steady", dtype=object)
    entity = dataset.new_entity_kind(series_id)
    if entity is not None:
        tags[:] = entity
    for ev in dataset.events_for(series_id, "app_switch"):
        hit = (starts <= ev.timestamp) & (ev.timestamp < starts + span)
        tags[hit] = "app_switch"
    return tags


def make_windows(split: Split, T=48, L=24, L_token=12, normalizers=None, stride=1,
                 dtype=np.float32) -> WindowSet:
    """Stride-``stride`` sliding windows wholly inside ``split``.

    The start token is the last ``L_token`` normalized encoder values.
    """
    if L_token > T:
        raise ConfigError(f"L_token={L_token} exceeds T={T}")
    if T < 1 or L < 1 or L_token < 0 or stride < 1:
        raise ConfigError("T, L and stride must be positive")
    ds = split.dataset
    if normalizers is None:
        normalizers = fit_normalizers(ds, split.bounds, T)
    s_mean, s_std = static_scaler(ds)
    d_s = ds.d_s
    width = T + L
    parts = []
    for sid in split.series_ids:
        s = ds[sid]
        seg = s.values[split.start:split.stop]
        ts = s.timestamps[split.start:split.stop]
        count = len(seg) - width + 1
        if count <= 0:
            warnings.warn(f"{sid}: {len(seg)} points in {split.name} split yield no "
                          f"window of length {width}", stacklevel=2)
            continue
        offsets = np.arange(0, count, stride)
        z = normalizers[sid].apply(seg)
        marks = make_time_marks(ts)
        idx = offsets[:, None] + np.arange(width)[None, :]
        zw = z[idx]
        mw = marks[idx]
        enc = np.concatenate([zw[:, :T, None], mw[:, :T]], axis=-1)
        dec_marks = mw[:, T - L_token:]
        static = ((ds.statics[sid].attributes - s_mean) / s_std) if d_s else np.zeros(0)
        starts = ts[offsets]
        span = width * s.interval_seconds
        parts.append(dict(
            series_ids=np.full(offsets.size, sid, dtype=object),
            encoder_input=enc.astype(dtype),
            start_token=zw[:, T - L_token:T].astype(dtype),
            decoder_marks=dec_marks.astype(dtype),
            target=zw[:, T:].astype(dtype),
            static=np.repeat(static[None, :], offsets.size, axis=0).astype(dtype),
            tags=_tag_windows(ds, sid, starts, span),
            window_start=starts.astype(np.int64),
        ))
    if not parts:
        empty = np.zeros((0,))
        return WindowSet(empty.astype(object), np.zeros((0, T, 3), dtype), np.zeros((0, L_token), dtype),
                         np.zeros((0, L_token + L, 2), dtype), np.zeros((0, L), dtype),
                         np.zeros((0, d_s), dtype), empty.astype(object), empty.astype(np.int64),
                         HOUR, T, L, L_token)
    cat = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    interval = ds[split.series_ids[0]].interval_seconds
    return WindowSet(**cat, interval_seconds=interval, T=T, L=L, L_token=L_token)


@dataclass
class Prepared:
    """Everything downstream stages need from one dataset."""

    dataset: Dataset
    splits: tuple
    normalizers: dict
    train: WindowSet
    val: WindowSet
    test: WindowSet
    T: int
    L: int
    L_token: int


def prepare_windows(dataset: Dataset, T=48, L=24, L_token=12, ratios=(6, 2, 2),
                    dtype=np.float32) -> Prepared:
    splits = chronological_split(dataset, ratios, min_length=T + L)
    norms = fit_normalizers(dataset, splits[0].bounds, T)
    sets = [make_windows(sp, T, L, L_token, norms, dtype=dtype) for sp in splits]
    return Prepared(dataset, splits, norms, *sets, T, L, L_token)
