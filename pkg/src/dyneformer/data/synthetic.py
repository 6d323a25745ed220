"""Synthetic multi-tenant edge workloads.

Each device runs one app at a time. An app is a daily archetype built from
Gaussian bumps on a 24 hour circle; a device multiplies it by a log-normal
scale and adds AR(1) noise and a piecewise-linear trend. Switches and new
entities are injected after the validation boundary so they only show up
in test windows.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from .types import HOUR, Dataset, Event, StaticContext, WorkloadSeries

# name -> (base level, [(center hour, width hours, height), ...])
ARCHETYPES = {
    "noon_peak": (0.2, [(12.0, 2.5, 0.8)]),
    "night_peak": (0.2, [(21.0, 2.0, 0.8)]),
    "double_peak": (0.15, [(9.0, 1.5, 0.6), (20.0, 1.5, 0.7)]),
    "plateau": (0.15, [(10.0, 2.0, 0.5), (13.0, 2.0, 0.5), (16.0, 2.0, 0.5), (19.0, 2.0, 0.3)]),
    "low_flat": (0.45, [(4.0, 3.0, 0.12)]),
    "morning_peak": (0.2, [(7.0, 1.5, 0.8)]),
    "late_night": (0.25, [(2.0, 2.0, 0.6), (15.0, 3.0, 0.2)]),
}
DEFAULT_SHAPES = ("noon_peak", "night_peak", "double_peak", "plateau", "low_flat")
HELDOUT_SHAPES = ("morning_peak", "late_night")

LOCATIONS = ("north", "south", "east", "west", "central")
ISPS = ("telecom", "unicom", "mobile")
STATIC_COLUMNS = ("max_bandwidth", "cpu_count", "memory_gb", "disk_tb", "location", "isp")
CATEGORICAL = {
    "location": {name: i / (len(LOCATIONS) - 1) for i, name in enumerate(LOCATIONS)},
    "isp": {name: i / (len(ISPS) - 1) for i, name in enumerate(ISPS)},
}

EPOCH_2022_08_01 = 1659312000  # a Monday, 00:00 UTC


def _circular_bump(hours, center, width):
    d = np.abs(hours - center) % 24.0
    d = np.minimum(d, 24.0 - d)
    return np.exp(-0.5 * (d / width) ** 2)


def archetype_curve(spec, hours):
    """Evaluate an archetype (name or ``(base, bumps)``) at fractional hours."""
    base, bumps = ARCHETYPES[spec] if isinstance(spec, str) else spec
    hours = np.asarray(hours, dtype=np.float64) % 24.0
    out = np.full(hours.shape, float(base))
    for center, width, height in bumps:
        out += height * _circular_bump(hours, center, width)
    return out


def random_archetype(rng):
    n = int(rng.integers(1, 4))
    bumps = [(float(rng.uniform(0, 24)), float(rng.uniform(1.0, 3.0)), float(rng.uniform(0.3, 0.8)))
             for _ in range(n)]
    return (float(rng.uniform(0.1, 0.3)), bumps)


@dataclass
class GeneratorConfig:
    apps: int = 5
    devices: int = 60
    days: int = 30
    interval_seconds: int = HOUR
    start_epoch: int = EPOCH_2022_08_01
    shapes: list | None = None
    noise: float = 0.08
    ar_coef: float = 0.6
    trend: float = 0.05
    trend_knot_days: int = 7
    scale_log_mean: float = 4.0
    scale_log_std: float = 0.5
    switch_fraction: float = 0.2
    switch_scale_std: float = 0.3
    new_device_fraction: float = 0.1
    new_app_fraction: float = 0.1
    heldout_apps: int = 1
    split_ratios: tuple = (6, 2, 2)
    seed: int = 0

    def __post_init__(self):
        for name in ("switch_fraction", "new_device_fraction", "new_app_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} not in [0, 1]")
        if self.apps < 1 or self.devices < 1 or self.days < 1:
            raise ConfigError("apps, devices and days must be positive")
        if self.interval_seconds <= 0 or HOUR % self.interval_seconds:
            raise ConfigError("interval_seconds must divide 3600")
        if self.noise < 0 or self.trend < 0 or self.scale_log_std < 0:
            raise ConfigError("noise, trend and scale_log_std must be non-negative")
        if not 0.0 <= self.ar_coef < 1.0:
            raise ConfigError("ar_coef must lie in [0, 1)")
        if self.trend_knot_days < 1:
            raise ConfigError("trend_knot_days must be positive")
        n_special = self.n_switch + self.n_new_device + self.n_new_app
        if n_special > self.devices:
            raise ConfigError(f"{n_special} special devices requested but only {self.devices} exist")
        if self.n_new_app and self.heldout_apps < 1:
            raise ConfigError("new_app devices need at least one held-out app")
        if self.shapes is not None and len(self.shapes) < self.apps:
            raise ConfigError("fewer shapes than apps")
        self.split_ratios = tuple(self.split_ratios)

    @property
    def n_switch(self):
        return int(round(self.switch_fraction * self.devices))

    @property
    def n_new_device(self):
        return int(round(self.new_device_fraction * self.devices))

    @property
    def n_new_app(self):
        return int(round(self.new_app_fraction * self.devices))

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d


def split_bounds(n, ratios=(6, 2, 2)):
    """Index boundaries ``(train_end, val_end)`` of a chronological split."""
    total = sum(ratios)
    return n * ratios[0] // total, n * (ratios[0] + ratios[1]) // total


def _app_shapes(config, rng):
    seen = list(config.shapes) if config.shapes is not None else list(DEFAULT_SHAPES)
    while len(seen) < config.apps:
        seen.append(random_archetype(rng))
    seen = seen[:config.apps]
    heldout = list(HELDOUT_SHAPES[:config.heldout_apps])
    while len(heldout) < config.heldout_apps:
        heldout.append(random_archetype(rng))
    return seen, heldout


def _trend(rng, n, steps_per_day, config):
    if config.trend == 0:
        return np.zeros(n)
    knot_step = config.trend_knot_days * steps_per_day
    knots_x = np.arange(0, n + knot_step, knot_step)
    knots_y = rng.normal(0.0, config.trend, size=knots_x.size)
    knots_y -= knots_y[0]
    return np.interp(np.arange(n), knots_x, knots_y)


def _ar_noise(rng, n, config):
    if config.noise == 0:
        return np.zeros(n)
    phi = config.ar_coef
    shocks = rng.normal(0.0, config.noise * np.sqrt(1.0 - phi ** 2), size=n)
    out = np.empty(n)
    prev = rng.normal(0.0, config.noise)
    for i in range(n):
        prev = phi * prev + shocks[i]
        out[i] = prev
    return out


def _statics(rng, scale):
    cpu = float(2 ** int(rng.integers(2, 6)))
    location = LOCATIONS[int(rng.integers(len(LOCATIONS)))]
    isp = ISPS[int(rng.integers(len(ISPS)))]
    raw = {
        "max_bandwidth": float(scale * rng.uniform(1.5, 3.0)),
        "cpu_count": cpu,
        "memory_gb": cpu * float(rng.choice([2.0, 4.0])),
        "disk_tb": float(np.round(rng.uniform(0.5, 8.0), 2)),
        "location": location,
        "isp": isp,
    }
    encoded = [CATEGORICAL[c][raw[c]] if c in CATEGORICAL else raw[c] for c in STATIC_COLUMNS]
    return raw, np.array(encoded, dtype=np.float64)


def generate_synthetic_dataset(config: GeneratorConfig) -> Dataset:
    rng = np.random.default_rng(config.seed)
    steps_per_hour = HOUR // config.interval_seconds
    steps_per_day = 24 * steps_per_hour
    n = config.days * steps_per_day
    timestamps = config.start_epoch + config.interval_seconds * np.arange(n, dtype=np.int64)
    hours = np.arange(n) / steps_per_hour
    train_end, val_end = split_bounds(n, config.split_ratios)

    seen, heldout = _app_shapes(config, rng)
    app_ids = [f"app{i}" for i in range(len(seen))]
    heldout_ids = [f"app{len(seen) + i}" for i in range(len(heldout))]
    shape_of = dict(zip(app_ids + heldout_ids, seen + heldout))

    order = rng.permutation(config.devices)
    roles = np.full(config.devices, "steady", dtype=object)
    k = 0
    for role, count in (("app_switch", config.n_switch), ("new_device", config.n_new_device),
                        ("new_app", config.n_new_app)):
        roles[order[k:k + count]] = role
        k += count

    # round-robin app assignment keeps seen archetypes balanced
    assign = np.resize(np.arange(len(seen)), config.devices)
    assign = assign[rng.permutation(config.devices)]

    series, statics, events, raw_statics = [], {}, [], {}
    for d in range(config.devices):
        sid = f"dev{d:04d}"
        role = roles[d]
        if role == "new_app":
            app = heldout_ids[int(rng.integers(len(heldout_ids)))]
        else:
            app = app_ids[int(assign[d])]
        scale = float(np.exp(rng.normal(config.scale_log_mean, config.scale_log_std)))
        level = archetype_curve(shape_of[app], hours)
        trend = _trend(rng, n, steps_per_day, config)
        noise = _ar_noise(rng, n, config)
        values = scale * (level + trend + noise)

        if role == "app_switch":
            lo, hi = val_end + steps_per_day, n - steps_per_day
            if hi <= lo:
                lo, hi = val_end, n
            at = int(rng.integers(lo, hi))
            others = [a for a in app_ids if a != app] or app_ids
            new_app = others[int(rng.integers(len(others)))]
            new_scale = scale * float(np.exp(rng.normal(0.0, config.switch_scale_std)))
            values[at:] = new_scale * (archetype_curve(shape_of[new_app], hours[at:])
                                       + trend[at:] + noise[at:])
            events.append(Event(sid, int(timestamps[at]), "app_switch",
                                {"from": app, "to": new_app}))
        elif role in ("new_device", "new_app"):
            events.append(Event(sid, int(timestamps[min(val_end, n - 1)]), role, {"app": app}))

        np.maximum(values, 0.0, out=values)
        series.append(WorkloadSeries(sid, sid, app, timestamps.copy(), values, config.interval_seconds))
        raw, enc = _statics(rng, scale)
        statics[sid] = StaticContext(sid, enc)
        raw_statics[sid] = raw

    metadata = {
        "source": "synthetic",
        "generator": config.to_dict(),
        "static_columns": list(STATIC_COLUMNS),
        "categorical": {k: dict(v) for k, v in CATEGORICAL.items()},
        "archetypes": {a: (s if isinstance(s, str) else "random") for a, s in shape_of.items()},
        "heldout_apps": heldout_ids,
        "raw_statics": raw_statics,
    }
    return Dataset(series, statics, events, metadata)
