from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..errors import DataError

HOUR = 3600
BEHAVIOR_TAGS = ("steady", "app_switch", "new_device", "new_app")
EVENT_KINDS = ("app_switch", "new_device", "new_app")
NEW_ENTITY_KINDS = ("new_device", "new_app")


@dataclass
class WorkloadSeries:
    """Timestamped workload of one (device, app) pairing.

    Timestamps are epoch seconds. Constant spacing is checked by
    :meth:`is_regular` rather than at construction, so raw traces with
    holes can exist long enough to be resampled.
    """

    series_id: str
    device_id: str
    app_id: str
    timestamps: np.ndarray
    values: np.ndarray
    interval_seconds: int = HOUR

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.timestamps.ndim != 1 or self.values.shape != self.timestamps.shape:
            raise DataError(f"{self.series_id}: values and timestamps differ in length")
        if self.timestamps.size > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise DataError(f"{self.series_id}: timestamps not strictly increasing")
        if int(self.interval_seconds) <= 0:
            raise DataError(f"{self.series_id}: interval must be positive")
        self.interval_seconds = int(self.interval_seconds)

    def __len__(self):
        return self.values.size

    def is_regular(self):
        if self.timestamps.size < 2:
            return True
        return bool(np.all(np.diff(self.timestamps) == self.interval_seconds))

    def with_values(self, values):
        return WorkloadSeries(self.series_id, self.device_id, self.app_id,
                              self.timestamps.copy(), values, self.interval_seconds)


@dataclass
class StaticContext:
    series_id: str
    attributes: np.ndarray

    def __post_init__(self):
        self.attributes = np.asarray(self.attributes, dtype=np.float64).reshape(-1)


@dataclass
class Event:
    series_id: str
    timestamp: int
    kind: str
    payload: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise DataError(f"unknown event kind {self.kind!r}")
        self.timestamp = int(self.timestamp)


@dataclass
class Dataset:
    series: list[WorkloadSeries]
    statics: dict[str, StaticContext] = field(default_factory=dict)
    events: list[Event] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.series_id for s in self.series]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate series_id in dataset")
        self._index = {s.series_id: i for i, s in enumerate(self.series)}
        if self.statics:
            if set(self.statics) != set(ids):
                raise DataError("statics and series ids do not match")
            dims = {sc.attributes.size for sc in self.statics.values()}
            if len(dims) != 1:
                raise DataError("static vectors have inconsistent dimension")
        for ev in self.events:
            if ev.series_id not in self._index:
                raise DataError(f"event for unknown series {ev.series_id!r}")
            ts = self[ev.series_id].timestamps
            if ts.size == 0 or not ts[0] <= ev.timestamp <= ts[-1]:
                raise DataError(f"event at {ev.timestamp} outside range of {ev.series_id!r}")

    def __getitem__(self, series_id) -> WorkloadSeries:
        return self.series[self._index[series_id]]

    def __len__(self):
        return len(self.series)

    def __contains__(self, series_id):
        return series_id in self._index

    @property
    def series_ids(self):
        return [s.series_id for s in self.series]

    @property
    def d_s(self):
        if not self.statics:
            return 0
        return next(iter(self.statics.values())).attributes.size

    def events_for(self, series_id, kind=None):
        return [e for e in self.events
                if e.series_id == series_id and (kind is None or e.kind == kind)]

    def new_entity_kind(self, series_id):
        """``new_device``/``new_app`` for held-out entities, else None."""
        for e in self.events:
            if e.series_id == series_id and e.kind in NEW_ENTITY_KINDS:
                return e.kind
        return None
