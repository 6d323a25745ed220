"""Application depreciation rates from billed workloads, and rank comparison.

For app ``a`` run by devices ``l = 1..k``::

    D_a = 1 - sum_l x_l(t_a) / sum_l x_l(t_l)

where ``t_a`` is the app's billing time and ``t_l`` each device's own
billing time. Both default to peak hours (ties go to the earliest hour).
"""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import CoverageError, DegenerateBilling, DimensionError


@dataclass(frozen=True)
class PeakSelector:
    """Timestamp of the largest value; earliest on ties."""

    def __call__(self, timestamps, values):
        return int(timestamps[int(np.argmax(values))])


@dataclass(frozen=True)
class FixedSelector:
    """A fixed epoch timestamp, or the latest occurrence of a clock hour when ``hour`` is set."""

    timestamp: int | None = None
    hour: int | None = None

    def __call__(self, timestamps, values):
        ts = np.asarray(timestamps, dtype=np.int64)
        if self.timestamp is not None:
            if self.timestamp not in set(ts.tolist()):
                raise CoverageError(f"billing timestamp {self.timestamp} outside the span")
            return int(self.timestamp)
        hits = np.flatnonzero((ts // 3600) % 24 == self.hour)
        if hits.size == 0:
            raise CoverageError(f"clock hour {self.hour} not inside the span")
        return int(ts[hits[-1]])


@dataclass(frozen=True)
class BillingSpec:
    app: object = field(default_factory=PeakSelector)
    device: object = field(default_factory=PeakSelector)


@dataclass
class DeviceTrace:
    device_id: str
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.timestamps.shape != self.values.shape:
            raise DimensionError(f"{self.device_id}: timestamps and values differ in length")

    def at(self, t):
        hit = np.flatnonzero(self.timestamps == t)
        if hit.size == 0:
            raise CoverageError(f"device {self.device_id} has no sample at billing time {t}")
        return float(self.values[hit[0]])


def app_aggregate(devices):
    """Sum of device values per timestamp over the union of timestamps."""
    ts = np.unique(np.concatenate([d.timestamps for d in devices]))
    total = np.zeros(ts.size)
    for d in devices:
        total[np.searchsorted(ts, d.timestamps)] += d.values
    return ts, total


def app_depreciation(devices, billing: BillingSpec | None = None):
    billing = billing or BillingSpec()
    if not devices:
        raise DegenerateBilling("app has no devices")
    ts, total = app_aggregate(devices)
    t_a = billing.app(ts, total)
    num = sum(d.at(t_a) for d in devices)
    den = sum(d.at(billing.device(d.timestamps, d.values)) for d in devices)
    if den == 0:
        raise DegenerateBilling("devices' billed workloads sum to zero")
    return 1.0 - num / den


def depreciation_rate(devices_by_app, billing: BillingSpec | None = None):
    """Per-app rates; ``devices_by_app`` maps app id to a list of :class:`DeviceTrace`."""
    return {app: app_depreciation(list(devs), billing) for app, devs in devices_by_app.items()}


def ranks(rates):
    """1-based ranks by descending rate; ties go to the smaller app id."""
    order = sorted(rates, key=lambda a: (-rates[a], a))
    return {a: i + 1 for i, a in enumerate(order)}


def rank_and_count(label_rates, predicted_rates):
    if set(label_rates) != set(predicted_rates):
        raise KeyError(f"app sets differ: {sorted(set(label_rates) ^ set(predicted_rates))}")
    lr, pr = ranks(label_rates), ranks(predicted_rates)
    return lr, pr, sum(lr[a] == pr[a] for a in lr)


@dataclass
class DepreciationReport:
    label_rates: dict
    predicted_rates: dict
    label_ranks: dict
    predicted_ranks: dict
    count: int

    @classmethod
    def build(cls, label_rates, predicted_rates):
        lr, pr, count = rank_and_count(label_rates, predicted_rates)
        return cls(dict(label_rates), dict(predicted_rates), lr, pr, count)

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["app_id", "label_rate", "label_rank", "predicted_rate", "predicted_rank"])
        for a in sorted(self.label_ranks, key=self.label_ranks.get):
            w.writerow([a, repr(self.label_rates[a]), self.label_ranks[a],
                        repr(self.predicted_rates[a]), self.predicted_ranks[a]])
        w.writerow([f"count={self.count}", "", "", "", ""])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def group_by_app(traces, app_of):
    """``traces``: series id -> DeviceTrace; ``app_of``: series id -> app id."""
    out = defaultdict(list)
    for sid in sorted(traces):
        out[app_of[sid]].append(traces[sid])
    return dict(sorted(out.items()))


def forecast_traces(model, prepared, pool=None, batch_size=1024):
    """Label and predicted raw-scale traces over the test span of every series.

    Uses non-overlapping test windows (stride ``L``); the covered span starts
    ``T`` steps into the test split.
    """
    from .data.preprocess import make_windows
    from .training import predict

    test_split = prepared.splits[2]
    ws = make_windows(test_split, prepared.T, prepared.L, prepared.L_token, prepared.normalizers,
                      stride=prepared.L)
    pr = predict(model, ws, pool, batch_size)
    return _assemble(ws, pr.y, pr.y_hat, prepared.normalizers)


def _assemble(ws, y, y_hat, normalizers):
    ts = ws.target_timestamps()
    labels, preds = {}, {}
    for sid in dict.fromkeys(ws.series_ids.tolist()):
        rows = np.flatnonzero(ws.series_ids == sid)
        t = ts[rows].reshape(-1)
        norm = normalizers[sid]
        labels[sid] = DeviceTrace(sid, t, norm.invert(y[rows].reshape(-1)))
        preds[sid] = DeviceTrace(sid, t, norm.invert(y_hat[rows].reshape(-1)))
    return labels, preds


def usecase_report(model, prepared, pool=None, billing: BillingSpec | None = None):
    """Label versus predicted depreciation ranking over the test span."""
    labels, preds = forecast_traces(model, prepared, pool)
    app_of = {sid: prepared.dataset[sid].app_id for sid in labels}
    lr = depreciation_rate(group_by_app(labels, app_of), billing)
    pr = depreciation_rate(group_by_app(preds, app_of), billing)
    return DepreciationReport.build(lr, pr)
