"""Additive seasonal-trend decomposition with loess smoothers.

The smoother evaluated at position ``x0`` with an odd window ``w`` uses every
sample within ``(w - 1) / 2`` steps of ``x0`` (windows are truncated at the
series ends, not shifted) with tricube weights of bandwidth ``(w + 1) / 2``,
and fits a weighted polynomial of degree 0 or 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputTooShort


def _next_odd(x):
    k = int(np.ceil(x))
    return k if k % 2 else k + 1


def tricube(u):
    u = np.clip(np.abs(u), 0.0, 1.0)
    return (1.0 - u ** 3) ** 3


def _check_width(width):
    if width < 3 or width % 2 == 0:
        raise ConfigError(f"loess window must be odd and >= 3, got {width}")


def _fit_at(y, x0, half, degree):
    n = y.size
    lo = max(0, int(np.ceil(x0 - half)))
    hi = min(n - 1, int(np.floor(x0 + half)))
    if hi < lo:
        raise InputTooShort(f"no samples within {half} of position {x0}")
    xs = np.arange(lo, hi + 1, dtype=np.float64)
    w = tricube((xs - x0) / (half + 1.0))
    ys = y[lo:hi + 1]
    sw = w.sum()
    mean_y = (w @ ys) / sw
    if degree == 0 or xs.size < 2:
        return mean_y
    mean_x = (w @ xs) / sw
    dx = xs - mean_x
    sxx = w @ (dx * dx)
    if sxx <= 1e-12 * sw:
        return mean_y
    slope = (w @ (dx * (ys - mean_y))) / sxx
    return mean_y + slope * (x0 - mean_x)


def _loess(y, width, degree, positions=None):
    """Loess of ``y`` (on positions 0..n-1) evaluated at integer ``positions``."""
    y = np.asarray(y, dtype=np.float64)
    n = y.size
    half = (width - 1) // 2
    if positions is None:
        positions = np.arange(n)
    positions = np.asarray(positions)
    out = np.empty(positions.size)
    # full symmetric windows reduce to a kernel-weighted mean for both degrees
    interior = (positions >= half) & (positions <= n - 1 - half)
    if interior.any():
        k = tricube(np.arange(-half, half + 1) / (half + 1.0))
        k /= k.sum()
        conv = np.convolve(y, k[::-1], mode="valid")  # conv[i] is centred on i + half
        out[interior] = conv[positions[interior] - half]
    for j in np.flatnonzero(~interior):
        out[j] = _fit_at(y, float(positions[j]), half, degree)
    return out


def loess_smooth(values, window_width, degree=1):
    """Tricube-weighted local polynomial smoother evaluated at every sample."""
    values = np.asarray(values, dtype=np.float64)
    _check_width(window_width)
    if degree not in (0, 1):
        raise ConfigError(f"degree must be 0 or 1, got {degree}")
    if values.size < window_width:
        raise ConfigError(f"window {window_width} longer than series ({values.size})")
    return _loess(values, window_width, degree)


@dataclass
class STLParams:
    seasonal_width: int = 7
    trend_width: int | None = None
    lowpass_width: int | None = None
    seasonal_degree: int = 1
    trend_degree: int = 1
    lowpass_degree: int = 1
    n_inner: int = 2
    n_outer: int = 1

    def resolved(self, period):
        tw = self.trend_width or _next_odd(1.5 * period)
        lw = self.lowpass_width or _next_odd(period)
        for w in (self.seasonal_width, tw, lw):
            _check_width(w)
        for d in (self.seasonal_degree, self.trend_degree, self.lowpass_degree):
            if d not in (0, 1):
                raise ConfigError(f"loess degree must be 0 or 1, got {d}")
        if self.n_inner < 1 or self.n_outer < 1:
            raise ConfigError("n_inner and n_outer must be >= 1")
        return self.seasonal_width, tw, lw


@dataclass
class DecompositionResult:
    seasonal: np.ndarray
    trend: np.ndarray
    residual: np.ndarray
    period: int


def _moving_average(x, k):
    c = np.cumsum(np.concatenate([[0.0], x]))
    return (c[k:] - c[:-k]) / k


def _cycle_subseries(detrended, period, width, degree):
    n = detrended.size
    ext = np.empty(n + 2 * period)
    for j in range(period):
        sub = detrended[j::period]
        m = sub.size
        smooth = _loess(sub, width, degree, np.arange(-1, m + 1))
        ext[j + period * np.arange(m + 2)] = smooth
    return ext


def stl_decompose(values, period=24, params: STLParams | None = None) -> DecompositionResult:
    """Seasonal/trend/residual split; the residual is ``values - seasonal - trend``."""
    y = np.asarray(values, dtype=np.float64)
    if period < 2:
        raise ConfigError(f"period must be >= 2, got {period}")
    if y.size < 2 * period:
        raise InputTooShort(f"need at least {2 * period} points, got {y.size}")
    params = params or STLParams()
    ns, nt, nl = params.resolved(period)
    n = y.size
    trend = np.zeros(n)
    seasonal = np.zeros(n)
    for _ in range(params.n_outer):  # no robustness weights
        for _ in range(params.n_inner):
            cycle = _cycle_subseries(y - trend, period, ns, params.seasonal_degree)
            low = _moving_average(_moving_average(_moving_average(cycle, period), period), 3)
            low = _loess(low, nl, params.lowpass_degree)
            seasonal = cycle[period:period + n] - low
            trend = _loess(y - seasonal, nt, params.trend_degree)
    return DecompositionResult(seasonal, trend, y - seasonal - trend, period)
