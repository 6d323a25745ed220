import numpy as np


def brute_force_rates(devices_by_app):
    """Scan every hour for the app peak and each device's peak, then apply the ratio."""
    out = {}
    for app, devices in devices_by_app.items():
        hours = sorted({int(t) for d in devices for t in d.timestamps})
        best_t, best_v = None, -np.inf
        for t in hours:
            v = 0.0
            for d in devices:
                for tt, x in zip(d.timestamps.tolist(), d.values.tolist()):
                    if tt == t:
                        v += x
            if v > best_v:
                best_t, best_v = t, v
        num = den = 0.0
        for d in devices:
            peak_t, peak_v = None, -np.inf
            for tt, x in zip(d.timestamps.tolist(), d.values.tolist()):
                if x > peak_v:
                    peak_t, peak_v = tt, x
            den += peak_v
            num += d.values[d.timestamps.tolist().index(best_t)]
        out[app] = 1.0 - num / den
    return out
