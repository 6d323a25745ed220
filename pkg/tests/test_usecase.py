import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyneformer.data import GeneratorConfig, generate_synthetic_dataset
from dyneformer.errors import CoverageError, DegenerateBilling
from dyneformer.usecase import (BillingSpec, DepreciationReport, DeviceTrace, FixedSelector,
                                PeakSelector, app_depreciation, depreciation_rate, group_by_app,
                                rank_and_count, ranks)

from oracles import brute_force_rates

LABELS = dict(zip(["APP1", "APP2", "APP3", "APP4", "APP5"], [0.075, 0.068, 0.033, 0.011, 0.002]))
INFORMER = dict(zip(["APP1", "APP2", "APP3", "APP4", "APP5"], [0.024, 0.059, 0.041, 0.013, 0.001]))
DYNEFORMER = dict(zip(["APP1", "APP2", "APP3", "APP4", "APP5"], [0.049, 0.044, 0.017, 0.015, 0.001]))


def trace(name, values, start=0):
    return DeviceTrace(name, start + 3600 * np.arange(len(values)), np.asarray(values, float))


def test_same_billing_time_gives_zero():
    devs = [trace("a", [1, 5, 2]), trace("b", [0, 3, 1])]
    assert app_depreciation(devs) == 0.0


def test_half_depreciation():
    devs = [trace("a", [50, 0, 0]), trace("b", [0, 10, 50])]
    # app totals 50, 10, 50: earliest peak t0 bills 50 + 0 against device peaks 50 + 50
    assert app_depreciation(devs) == pytest.approx(0.5)


def test_fixed_selector_can_make_rate_negative():
    devs = [trace("a", [1, 4]), trace("b", [3, 0])]
    spec = BillingSpec(PeakSelector(), FixedSelector(timestamp=0))
    d = app_depreciation(devs, spec)
    assert d == pytest.approx(1 - 4 / 4)
    spec = BillingSpec(FixedSelector(timestamp=3600), FixedSelector(timestamp=0))
    assert app_depreciation([trace("a", [1, 4])], spec) == pytest.approx(1 - 4 / 1)


def test_clock_hour_selector():
    devs = [trace("a", np.arange(48))]
    assert FixedSelector(hour=5)(devs[0].timestamps, devs[0].values) == 29 * 3600
    with pytest.raises(CoverageError):
        FixedSelector(hour=5)(np.array([0, 3600]), np.zeros(2))


def test_degenerate_and_coverage_errors():
    with pytest.raises(DegenerateBilling):
        app_depreciation([trace("a", [0, 0]), trace("b", [0, 0])])
    with pytest.raises(CoverageError):
        app_depreciation([trace("a", [0, 9]), trace("b", [5, 0], start=7200)])
    with pytest.raises(CoverageError):
        app_depreciation([trace("a", [1, 2])], BillingSpec(FixedSelector(timestamp=99), PeakSelector()))


def test_matches_exhaustive_hour_oracle():
    ds = generate_synthetic_dataset(GeneratorConfig(devices=20, days=7, switch_fraction=0,
                                                    new_device_fraction=0, new_app_fraction=0, seed=2))
    traces = {s.series_id: DeviceTrace(s.series_id, s.timestamps, s.values) for s in ds.series}
    groups = group_by_app(traces, {s.series_id: s.app_id for s in ds.series})
    assert len(groups) == 5
    got, want = depreciation_rate(groups), brute_force_rates(groups)
    for app in want:
        assert abs(got[app] - want[app]) <= 1e-12


def test_published_rank_counts():
    lr, pr, count = rank_and_count(LABELS, LABELS)
    assert count == 5 and lr == pr == {"APP1": 1, "APP2": 2, "APP3": 3, "APP4": 4, "APP5": 5}
    _, pr, count = rank_and_count(LABELS, INFORMER)
    assert count == 2 and pr == {"APP1": 3, "APP2": 1, "APP3": 2, "APP4": 4, "APP5": 5}
    assert rank_and_count(LABELS, DYNEFORMER)[2] == 5


def test_reversed_predictions_keep_only_the_middle():
    rev = dict(zip(LABELS, reversed(list(LABELS.values()))))
    assert rank_and_count(LABELS, rev)[2] == 1


def test_ties_broken_by_app_id():
    assert ranks({"b": 0.5, "a": 0.5, "c": 0.9}) == {"c": 1, "a": 2, "b": 3}


def test_mismatched_apps():
    with pytest.raises(KeyError):
        rank_and_count({"a": 1.0}, {"b": 1.0})


def test_report_csv():
    rep = DepreciationReport.build(LABELS, INFORMER)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "app_id,label_rate,label_rank,predicted_rate,predicted_rank"
    assert lines[1].startswith("APP1,0.075,1,0.024,3")
    assert lines[-1].startswith("count=2")


values = st.lists(st.floats(0.01, 1e3), min_size=6, max_size=6)


@settings(max_examples=50, deadline=None)
@given(a=values, b=values, c=st.floats(1e-3, 1e3))
def test_rate_is_scale_invariant_and_at_most_one(a, b, c):
    devs = [trace("a", a), trace("b", b)]
    d = app_depreciation(devs)
    scaled = app_depreciation([trace("a", np.asarray(a) * c), trace("b", np.asarray(b) * c)])
    assert d <= 1.0
    assert d >= 0.0  # peak selectors: each device's own peak bounds its app-time value
    assert scaled == pytest.approx(d, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12, unique=True))
def test_self_ranking_counts_everything(rates):
    r = {f"app{i:02d}": v for i, v in enumerate(rates)}
    assert rank_and_count(r, r)[2] == len(r)
    ordered = sorted(r, key=ranks(r).get)
    assert all(r[x] >= r[y] for x, y in zip(ordered, ordered[1:]))
