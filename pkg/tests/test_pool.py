import json
import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal
from sklearn.metrics import adjusted_rand_score

from dyneformer.data.synthetic import archetype_curve
from dyneformer.errors import ConfigError, DataError, DimensionError
from dyneformer.pool import (ClusterAssignment, GlobalPool, VadeConfig, VadeModel, assign_clusters,
                             bic_param_count, build_global_pool, compute_bic, elbow_choice,
                             gmm_responsibilities, pool_from_split, seasonal_windows,
                             select_pool_size, split_digest, train_vade)

FAST = dict(pretrain_epochs=15, finetune_epochs=5, hidden=(64, 32), em_restarts=2)


def archetype_windows(shapes, n_per, noise, seed, T2=48):
    rng = np.random.default_rng(seed)
    h = np.arange(T2)
    xs, ys = [], []
    for i, s in enumerate(shapes):
        c = archetype_curve(s, h)
        c = (c - c.mean()) / c.std()
        xs.append(c[None] + noise * rng.standard_normal((n_per, T2)))
        ys += [i] * n_per
    return np.concatenate(xs), np.array(ys)


def test_bic_param_count():
    assert bic_param_count(1, 10) == 20
    assert bic_param_count(3, 10) == 2 + 60
    assert bic_param_count(5, 2) == 4 + 20


def test_compute_bic_matches_direct_formula():
    torch.manual_seed(0)
    model = VadeModel(6, 2, latent_dim=2, hidden=(8,))
    model.set_gmm([0.3, 0.7], [[0.0, 0.0], [1.0, -1.0]], [[1.0, 0.5], [0.2, 2.0]])
    x = np.random.default_rng(0).normal(size=(40, 6))
    z = model.latent_means(x)
    lik = 0.3 * multivariate_normal([0, 0], np.diag([1.0, 0.5])).pdf(z) + \
        0.7 * multivariate_normal([1, -1], np.diag([0.2, 2.0])).pdf(z)
    expected = bic_param_count(2, 2) * math.log(40) - 2 * np.log(lik).sum()
    assert compute_bic(model, x) == pytest.approx(expected, rel=1e-10)


def test_responsibilities_match_scipy(rng):
    w = np.array([0.2, 0.5, 0.3])
    mu = rng.normal(size=(3, 4))
    var = rng.uniform(0.2, 2.0, size=(3, 4))
    z = rng.normal(size=(25, 4))
    dens = np.stack([w[c] * multivariate_normal(mu[c], np.diag(var[c])).pdf(z) for c in range(3)], 1)
    np.testing.assert_allclose(gmm_responsibilities(z, w, mu, var),
                               dens / dens.sum(1, keepdims=True), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 1000))
def test_responsibilities_are_a_simplex(k, j, seed):
    r = np.random.default_rng(seed)
    w = r.dirichlet(np.ones(k))
    resp = gmm_responsibilities(r.normal(size=(10, j)) * 5, w, r.normal(size=(k, j)),
                                r.uniform(0.1, 3, (k, j)))
    assert np.all(resp >= 0)
    np.testing.assert_allclose(resp.sum(1), 1.0, atol=1e-12)


def test_elbow_choice_rules():
    # two candidates within 1% -> the smaller one
    assert elbow_choice({3: -1000.0, 4: -1005.0}) == 3
    # clear minimum
    assert elbow_choice({2: 500.0, 3: 100.0, 4: 300.0}) == 3
    # long shallow tail past the knee falls inside 5% of the spread
    bics = {2: 0.0, 3: -800.0, 4: -2000.0, 5: -2030.0, 6: -2060.0, 7: -2090.0}
    assert elbow_choice(bics, tolerance=0.0) == 4
    assert elbow_choice(bics, tolerance=0.0, range_tolerance=0.0) == 7
    with pytest.raises(ConfigError):
        elbow_choice({})


def test_select_pool_size_validates_candidates():
    x = np.zeros((100, 48))
    with pytest.raises(ConfigError):
        select_pool_size(x, [])
    with pytest.raises(ConfigError):
        select_pool_size(x, [4, 3])


def test_train_vade_needs_enough_windows():
    with pytest.raises(DataError):
        train_vade(np.zeros((29, 48)), 3, VadeConfig(**FAST))


def test_train_vade_clusters_separated_shapes():
    x, y = archetype_windows(["noon_peak", "night_peak", "double_peak"], 60, 0.1, 0)
    model = train_vade(x, 3, VadeConfig(seed=0, **FAST))
    a = assign_clusters(model, x)
    assert adjusted_rand_score(y, a.labels) > 0.9
    h = model.history
    assert h["pretrained_recon_mse"] < h["initial_recon_mse"]
    np.testing.assert_allclose(a.responsibilities.sum(1), 1.0, atol=1e-9)
    with pytest.raises(DimensionError):
        model.latent_means(np.zeros((3, 47)))


def test_single_cluster_vade():
    x, _ = archetype_windows(["noon_peak"], 40, 0.1, 0)
    model = train_vade(x, 1, VadeConfig(seed=0, **FAST))
    assert np.all(assign_clusters(model, x).labels == 0)


def test_vade_is_deterministic_per_seed():
    x, _ = archetype_windows(["noon_peak", "night_peak"], 30, 0.1, 1)
    a = train_vade(x, 2, VadeConfig(seed=4, **FAST))
    b = train_vade(x, 2, VadeConfig(seed=4, **FAST))
    assert compute_bic(a, x) == compute_bic(b, x)


def test_build_global_pool_means_and_empty_clusters():
    x = np.arange(12, dtype=float).reshape(4, 3)
    a = ClusterAssignment(np.array([0, 2, 0, 2]), np.zeros((4, 3)))
    with pytest.warns(UserWarning, match="empty"):
        pool = build_global_pool(x, a, {"note": "t"}, period=3)
    np.testing.assert_allclose(pool.pools, [[3, 4, 5], [6, 7, 8]])
    assert list(pool.member_counts) == [2, 2]
    assert pool.P == 2 and pool.T2 == 3
    with pytest.raises(DataError):
        build_global_pool(x, ClusterAssignment(np.zeros(3, int), None))


def test_pool_roundtrip_and_digest(tmp_path):
    x = np.random.default_rng(0).normal(size=(6, 4))
    a = ClusterAssignment(np.array([0, 1, 0, 1, 0, 1]), np.zeros((6, 2)))
    pool = build_global_pool(x, a, {"train_split_digest": "abc"}, period=2)
    path = pool.save(tmp_path / "pool.json")
    back = GlobalPool.load(path)
    assert np.array_equal(back.pools, pool.pools)
    assert back.digest() == pool.digest()
    data = json.loads(path.read_text())
    assert data["version"] == 1 and data["P"] == 2 and data["T2"] == 4
    later = GlobalPool(pool.pools, pool.member_counts, {**pool.provenance, "created": "later"}, 2)
    assert later.digest() == pool.digest()
    moved = GlobalPool(pool.pools + 1e-12, pool.member_counts, pool.provenance, 2)
    assert moved.digest() != pool.digest()


def test_seasonal_windows_and_pool_from_split(small_prepared):
    train = small_prepared.splits[0]
    sw = seasonal_windows(train, small_prepared.normalizers, T2=48, stride=24)
    per = len(range(0, len(train) - 48 + 1, 24))
    assert sw.values.shape == (per * len(train.series_ids), 48)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pool, _ = pool_from_split(train, small_prepared.normalizers, 2, VadeConfig(**FAST), stride=12)
    assert pool.T2 == 48 and pool.P <= 2
    assert pool.provenance["train_split_digest"] == split_digest(train)
    assert split_digest(small_prepared.splits[1]) != split_digest(train)
