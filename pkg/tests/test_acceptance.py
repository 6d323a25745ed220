"""Acceptance suite: one test per criterion, each reporting to the terminal summary."""
import contextlib
import json
import statistics
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
import torch
from sklearn.metrics import adjusted_rand_score

from conftest import record
from dyneformer.cli import main
from dyneformer.data import (GeneratorConfig, chronological_split, fit_normalizers,
                             generate_synthetic_dataset, prepare_windows)
from dyneformer.model import DynEformer, ModelBatch, ModelConfig
from dyneformer.pool import (GlobalPool, VadeConfig, assign_clusters, build_global_pool,
                             pool_provenance, seasonal_windows, select_pool_size, train_vade)
from dyneformer.stl import stl_decompose
from dyneformer.training import (GradCheckDims, OptimConfig, WindowTensors,
                                 ablation_suite, gradient_check, seasonal_naive_baseline)
from dyneformer.usecase import DeviceTrace, depreciation_rate, group_by_app, rank_and_count

from oracles import brute_force_rates

SEEDS = (0, 1, 2)
DESK_MODEL = dict(d_model=32, n_heads=4, feedforward_dim=128)
DESK_OPTIM = dict(learning_rate=1e-3, batch_size=256, max_epochs=12, patience=3, max_steps_per_epoch=40)
POOL_CANDIDATES = range(2, 9)
POOL_STRIDE = 8


@contextlib.contextmanager
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


def clean_windows(apps, shapes, seed, devices):
    cfg = GeneratorConfig(apps=apps, shapes=shapes, devices=devices, days=30, switch_fraction=0,
                          new_device_fraction=0, new_app_fraction=0, seed=seed)
    ds = generate_synthetic_dataset(cfg)
    train = chronological_split(ds)[0]
    sw = seasonal_windows(train, fit_normalizers(ds, train.bounds), stride=24)
    return sw, np.array([ds[s].app_id for s in sw.series_ids])


def test_criterion_01_stl_identity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in range(100):
        n = int(rng.integers(72, 24 * 30))
        t = np.arange(n)
        y = (rng.uniform(0.5, 3) * np.sin(2 * np.pi * t / 24 + rng.uniform(0, 6)) + rng.normal(0, 1) * t / n
             + rng.standard_normal(n) * rng.uniform(0.01, 1) + rng.uniform(-50, 50))
        r = stl_decompose(y, 24)
        worst = max(worst, float(np.max(np.abs(r.seasonal + r.trend + r.residual - y))))
    t = np.arange(24 * 20)
    sine = np.sin(2 * np.pi * t / 24)
    corr = float(np.corrcoef(stl_decompose(sine, 24).seasonal, sine)[0, 1])
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and corr > 0.99 and elapsed < 30
    record(1, ok, f"max |S+T+R-y| {worst:.1e}, sine corr {corr:.5f}, {elapsed:.1f}s")
    assert ok


def test_criterion_02_vade_ari():
    t0 = time.perf_counter()
    aris, sizes = [], []
    with quiet():
        for seed in SEEDS:
            sw, labels = clean_windows(3, None, seed, 20)
            model = train_vade(sw, 3, VadeConfig(seed=seed))
            aris.append(adjusted_rand_score(labels, assign_clusters(model, sw).labels))
            sizes.append(len(sw))
    med = statistics.median(aris)
    elapsed = time.perf_counter() - t0
    ok = med >= 0.8 and min(sizes) >= 300 and elapsed < 300
    record(2, ok, f"ARI per seed {[round(a, 3) for a in aris]}, median {med:.3f}, "
                  f"windows {sizes}, {elapsed:.0f}s")
    assert ok


def test_criterion_03_pool_size_selection():
    shapes = ["noon_peak", "night_peak", "double_peak", "morning_peak"]
    picks = []
    with quiet():
        for seed in SEEDS:
            sw, _ = clean_windows(4, shapes, seed, 24)
            picks.append(select_pool_size(sw, POOL_CANDIDATES, VadeConfig(seed=seed)).best)
    med = statistics.median(picks)
    ok = abs(med - 4) <= 1
    record(3, ok, f"selected P per seed {picks}, median {med}")
    assert ok


def test_criterion_04_merge_weight_simplex():
    cfg = ModelConfig(d_model=16, n_heads=2, n_gp_blocks=3, T=12, L=6, L_token=4, d_s=3, n_pools=5,
                      dropout=0.1)
    g = torch.Generator().manual_seed(0)
    worst_sum, min_w, n_pass = 0.0, 1.0, 0
    with torch.no_grad():
        for outer in range(100):
            torch.manual_seed(outer)
            model = DynEformer(cfg).train(outer % 2 == 0)
            for p in model.parameters():
                p.mul_(1 + 2 * torch.rand((), generator=g))
            for _ in range(100):
                b = int(torch.randint(1, 6, (), generator=g))
                scale = float(10 ** (4 * torch.rand((), generator=g) - 2))
                batch = ModelBatch(scale * torch.randn(b, cfg.T, cfg.d_t, generator=g),
                                   torch.randn(b, cfg.L_token, generator=g),
                                   torch.randn(b, cfg.L_token + cfg.L, cfg.d_t - 1, generator=g),
                                   torch.randn(b, cfg.d_s, generator=g))
                pool = scale * torch.randn(cfg.n_pools, cfg.T, generator=g)
                _, trace = model(batch, pool)
                for W in trace.merge_weights:
                    min_w = min(min_w, float(W.min()))
                    worst_sum = max(worst_sum, float((W.sum(-1) - 1).abs().max()))
                n_pass += 1
    ok = min_w >= 0 and worst_sum <= 1e-5 and n_pass == 10_000
    record(4, ok, f"{n_pass} passes x {cfg.n_gp_blocks} blocks: min weight {min_w:.2e}, "
                  f"max |row sum - 1| {worst_sum:.1e}")
    assert ok


def test_criterion_05_gradient_checks():
    t0 = time.perf_counter()
    dims = GradCheckDims(b=2, T=4, P=3, d_model=8, d_s=3)
    errs = {k: gradient_check(k, dims) for k in ("sa", "gp", "full")}
    elapsed = time.perf_counter() - t0
    ok = max(errs.values()) <= 1e-4 and elapsed < 120
    record(5, ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f" max rel err, {elapsed:.0f}s")
    assert ok


@pytest.fixture(scope="module")
def desk_runs():
    """Default dataset, BIC-selected pool, three variants x three training seeds."""
    t0 = time.perf_counter()
    with quiet():
        ds = generate_synthetic_dataset(GeneratorConfig())
        prep = prepare_windows(ds)
        train = prep.splits[0]
        sw = seasonal_windows(train, prep.normalizers, stride=POOL_STRIDE)
        vcfg = VadeConfig(seed=0)
        sel = select_pool_size(sw, POOL_CANDIDATES, vcfg)
        prov = pool_provenance(train, vcfg, sel.best, POOL_STRIDE, 48)
        pool = build_global_pool(sw, assign_clusters(sel.models[sel.best], sw), prov)
    pool_seconds = time.perf_counter() - t0
    base = ModelConfig(n_pools=pool.P, d_s=ds.d_s, **DESK_MODEL)
    full_runs, seconds = {}, {}
    clock = [time.perf_counter()]

    def on_model(variant, seed, tr):
        seconds[(variant, seed)] = time.perf_counter() - clock[0]
        clock[0] = time.perf_counter()
        if variant == "full":
            full_runs[seed] = tr

    with quiet():
        ablation = ablation_suite(prep, pool, base, OptimConfig(**DESK_OPTIM), SEEDS,
                                  ["full", "-GP", "0Padding"], on_model=on_model)
    naive = seasonal_naive_baseline(prep.val).overall.mse
    return dict(prep=prep, pool=pool, bic=sel.bic, ablation=ablation, full=full_runs, naive=naive,
                pool_seconds=pool_seconds, seconds=seconds)


def test_criterion_06_beats_seasonal_naive(desk_runs):
    runs = desk_runs["full"]
    assert sorted(runs) == list(SEEDS), desk_runs["ablation"].errors
    naive = desk_runs["naive"]
    gains = [1 - runs[s].best_val_loss / naive for s in SEEDS]
    med = statistics.median(gains)
    cpu = desk_runs["pool_seconds"] + sum(desk_runs["seconds"][("full", s)] for s in SEEDS)
    ok = med >= 0.25 and cpu < 20 * 60
    record(6, ok, f"val MSE naive {naive:.4f}, full {[round(runs[s].best_val_loss, 4) for s in SEEDS]}; "
                  f"median reduction {med:.1%} (P={desk_runs['pool'].P}, {cpu:.0f}s)")
    assert ok


def test_criterion_07_app_switch_ordering(desk_runs):
    ab = desk_runs["ablation"]
    assert not ab.errors, ab.errors
    med = {v: ab.median_mae(v, "app_switch") for v in ("full", "-GP", "0Padding")}
    per_seed = {v: [round(r["mae"], 4) for r in ab.rows if r["model_variant"] == v and r["tag"] == "app_switch"]
                for v in med}
    steady = {v: round(ab.median_mae(v, "steady"), 4) for v in med}
    ok = med["full"] <= med["0Padding"] and med["full"] <= med["-GP"]
    record(7, ok, "app_switch median MAE " + ", ".join(f"{v} {m:.4f}" for v, m in med.items())
           + f"; per seed {per_seed}; steady medians {steady}")
    assert ok


def test_criterion_08_sync_padding_consistency(tmp_path):
    with quiet():
        ds = generate_synthetic_dataset(GeneratorConfig(seed=4))
        prep = prepare_windows(ds, dtype=np.float64)
        train = prep.splits[0]
        sw = seasonal_windows(train, prep.normalizers, stride=12)
        model_v = train_vade(sw, 4, VadeConfig(seed=0, pretrain_epochs=5, finetune_epochs=2))
        pool = build_global_pool(sw, assign_clusters(model_v, sw), {"note": "criterion 8"})
    path = pool.save(tmp_path / "pool.json")
    torch.manual_seed(0)
    model = DynEformer(ModelConfig(n_pools=pool.P, d_s=ds.d_s, **DESK_MODEL)).double().eval()
    wt = WindowTensors.from_windows(prep.test, torch.float64)
    n = min(1000, len(wt))
    with torch.no_grad():
        _, trace = model(wt.batch(slice(0, n)), GlobalPool.load(path))
    file_pool = np.asarray(json.loads(Path(path).read_text())["pools"], dtype=np.float64)
    W = trace.final_weights.numpy()
    expected = (W @ file_pool)[:, -model.config.L:]
    got = trace.decoder_input[:, model.config.L_token:, 0].numpy()
    err = float(np.max(np.abs(got - expected)))
    size = float(np.max(np.abs(expected)))
    ok = n == 1000 and err <= 1e-9 and size > 0.1
    record(8, ok, f"{n} samples, max |padding - W @ pool| {err:.1e} (padding magnitude up to {size:.2f})")
    assert ok


def test_criterion_09_depreciation():
    with quiet():
        ds = generate_synthetic_dataset(GeneratorConfig(apps=5, devices=30, days=14, switch_fraction=0,
                                                        new_device_fraction=0, new_app_fraction=0,
                                                        seed=9))
    traces = {s.series_id: DeviceTrace(s.series_id, s.timestamps, s.values) for s in ds.series}
    groups = group_by_app(traces, {s.series_id: s.app_id for s in ds.series})
    got, want = depreciation_rate(groups), brute_force_rates(groups)
    err = max(abs(got[a] - want[a]) for a in want)
    apps = ["APP1", "APP2", "APP3", "APP4", "APP5"]
    labels = dict(zip(apps, [0.075, 0.068, 0.033, 0.011, 0.002]))
    informer = dict(zip(apps, [0.024, 0.059, 0.041, 0.013, 0.001]))
    counts = (rank_and_count(labels, labels)[2], rank_and_count(labels, informer)[2])
    ok = len(groups) == 5 and err <= 1e-12 and counts == (5, 2)
    record(9, ok, f"{len(groups)} apps, max |rate - oracle| {err:.1e}; published counts {counts}")
    assert ok


def test_criterion_10_replay_is_bit_identical(tmp_path):
    cfg = {"gen": dict(devices=8, days=25, seed=11),
           "vade": dict(pretrain_epochs=3, finetune_epochs=1, hidden=[32, 16], em_restarts=1),
           "train": dict(model=dict(d_model=16, n_heads=2, feedforward_dim=32),
                         optim=dict(learning_rate=3e-3, batch_size=64, max_epochs=2, max_steps_per_epoch=4))}
    paths = {}
    for k, v in cfg.items():
        paths[k] = tmp_path / f"{k}.json"
        paths[k].write_text(json.dumps(v))
    d = {k: str(tmp_path / k) for k in ("data", "pool", "model", "eval")}
    steps = [["gen-data", "--config", str(paths["gen"]), "--out", d["data"]],
             ["build-pool", "--config", str(paths["vade"]), "--data", d["data"], "--out", d["pool"],
              "--candidates", "2,3,4", "--stride", "12"],
             ["train", "--config", str(paths["train"]), "--data", d["data"], "--pool",
              d["pool"] + "/pool.json", "--out", d["model"]],
             ["eval", "--data", d["data"], "--checkpoint", d["model"] + "/model.pt", "--pool",
              d["pool"] + "/pool.json", "--out", d["eval"]]]
    with quiet():
        codes = [main(argv) for argv in steps]
    csvs = sorted(tmp_path.rglob("*.csv"))
    before = {p: p.read_bytes() for p in csvs}
    manifests = [Path(d[k]) / f"manifest_{c}.json"
                 for k, c in (("data", "gen-data"), ("pool", "build-pool"), ("model", "train"), ("eval", "eval"))]
    with quiet():
        replays = [main(["replay", "--manifest", str(m)]) for m in manifests]
    same = all(p.read_bytes() == b for p, b in before.items())
    ok = codes == [0] * 4 and replays == [0] * 4 and same and len(csvs) >= 6
    record(10, ok, f"run codes {codes}, replay codes {replays}, {len(csvs)} CSVs "
                   f"{'bit-identical' if same else 'DIFFER'}")
    assert ok
