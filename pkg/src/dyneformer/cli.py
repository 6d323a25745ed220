"""Command-line entry point: ``dyneformer <command> [flags]``.

Every successful command writes ``manifest_<command>.json`` next to its
outputs; ``dyneformer replay --manifest m.json`` reruns it and checks that
the outputs hash identically. Exit codes: 0 success, 1 runtime error,
2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .errors import DyneformerError, StateError

MANIFEST_VERSION = 1


# ---------------------------------------------------------------- helpers


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_inputs(paths):
    out = {}
    for p in paths:
        if p is None:
            continue
        if os.path.isdir(p):
            for name in sorted(os.listdir(p)):
                full = os.path.join(p, name)
                if os.path.isfile(full) and not name.startswith("manifest_"):
                    out[full] = sha256_file(full)
        elif os.path.exists(p):
            out[p] = sha256_file(p)
    return out


def _load_json(path):
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _config_hash(config):
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _fmt(x):
    return repr(float(x))


class _Run:
    """Collects inputs/outputs of one command and writes its manifest."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.inputs = []
        self.outputs = []
        self.config = {}
        self.started = time.perf_counter()

    def output(self, path):
        self.outputs.append(path)
        return path

    def manifest(self):
        out_dir = self.args.out
        os.makedirs(out_dir, exist_ok=True)
        m = {
            "version": MANIFEST_VERSION,
            "command": self.args.command,
            "argv": self.argv,
            "cwd": os.getcwd(),
            "config_hash": _config_hash(self.config),
            "config": self.config,
            "inputs": _hash_inputs(self.inputs),
            "outputs": {p: sha256_file(p) for p in self.outputs},
            "seed": getattr(self.args, "seed", None),
            "tool_version": __version__,
            "wall_seconds": time.perf_counter() - self.started,
        }
        path = os.path.join(out_dir, f"manifest_{self.args.command}.json")
        with open(path, "w") as fh:
            json.dump(m, fh, indent=2, sort_keys=True)
        return path


def _prepare(args, model_cfg=None):
    from .data import load_dataset, prepare_windows
    ds = load_dataset(args.data)
    T = model_cfg.T if model_cfg else 48
    L = model_cfg.L if model_cfg else 24
    L_token = model_cfg.L_token if model_cfg else 12
    return prepare_windows(ds, T, L, L_token)


def _load_pool(path):
    from .pool import GlobalPool
    return GlobalPool.load(path) if path else None


def _train_configs(args, config, n_pools, d_s):
    from .model import ModelConfig
    from .training import OptimConfig
    model = dict(config.get("model", {}))
    optim = dict(config.get("optim", {}))
    if args.no_gp:
        model["use_gp"] = False
        model.setdefault("padding_mode", "zero")
        if model["padding_mode"] == "sync":
            model["padding_mode"] = "zero"
    if args.no_sa:
        model["use_sa"] = False
    if args.padding:
        model["padding_mode"] = args.padding
    model["n_pools"] = n_pools if model.get("use_gp", True) else model.get("n_pools", 0)
    model["d_s"] = d_s
    if args.seed is not None:
        optim["seed"] = args.seed
    return ModelConfig.from_dict(model), OptimConfig.from_dict(optim)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, run):
    from .data import GeneratorConfig, generate_synthetic_dataset, save_dataset
    cfg = _load_json(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    gen = GeneratorConfig.from_dict(cfg)
    run.inputs.append(args.config)
    run.config = gen.to_dict()
    paths = save_dataset(generate_synthetic_dataset(gen), args.out)
    for p in paths.values():
        run.output(p)
    print(f"wrote dataset to {args.out}")


def cmd_decompose(args, run):
    from .data import load_dataset
    from .stl import STLParams, stl_decompose
    params = STLParams(**_load_json(args.config))
    run.inputs += [args.data, args.config]
    run.config = {"period": args.period, **dataclasses.asdict(params)}
    ds = load_dataset(args.data)
    rows = []
    for s in ds.series:
        if args.series and s.series_id not in args.series:
            continue
        r = stl_decompose(s.values, args.period, params)
        for t, v, a, b, c in zip(s.timestamps.tolist(), s.values, r.seasonal, r.trend, r.residual):
            rows.append([s.series_id, t, _fmt(v), _fmt(a), _fmt(b), _fmt(c)])
    os.makedirs(args.out, exist_ok=True)
    run.output(_write_csv(os.path.join(args.out, "decomposition.csv"),
                          ["series_id", "timestamp", "value", "seasonal", "trend", "residual"], rows))
    print(f"decomposed {len({r[0] for r in rows})} series")


def cmd_build_pool(args, run):
    from .data import chronological_split, fit_normalizers, load_dataset
    from .pool import (VadeConfig, assign_clusters, build_global_pool, compute_bic, elbow_choice,
                       pool_provenance, seasonal_windows, train_vade)
    cfg = _load_json(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    vcfg = VadeConfig.from_dict(cfg)
    candidates = [args.pools] if args.pools else sorted({int(p) for p in args.candidates.split(",")})
    run.inputs += [args.data, args.config]
    run.config = {"vade": vcfg.to_dict(), "candidates": candidates, "stride": args.stride,
                  "T2": args.T2}
    ds = load_dataset(args.data)
    splits = chronological_split(ds)
    norms = fit_normalizers(ds, splits[0].bounds, args.T2)
    sw = seasonal_windows(splits[0], norms, args.T2, args.stride)
    bics, models = {}, {}
    for p in candidates:
        models[p] = train_vade(sw, p, vcfg)
        bics[p] = compute_bic(models[p], sw)
        print(f"P={p}: BIC {bics[p]:.2f}")
    best = elbow_choice(bics)
    os.makedirs(args.out, exist_ok=True)
    run.output(_write_csv(os.path.join(args.out, "bic.csv"), ["P", "bic", "selected"],
                          [[p, _fmt(bics[p]), int(p == best)] for p in candidates]))
    prov = pool_provenance(splits[0], vcfg, best, args.stride, args.T2)
    prov["created"] = None  # no wall-clock stamp, so reruns write identical files
    pool = build_global_pool(sw, assign_clusters(models[best], sw), prov)
    run.output(pool.save(os.path.join(args.out, "pool.json")))
    print(f"selected P={best}; pool has {pool.P} members")


def cmd_train(args, run):
    from .training import save_checkpoint, train_model
    config = _load_json(args.config)
    if not args.no_gp and not args.pool:
        raise StateError("pool file required (pass --pool or --no-gp)")
    pool = None if args.no_gp else _load_pool(args.pool)
    from .data import load_dataset
    d_s = load_dataset(args.data).d_s
    mcfg, ocfg = _train_configs(args, config, pool.P if pool else 0, d_s)
    run.inputs += [args.data, args.pool, args.config]
    run.config = {"model": mcfg.to_dict(), "optim": ocfg.to_dict()}
    prep = _prepare(args, mcfg)
    res = train_model(mcfg, prep, pool, ocfg, log=print)
    os.makedirs(args.out, exist_ok=True)
    norm_ref = {sid: n.to_dict() for sid, n in sorted(prep.normalizers.items())}
    for p in save_checkpoint(os.path.join(args.out, "model.pt"), res, norm_ref):
        run.output(p)
    run.output(_write_csv(os.path.join(args.out, "history.csv"), ["epoch", "train_loss", "val_loss"],
                          [[h["epoch"], "" if h["train_loss"] is None else _fmt(h["train_loss"]),
                            _fmt(h["val_loss"])] for h in res.history]))
    print(f"best epoch {res.best_epoch}, val MSE {res.best_val_loss:.5f}")


def _load_model(args, run):
    from .training import load_checkpoint
    pool = _load_pool(args.pool)
    model, sidecar = load_checkpoint(args.checkpoint, pool)
    run.inputs += [args.data, args.checkpoint, args.checkpoint + ".json", args.pool]
    run.config = {"checkpoint_config": sidecar["model_config"]}
    return model, pool if model.config.use_gp else None


def _split_windows(prep, name):
    return {"train": prep.train, "val": prep.val, "test": prep.test}[name]


def cmd_eval(args, run):
    from .training import evaluate, seasonal_naive_baseline
    model, pool = _load_model(args, run)
    run.config.update(split=args.split, tag=args.tag, raw_scale=args.raw_scale)
    prep = _prepare(args, model.config)
    ws = _split_windows(prep, args.split)
    rep = evaluate(model, ws, pool, args.tag, args.raw_scale, prep.normalizers)
    base = seasonal_naive_baseline(ws, tag_filter=args.tag, raw_scale=args.raw_scale,
                                   normalizers=prep.normalizers)
    os.makedirs(args.out, exist_ok=True)
    rows = [["dyneformer", r["tag"], _fmt(r["mse"]), _fmt(r["mae"]), r["n_samples"], rep.scale]
            for r in rep.rows()]
    rows += [["seasonal_naive", r["tag"], _fmt(r["mse"]), _fmt(r["mae"]), r["n_samples"], base.scale]
             for r in base.rows()]
    run.output(_write_csv(os.path.join(args.out, "eval_report.csv"),
                          ["model", "tag", "mse", "mae", "n_samples", "scale"], rows))
    for r in rep.rows():
        print(f"{r['tag']:>11}: MSE {r['mse']:.4f} MAE {r['mae']:.4f} (n={r['n_samples']}, {rep.scale})")


def cmd_ablate(args, run):
    from .training import ablation_suite
    config = _load_json(args.config)
    pool = _load_pool(args.pool)
    from .data import load_dataset
    mcfg, ocfg = _train_configs(args, config, pool.P, load_dataset(args.data).d_s)
    seeds = [int(s) for s in args.seeds.split(",")]
    run.inputs += [args.data, args.pool, args.config]
    run.config = {"model": mcfg.to_dict(), "optim": ocfg.to_dict(), "seeds": seeds}
    prep = _prepare(args, mcfg)
    res = ablation_suite(prep, pool, mcfg, ocfg, seeds, log=print)
    os.makedirs(args.out, exist_ok=True)
    run.output(_write_text(os.path.join(args.out, "ablation.csv"), res.to_csv()))
    run.output(_write_text(os.path.join(args.out, "ablation.md"), res.to_markdown()))
    print(res.to_markdown())


def _write_text(path, text):
    with open(path, "w") as fh:
        fh.write(text)
    return path


def _billing(spec):
    from .usecase import BillingSpec, FixedSelector, PeakSelector
    if spec == "peak":
        return BillingSpec()
    if spec.startswith("hour:"):
        h = int(spec.split(":", 1)[1])
        return BillingSpec(FixedSelector(hour=h), PeakSelector())
    raise StateError(f"unknown billing rule {spec!r} (use 'peak' or 'hour:H')")


def cmd_usecase(args, run):
    from .usecase import usecase_report
    model, pool = _load_model(args, run)
    run.config.update(billing=args.billing)
    prep = _prepare(args, model.config)
    rep = usecase_report(model, prep, pool, _billing(args.billing))
    os.makedirs(args.out, exist_ok=True)
    text = rep.to_csv()
    run.output(_write_text(os.path.join(args.out, "depreciation.csv"), text))
    print(text, end="")


def cmd_export_report(args, run):
    from .training import predict
    model, pool = _load_model(args, run)
    run.config.update(split=args.split, tag=args.tag)
    prep = _prepare(args, model.config)
    ws = _split_windows(prep, args.split)
    if args.tag:
        ws = ws.subset(np.flatnonzero(np.asarray(ws.tags, dtype=object) == args.tag))
    pr = predict(model, ws, pool)
    ts = ws.target_timestamps()
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for i in range(len(ws)):
        for j in range(ws.L):
            rows.append([ws.series_ids[i], int(ws.window_start[i]), int(ts[i, j]), ws.tags[i],
                         _fmt(pr.y[i, j]), _fmt(pr.y_hat[i, j])])
    run.output(_write_csv(os.path.join(args.out, "predictions.csv"),
                          ["series_id", "window_start", "timestamp", "tag", "y", "y_hat"], rows))
    if pr.merge_weights is not None:
        P = pr.merge_weights.shape[1]
        run.output(_write_csv(
            os.path.join(args.out, "merge_weights.csv"),
            ["series_id", "window_start", "tag"] + [f"w_{p}" for p in range(P)],
            [[ws.series_ids[i], int(ws.window_start[i]), ws.tags[i],
              *map(_fmt, pr.merge_weights[i])] for i in range(len(ws))]))
    png = _maybe_plot(args.out, ws, pr)
    if png:
        print(f"wrote {png}")
    print(f"exported {len(ws)} windows")


def _maybe_plot(out_dir, ws, pr):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return None
    fig, ax = plt.subplots(figsize=(8, 3))
    i = 0
    x = np.arange(ws.T + ws.L)
    ax.plot(x[:ws.T], ws.encoder_input[i, :, 0], label="history")
    ax.plot(x[ws.T:], pr.y[i], label="actual")
    ax.plot(x[ws.T:], pr.y_hat[i], label="forecast")
    ax.legend()
    path = os.path.join(out_dir, "forecast_example.png")
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def cmd_replay(args, run):
    m = _load_json(args.manifest)
    cwd = os.getcwd()
    try:
        os.chdir(m.get("cwd", cwd))
        for path, digest in m["inputs"].items():
            if os.path.exists(path) and sha256_file(path) != digest:
                raise StateError(f"input {path} changed since the manifest was written")
        code = main(m["argv"], _replaying=True)
        if code != 0:
            raise StateError(f"replayed command exited with {code}")
        bad = [p for p, d in m["outputs"].items() if sha256_file(p) != d]
    finally:
        os.chdir(cwd)
    if bad:
        raise StateError("outputs differ from the manifest: " + ", ".join(bad))
    print(f"replayed {m['command']}: {len(m['outputs'])} outputs identical")


# ---------------------------------------------------------------- parser

COMMANDS = {
    "gen-data": cmd_gen_data, "decompose": cmd_decompose, "build-pool": cmd_build_pool,
    "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "usecase": cmd_usecase,
    "export-report": cmd_export_report, "replay": cmd_replay,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="dyneformer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_, data=True, out=True):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int)
        if data:
            p.add_argument("--data", required=True, help="dataset directory")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
        return p

    p = add("gen-data", "generate a synthetic dataset", data=False)
    p = add("decompose", "STL decomposition of every series")
    p.add_argument("--period", type=int, default=24)
    p.add_argument("--series", nargs="*", help="restrict to these series ids")

    p = add("build-pool", "cluster seasonal windows and write the global pool")
    p.add_argument("--candidates", default="2,3,4,5,6,7,8")
    p.add_argument("--pools", type=int, help="fixed pool size (skips selection)")
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--T2", type=int, default=48)

    def model_flags(p):
        p.add_argument("--pool")
        p.add_argument("--padding", choices=("sync", "zero"))
        p.add_argument("--no-gp", action="store_true")
        p.add_argument("--use-gp", dest="no_gp", action="store_false")
        p.add_argument("--no-sa", action="store_true")

    p = add("train", "train the forecaster")
    model_flags(p)
    p = add("ablate", "train full / -GP / -S / 0Padding variants over seeds")
    model_flags(p)
    p.add_argument("--seeds", default="0,1,2")

    for name, help_ in (("eval", "per-tag metrics of a checkpoint"),
                        ("usecase", "depreciation-rate ranking report"),
                        ("export-report", "prediction and merge-weight CSVs")):
        p = add(name, help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--pool")
        if name != "usecase":
            p.add_argument("--split", choices=("train", "val", "test"), default="test")
            p.add_argument("--tag", choices=("steady", "app_switch", "new_device", "new_app"))
        if name == "eval":
            p.add_argument("--raw-scale", action="store_true")
        if name == "usecase":
            p.add_argument("--billing", default="peak", help="'peak' or 'hour:H'")

    p = sub.add_parser("replay", help="rerun a command from its manifest and verify outputs")
    p.add_argument("--manifest", required=True)
    return parser


def main(argv=None, _replaying=False):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if hasattr(args, "threads"):
        import torch
        torch.set_num_threads(max(1, args.threads))
    run = _Run(args, argv)
    try:
        COMMANDS[args.command](args, run)
        if args.command != "replay":
            run.manifest()
    except (DyneformerError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
