"""Training loop, metrics, per-behaviour evaluation, gradient checks and ablations."""
from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .data.preprocess import Prepared, WindowSet
from .data.types import BEHAVIOR_TAGS
from .errors import (ConfigError, DimensionError, DyneformerError, EmptySubset, ProvenanceError,
                     StateError, TrainingDiverged)
from .model import DynEformer, GPLayer, ModelBatch, ModelConfig, SALayer
from .pool import GlobalPool, split_digest

CHECKPOINT_VERSION = 1


@dataclass
class OptimConfig:
    learning_rate: float = 1e-4
    batch_size: int = 256
    max_epochs: int = 20
    patience: int = 5
    seed: int = 0
    max_steps_per_epoch: int | None = None
    eval_batch_size: int = 1024

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("max_epochs and patience must be >= 1")
        if self.max_steps_per_epoch is not None and self.max_steps_per_epoch < 1:
            raise ConfigError("max_steps_per_epoch must be >= 1")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown optimiser keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- tensors


@dataclass
class WindowTensors:
    encoder_input: torch.Tensor
    start_token: torch.Tensor
    decoder_marks: torch.Tensor
    static: torch.Tensor
    target: torch.Tensor

    @classmethod
    def from_windows(cls, ws: WindowSet, dtype=torch.float32):
        t = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64)).to(dtype)  # noqa: E731
        return cls(t(ws.encoder_input), t(ws.start_token), t(ws.decoder_marks), t(ws.static),
                   t(ws.target))

    def __len__(self):
        return self.target.shape[0]

    def batch(self, idx=slice(None)):
        return ModelBatch(self.encoder_input[idx], self.start_token[idx], self.decoder_marks[idx],
                          self.static[idx])


def _pool_arg(pool):
    if pool is None:
        return None
    return pool.pools if isinstance(pool, GlobalPool) else np.asarray(pool)


def pool_hash(pool):
    if pool is None:
        return None
    if isinstance(pool, GlobalPool):
        return pool.digest()
    return hashlib.sha256(np.ascontiguousarray(pool, dtype=np.float64).tobytes()).hexdigest()


# ---------------------------------------------------------------- metrics


def metrics(y, y_hat):
    """Mean squared and mean absolute error over every element."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise DimensionError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    if y.size == 0:
        raise EmptySubset("no elements to score")
    d = y - y_hat
    return {"mse": float(np.mean(d * d)), "mae": float(np.mean(np.abs(d)))}


@dataclass
class TagMetrics:
    mse: float
    mae: float
    n_samples: int


@dataclass
class EvalReport:
    per_tag: dict
    overall: TagMetrics
    scale: str = "normalized"

    def rows(self):
        out = [dict(tag=t, **dataclasses.asdict(m)) for t, m in self.per_tag.items()]
        out.append(dict(tag="overall", **dataclasses.asdict(self.overall)))
        return out

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tag", "mse", "mae", "n_samples", "scale"])
        for r in self.rows():
            w.writerow([r["tag"], repr(r["mse"]), repr(r["mae"]), r["n_samples"], self.scale])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def report_from_predictions(y, y_hat, tags, tag_filter=None, scale="normalized") -> EvalReport:
    """Group per-window errors by behaviour tag; ``tag_filter`` keeps only the listed tags."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise DimensionError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    tags = np.asarray(tags, dtype=object)
    if isinstance(tag_filter, str):
        tag_filter = [tag_filter]
    keep = np.ones(len(tags), bool) if not tag_filter else np.isin(tags, list(tag_filter))
    if not keep.any():
        raise EmptySubset(f"no samples with tags {tag_filter}")
    y, y_hat, tags = y[keep], y_hat[keep], tags[keep]
    per_tag = {}
    order = [t for t in BEHAVIOR_TAGS if t in set(tags)] + sorted(set(tags) - set(BEHAVIOR_TAGS))
    for t in order:
        m = tags == t
        r = metrics(y[m], y_hat[m])
        per_tag[t] = TagMetrics(r["mse"], r["mae"], int(m.sum()))
    r = metrics(y, y_hat)
    return EvalReport(per_tag, TagMetrics(r["mse"], r["mae"], int(len(tags))), scale)


def _invert(values, series_ids, normalizers):
    out = np.empty(values.shape, dtype=np.float64)
    for i, sid in enumerate(series_ids):
        out[i] = normalizers[sid].invert(values[i])
    return out


# ---------------------------------------------------------------- prediction


@dataclass
class Predictions:
    y: np.ndarray  # N x L, normalized
    y_hat: np.ndarray
    merge_weights: np.ndarray | None  # N x P from the last GP block


@torch.no_grad()
def predict(model: DynEformer, windows, pool=None, batch_size=1024) -> Predictions:
    model.eval()
    dtype = model.head.weight.dtype
    wt = windows if isinstance(windows, WindowTensors) else WindowTensors.from_windows(windows, dtype)
    p = _pool_arg(pool)
    preds, weights = [], []
    for a in range(0, len(wt), batch_size):
        out, trace = model(wt.batch(slice(a, a + batch_size)), p)
        preds.append(out[..., 0].double().numpy())
        if trace.final_weights is not None:
            weights.append(trace.final_weights.double().numpy())
    L = model.config.L
    y_hat = np.concatenate(preds) if preds else np.zeros((0, L))
    w = np.concatenate(weights) if weights else None
    return Predictions(wt.target.double().numpy(), y_hat, w)


def evaluate(model: DynEformer, windows: WindowSet, pool=None, tag_filter=None, raw_scale=False,
             normalizers=None, batch_size=1024) -> EvalReport:
    """Per-tag and overall metrics; normalized scale unless ``raw_scale``."""
    if windows.static.shape[1] != model.config.d_s or windows.encoder_input.shape[2] != model.config.d_t:
        raise DimensionError("checkpoint and windows disagree on d_t / d_s")
    tags = np.asarray(windows.tags, dtype=object)
    if tag_filter:
        keep = np.isin(tags, [tag_filter] if isinstance(tag_filter, str) else list(tag_filter))
        if not keep.any():
            raise EmptySubset(f"no samples with tags {tag_filter}")
        windows = windows.subset(np.flatnonzero(keep))
    pr = predict(model, windows, pool, batch_size)
    return _report(pr.y, pr.y_hat, windows, raw_scale, normalizers)


def _report(y, y_hat, windows, raw_scale, normalizers):
    if raw_scale:
        if normalizers is None:
            raise StateError("raw-scale metrics need the per-series normalizers")
        y = _invert(y, windows.series_ids, normalizers)
        y_hat = _invert(y_hat, windows.series_ids, normalizers)
    return report_from_predictions(y, y_hat, windows.tags, scale="raw" if raw_scale else "normalized")


def seasonal_naive_forecast(encoder_values, L, period=24):
    """Horizon step ``j`` repeats the encoder value ``period`` steps before it (cyclically)."""
    x = np.asarray(encoder_values, dtype=np.float64)
    T = x.shape[1]
    if T < period:
        raise DimensionError(f"encoder length {T} shorter than period {period}")
    idx = T - period + (np.arange(L) % period)
    return x[:, idx]


def seasonal_naive_baseline(windows: WindowSet, period=24, tag_filter=None, raw_scale=False,
                            normalizers=None) -> EvalReport:
    tags = np.asarray(windows.tags, dtype=object)
    if tag_filter:
        keep = np.isin(tags, [tag_filter] if isinstance(tag_filter, str) else list(tag_filter))
        if not keep.any():
            raise EmptySubset(f"no samples with tags {tag_filter}")
        windows = windows.subset(np.flatnonzero(keep))
    y_hat = seasonal_naive_forecast(windows.encoder_input[:, :, 0], windows.L, period)
    return _report(np.asarray(windows.target, np.float64), y_hat, windows, raw_scale, normalizers)


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: DynEformer
    history: list
    best_epoch: int
    best_val_loss: float
    initial_val_loss: float
    initial_train_loss: float
    model_config: ModelConfig
    optim: OptimConfig
    pool_hash: str | None
    wall_seconds: float = 0.0


def check_provenance(pool: GlobalPool, prepared: Prepared):
    """The pool must come from the training split of ``prepared``'s dataset."""
    if not isinstance(pool, GlobalPool):
        return
    expected = pool.provenance.get("train_split_digest")
    actual = split_digest(prepared.splits[0])
    if expected != actual:
        raise ProvenanceError("global pool was not built from this dataset's training split "
                              f"(pool {str(expected)[:12]}, data {actual[:12]})")


@torch.no_grad()
def _mean_loss(model, wt: WindowTensors, pool, batch_size):
    model.eval()
    total, n = 0.0, 0
    for a in range(0, len(wt), batch_size):
        out, _ = model(wt.batch(slice(a, a + batch_size)), pool)
        tgt = wt.target[a:a + batch_size]
        total += float(((out[..., 0] - tgt) ** 2).sum())
        n += tgt.numel()
    return total / n


def _check_loss(value, where):
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss during {where}")


def seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))


def train_model(model_config: ModelConfig, prepared: Prepared, pool=None, optim: OptimConfig | None = None,
                verify_provenance=True, log=None) -> TrainResult:
    """Adam on MSE over normalized targets with early stopping on validation MSE."""
    optim = optim or OptimConfig()
    if model_config.use_gp:
        if pool is None:
            raise StateError("pool file required when the GP layers are enabled")
        p = _pool_arg(pool)
        if p.shape != (model_config.n_pools, model_config.T):
            raise DimensionError(f"pool is {p.shape}, model expects {(model_config.n_pools, model_config.T)}")
        if verify_provenance:
            check_provenance(pool, prepared)
    else:
        pool = None
    if len(prepared.train) == 0 or len(prepared.val) == 0:
        raise EmptySubset("training and validation windows are required")
    started = time.perf_counter()
    seed_everything(optim.seed)
    model = DynEformer(model_config)
    p = _pool_arg(pool)
    train = WindowTensors.from_windows(prepared.train)
    val = WindowTensors.from_windows(prepared.val)
    opt = torch.optim.Adam(model.parameters(), lr=optim.learning_rate)
    gen = torch.Generator().manual_seed(optim.seed)

    initial_val = _mean_loss(model, val, p, optim.eval_batch_size)
    _check_loss(initial_val, "initial validation")
    history = [{"epoch": 0, "train_loss": None, "val_loss": initial_val}]
    best_val, best_epoch = initial_val, 0
    best_state = copy.deepcopy(model.state_dict())
    initial_train = None
    stale = 0
    n = len(train)
    for epoch in range(1, optim.max_epochs + 1):
        model.train()
        perm = torch.randperm(n, generator=gen)
        steps = math.ceil(n / optim.batch_size)
        if optim.max_steps_per_epoch is not None:
            steps = min(steps, optim.max_steps_per_epoch)
        total = 0.0
        for s in range(steps):
            idx = perm[s * optim.batch_size:(s + 1) * optim.batch_size]
            out, _ = model(train.batch(idx), p)
            loss = ((out[..., 0] - train.target[idx]) ** 2).mean()
            lv = float(loss.detach())
            _check_loss(lv, f"epoch {epoch}")
            if initial_train is None:
                initial_train = lv
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += lv
        val_loss = _mean_loss(model, val, p, optim.eval_batch_size)
        _check_loss(val_loss, f"validation at epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": total / steps, "val_loss": val_loss})
        if log is not None:
            log(f"epoch {epoch}: train {total / steps:.5f} val {val_loss:.5f}")
        if val_loss < best_val:
            best_val, best_epoch, stale = val_loss, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if stale >= optim.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, history, best_epoch, best_val, initial_val, initial_train,
                       model_config, optim, pool_hash(pool), time.perf_counter() - started)


def fit_batch(model: DynEformer, batch: ModelBatch, target, pool=None, steps=1000, lr=1e-3,
              dropout_off=True):
    """Repeatedly fit one batch; returns the per-step losses (capacity check)."""
    if dropout_off:
        model.eval()
    else:
        model.train()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    p = _pool_arg(pool)
    losses = []
    for _ in range(steps):
        out, _ = model(batch, p)
        loss = ((out[..., 0] - target) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return losses


# ---------------------------------------------------------------- checkpoints


def _file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(path, result: TrainResult, normalizer_ref=None):
    """Parameter blob at ``path`` plus a JSON sidecar at ``path + '.json'``."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    state = {k: v.detach().clone() for k, v in result.model.state_dict().items()}
    torch.save({"version": CHECKPOINT_VERSION, "state_dict": state}, path)
    sidecar = {
        "version": CHECKPOINT_VERSION,
        "model_config": result.model_config.to_dict(),
        "optim": result.optim.to_dict(),
        "pool_hash": result.pool_hash,
        "normalizers": normalizer_ref,
        "seed": result.optim.seed,
        "history": result.history,
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "blob_sha256": _file_sha256(path),
    }
    with open(path + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    return path, path + ".json"


def load_checkpoint(path, pool=None):
    """Rebuild the model; refuses a pool whose hash differs from the one trained with."""
    with open(path + ".json") as fh:
        sidecar = json.load(fh)
    if sidecar.get("version") != CHECKPOINT_VERSION:
        raise StateError(f"unsupported checkpoint version {sidecar.get('version')}")
    if sidecar.get("blob_sha256") and sidecar["blob_sha256"] != _file_sha256(path):
        raise StateError("checkpoint blob does not match its sidecar")
    config = ModelConfig.from_dict(sidecar["model_config"])
    if config.use_gp:
        if pool is None:
            raise StateError("pool file required to load a model with GP layers")
        if pool_hash(pool) != sidecar["pool_hash"]:
            raise ProvenanceError("pool does not match the pool the checkpoint was trained with")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    model = DynEformer(config)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, sidecar


# ---------------------------------------------------------------- gradient checks


@dataclass
class GradCheckDims:
    b: int = 2
    T: int = 4
    P: int = 3
    d_model: int = 8
    d_s: int = 3
    L: int = 2
    L_token: int = 2
    n_heads: int = 2


def _numeric_vs_analytic(fn, tensors, eps, floor):
    for t in tensors:
        t.requires_grad_(True)
        t.grad = None
    loss = fn()
    grads = torch.autograd.grad(loss, tensors)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            flat = t.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                num = (up - down) / (2 * eps)
                ana = gflat[i].item()
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
    return worst


def gradient_check(layer_kind="gp", dims: GradCheckDims | None = None, eps=1e-5, seed=0, floor=1e-6):
    """Largest relative error between autograd and central differences (double precision).

    Covers every parameter and every input coordinate of a random instance;
    the scalar objective is a fixed random projection of the output. The
    denominator of the relative error is floored at ``floor``: at ``eps=1e-5``
    central differences carry rounding noise near 1e-11, so gradients smaller
    than the floor (often exactly zero, e.g. biases ahead of a layer norm) are
    compared absolutely.
    """
    d = dims or GradCheckDims()
    g = torch.Generator().manual_seed(seed)
    rnd = lambda *shape: torch.randn(*shape, generator=g, dtype=torch.float64)  # noqa: E731
    torch.manual_seed(seed)
    if layer_kind == "affine":
        layer = nn.Linear(d.d_model, d.d_model).double()
        x = rnd(d.b, d.T, d.d_model)
        proj = rnd(d.b, d.T, d.d_model)
        fn = lambda: (layer(x) * proj).sum()  # noqa: E731
        tensors = [x, *layer.parameters()]
    elif layer_kind == "sa":
        layer = SALayer(d.d_model, d.d_s, 0.0).double().eval()
        with torch.no_grad():
            layer.attr_bias.copy_(0.1 * rnd(d.d_s, d.d_model))
        V, S = rnd(d.b, d.T, d.d_model), rnd(d.b, d.d_s)
        proj = rnd(d.b, d.T, d.d_model)
        fn = lambda: (layer(V, S)[0] * proj).sum()  # noqa: E731
        tensors = [V, S, *layer.parameters()]
    elif layer_kind == "gp":
        layer = GPLayer(d.T, d.d_model, d.P).double()
        E, pool = rnd(d.b, d.T, d.d_model), rnd(d.P, d.T)
        proj = rnd(d.b, d.T, d.d_model)
        fn = lambda: (layer(E, pool)[0] * proj).sum()  # noqa: E731
        tensors = [E, pool, *layer.parameters()]
    elif layer_kind == "full":
        cfg = ModelConfig(d_model=d.d_model, n_heads=d.n_heads, n_gp_blocks=2, m_decoder_layers=1,
                          dropout=0.0, T=d.T, L=d.L, L_token=d.L_token, d_t=3, d_s=d.d_s,
                          n_pools=d.P)
        model = DynEformer(cfg).double().eval()
        batch = ModelBatch(rnd(d.b, d.T, 3), rnd(d.b, d.L_token), rnd(d.b, d.L_token + d.L, 2),
                           rnd(d.b, d.d_s))
        pool = rnd(d.P, d.T)
        proj = rnd(d.b, d.L, 1)
        fn = lambda: (model(batch, pool)[0] * proj).sum()  # noqa: E731
        tensors = [batch.encoder_input, batch.start_token, batch.decoder_marks, batch.static, pool,
                   *model.parameters()]
    else:
        raise ConfigError(f"unknown layer kind {layer_kind!r}")
    return _numeric_vs_analytic(fn, tensors, eps, floor)


# ---------------------------------------------------------------- ablation

ABLATION_VARIANTS = {
    "full": {},
    "-GP": {"use_gp": False, "padding_mode": "zero"},
    "-S": {"use_sa": False},
    "0Padding": {"padding_mode": "zero"},
}


def promotion(full_value, variant_value):
    """Relative MAE improvement of the full model over a variant."""
    return (variant_value - full_value) / variant_value


@dataclass
class AblationResult:
    rows: list  # dicts: model_variant, tag, seed, mse, mae
    errors: dict = field(default_factory=dict)  # (variant, seed) -> message
    variants: tuple = tuple(ABLATION_VARIANTS)
    tags: tuple = BEHAVIOR_TAGS

    def median_mae(self, variant, tag):
        vals = [r["mae"] for r in self.rows if r["model_variant"] == variant and r["tag"] == tag]
        return float(np.median(vals)) if vals else float("nan")

    def table(self):
        """Rows = behaviour tags plus 'promotion'; columns = variants; cells = median MAE."""
        out = {tag: {v: self.median_mae(v, tag) for v in self.variants} for tag in self.tags}
        promo = {"full": float("nan")}
        for v in self.variants:
            if v == "full":
                continue
            cells = [promotion(out[t]["full"], out[t][v]) for t in self.tags]
            cells = [c for c in cells if math.isfinite(c)]
            promo[v] = float(np.mean(cells)) if cells else float("nan")
        out["promotion"] = promo
        return out

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model_variant", "tag", "seed", "mse", "mae"])
        for r in self.rows:
            w.writerow([r["model_variant"], r["tag"], r["seed"], repr(r["mse"]), repr(r["mae"])])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def to_markdown(self):
        t = self.table()
        lines = ["| tag | " + " | ".join(self.variants) + " |",
                 "|---|" + "---|" * len(self.variants)]
        for tag in (*self.tags, "promotion"):
            cells = []
            for v in self.variants:
                x = t[tag][v]
                if not math.isfinite(x):
                    cells.append("-")
                elif tag == "promotion":
                    cells.append(f"{100 * x:.0f}%")
                elif v == "full":
                    cells.append(f"{x:.4f}")
                else:
                    cells.append(f"{x:.4f} ({100 * promotion(t[tag]['full'], x):.0f}%)")
            lines.append(f"| {tag} | " + " | ".join(cells) + " |")
        lines.append("")
        lines.append("Median MAE over seeds on the normalized scale; "
                     "promotion = (variant - full) / variant.")
        for (v, s), msg in sorted(self.errors.items()):
            lines.append(f"- {v} seed {s} failed: {msg}")
        return "\n".join(lines) + "\n"


def ablation_suite(prepared: Prepared, pool, base_config: ModelConfig, optim: OptimConfig | None = None,
                   seeds=(0, 1, 2), variants=None, log=None, on_model=None) -> AblationResult:
    """Train every variant for every seed; a failing cell is recorded and skipped."""
    optim = optim or OptimConfig()
    variants = list(variants or ABLATION_VARIANTS)
    if "app_switch" not in set(prepared.test.tags):
        raise EmptySubset("test split has no app_switch windows")
    result = AblationResult([], {}, tuple(variants))
    for v in variants:
        cfg = base_config.variant(**ABLATION_VARIANTS[v])
        for seed in seeds:
            try:
                tr = train_model(cfg, prepared, pool if cfg.use_gp else None,
                                 dataclasses.replace(optim, seed=seed))
                rep = evaluate(tr.model, prepared.test, pool if cfg.use_gp else None)
            except DyneformerError as exc:
                result.errors[(v, seed)] = str(exc)
                continue
            if on_model is not None:
                on_model(v, seed, tr)
            for tag, m in rep.per_tag.items():
                result.rows.append({"model_variant": v, "tag": tag, "seed": seed,
                                    "mse": m.mse, "mae": m.mae})
            if log is not None:
                log(f"{v} seed {seed}: " + ", ".join(f"{t} {m.mae:.4f}" for t, m in rep.per_tag.items()))
    return result
