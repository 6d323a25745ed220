"""Global pattern pool: VaDE clustering of seasonal windows and mean pooling.

Pipeline: seasonal windows of the training split -> :func:`train_vade`
(autoencoder pretraining, EM on latent means, joint ELBO fine-tuning) ->
:func:`assign_clusters` -> :func:`build_global_pool`. :func:`select_pool_size`
picks the number of pools from the BIC curve.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np
import torch
from sklearn.mixture import GaussianMixture
from torch import nn

from .data.preprocess import Split
from .errors import ConfigError, DataError, DimensionError, TrainingDiverged
from .stl import STLParams, stl_decompose

POOL_FORMAT_VERSION = 1


@dataclass
class SeasonalWindows:
    values: np.ndarray  # N x T2
    series_ids: np.ndarray
    window_start: np.ndarray

    def __len__(self):
        return self.values.shape[0]

    @property
    def T2(self):
        return self.values.shape[1]


def seasonal_windows(split: Split, normalizers, T2=48, stride=1, period=24,
                     stl_params: STLParams | None = None) -> SeasonalWindows:
    """Sliding windows over the seasonal component of each normalized series in ``split``."""
    ds = split.dataset
    vals, ids, starts = [], [], []
    for sid in split.series_ids:
        s = ds[sid]
        z = normalizers[sid].apply(s.values[split.start:split.stop])
        ts = s.timestamps[split.start:split.stop]
        if z.size < max(T2, 2 * period):
            continue
        seasonal = stl_decompose(z, period, stl_params).seasonal
        offs = np.arange(0, z.size - T2 + 1, stride)
        vals.append(seasonal[offs[:, None] + np.arange(T2)[None, :]])
        ids.append(np.full(offs.size, sid, dtype=object))
        starts.append(ts[offs])
    if not vals:
        raise DataError(f"no seasonal windows of length {T2} in {split.name} split")
    return SeasonalWindows(np.concatenate(vals), np.concatenate(ids), np.concatenate(starts))


def split_digest(split: Split):
    """Content hash of the raw values a split exposes."""
    h = hashlib.sha256()
    h.update(f"{split.name}:{split.start}:{split.stop}".encode())
    for sid in split.series_ids:
        s = split.dataset[sid]
        h.update(sid.encode())
        h.update(np.ascontiguousarray(s.timestamps[split.start:split.stop]).tobytes())
        h.update(np.ascontiguousarray(s.values[split.start:split.stop]).tobytes())
    return h.hexdigest()


def _as_array(windows):
    if isinstance(windows, SeasonalWindows):
        return windows.values
    return np.asarray(windows, dtype=np.float64)


@dataclass
class VadeConfig:
    latent_dim: int = 10
    hidden: tuple = (256, 64)
    pretrain_epochs: int = 40
    finetune_epochs: int = 20
    lr: float = 1e-3
    finetune_lr: float = 5e-4
    batch_size: int = 128
    obs_var: float = 0.05
    em_restarts: int = 3
    joint: bool = True
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.latent_dim < 1 or not self.hidden or min(self.hidden) < 1:
            raise ConfigError("latent_dim and hidden widths must be positive")
        if self.lr <= 0 or self.finetune_lr <= 0 or self.obs_var <= 0 or self.batch_size < 1:
            raise ConfigError("lr, obs_var and batch_size must be positive")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown VaDE keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


class VadeModel(nn.Module):
    """Fully connected autoencoder with a diagonal Gaussian-mixture prior on the latent."""

    def __init__(self, input_dim, n_clusters, latent_dim=10, hidden=(256, 64)):
        super().__init__()
        self.input_dim = input_dim
        self.n_clusters = n_clusters
        self.latent_dim = latent_dim
        layers, width = [], input_dim
        for h in hidden:
            layers += [nn.Linear(width, h), nn.ReLU()]
            width = h
        self.encoder = nn.Sequential(*layers)
        self.mu_head = nn.Linear(width, latent_dim)
        self.logvar_head = nn.Linear(width, latent_dim)
        layers, width = [], latent_dim
        for h in reversed(hidden):
            layers += [nn.Linear(width, h), nn.ReLU()]
            width = h
        layers.append(nn.Linear(width, input_dim))
        self.decoder = nn.Sequential(*layers)
        # mixture parameters stay in double precision
        self.pi_logits = nn.Parameter(torch.zeros(n_clusters, dtype=torch.float64))
        self.means = nn.Parameter(torch.zeros(n_clusters, latent_dim, dtype=torch.float64))
        self.log_vars = nn.Parameter(torch.zeros(n_clusters, latent_dim, dtype=torch.float64))
        self.history = {}

    def encode(self, x):
        h = self.encoder(x)
        return self.mu_head(h), self.logvar_head(h)

    def decode(self, z):
        return self.decoder(z)

    def set_gmm(self, weights, means, variances):
        weights = np.asarray(weights, dtype=np.float64)
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ConfigError("mixture weights must be positive and sum to 1")
        if np.any(np.asarray(variances) <= 0):
            raise ConfigError("mixture variances must be positive")
        with torch.no_grad():
            self.pi_logits.copy_(torch.as_tensor(np.log(weights)))
            self.means.copy_(torch.as_tensor(np.asarray(means, dtype=np.float64)))
            self.log_vars.copy_(torch.as_tensor(np.log(np.asarray(variances, dtype=np.float64))))

    def gmm_params(self):
        """``(weights, means, variances)`` as float64 arrays."""
        with torch.no_grad():
            w = torch.softmax(self.pi_logits, 0).numpy().copy()
            return w, self.means.numpy().copy(), torch.exp(self.log_vars).numpy().copy()

    @torch.no_grad()
    def latent_means(self, windows):
        x = torch.as_tensor(_as_array(windows), dtype=torch.float32)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(f"expected windows of width {self.input_dim}, got {tuple(x.shape)}")
        self.eval()
        return self.encode(x)[0].double().numpy()

    @torch.no_grad()
    def reconstruction_mse(self, windows):
        x = torch.as_tensor(_as_array(windows), dtype=torch.float32)
        self.eval()
        mu, _ = self.encode(x)
        return float(((self.decode(mu) - x) ** 2).mean())


def gmm_log_joint(z, weights, means, variances):
    """``log pi_c + log N(z; mu_c, diag var_c)`` for every row of ``z`` and component ``c``."""
    z = np.asarray(z, dtype=np.float64)
    diff = z[:, None, :] - means[None, :, :]
    log_pdf = -0.5 * (np.log(2 * np.pi * variances)[None] + diff ** 2 / variances[None]).sum(-1)
    return np.log(weights)[None, :] + log_pdf


def _logsumexp(a, axis):
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def gmm_responsibilities(z, weights, means, variances):
    lj = gmm_log_joint(z, weights, means, variances)
    return np.exp(lj - _logsumexp(lj, 1)[:, None])


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    responsibilities: np.ndarray


def assign_clusters(model: VadeModel, windows) -> ClusterAssignment:
    """Posterior over mixture components at each window's latent mean."""
    z = model.latent_means(windows)
    resp = gmm_responsibilities(z, *model.gmm_params())
    return ClusterAssignment(resp.argmax(axis=1), resp)


def bic_param_count(n_clusters, latent_dim):
    return (n_clusters - 1) + 2 * n_clusters * latent_dim


def compute_bic(model: VadeModel, windows):
    """``k ln n - 2 ln L`` of the mixture on the windows' latent means."""
    z = model.latent_means(windows)
    log_lik = float(_logsumexp(gmm_log_joint(z, *model.gmm_params()), 1).sum())
    n = z.shape[0]
    return bic_param_count(model.n_clusters, model.latent_dim) * math.log(n) - 2.0 * log_lik


def _batches(n, batch_size, gen):
    perm = torch.randperm(n, generator=gen)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _check_finite(loss, stage):
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss during {stage}")


def _elbo_loss(model, x, gen, obs_var):
    mu, logvar = model.encode(x)
    eps = torch.randn(mu.shape, generator=gen)
    z = mu + torch.exp(0.5 * logvar) * eps
    recon = 0.5 * ((model.decode(z) - x) ** 2).sum(1) / obs_var
    z64, mu64, logvar64 = z.double(), mu.double(), logvar.double()
    log_pi = torch.log_softmax(model.pi_logits, 0)
    var_c = torch.exp(model.log_vars)
    log_pdf = -0.5 * (math.log(2 * math.pi) + model.log_vars[None]
                      + (z64[:, None, :] - model.means[None]) ** 2 / var_c[None]).sum(-1)
    gamma = torch.softmax(log_pi[None] + log_pdf, 1)
    kl_z = 0.5 * (gamma * (model.log_vars[None] + torch.exp(logvar64)[:, None, :] / var_c[None]
                           + (mu64[:, None, :] - model.means[None]) ** 2 / var_c[None]).sum(-1)).sum(1)
    kl_c = (gamma * (torch.log(gamma.clamp_min(1e-12)) - log_pi[None])).sum(1)
    entropy = 0.5 * (1.0 + logvar64).sum(1)
    return (recon.double() + kl_z + kl_c - entropy).mean()


def train_vade(windows, n_clusters, config: VadeConfig | None = None) -> VadeModel:
    """Pretrain the autoencoder on MSE, fit the mixture by EM, then fine-tune on the ELBO."""
    config = config or VadeConfig()
    x_np = _as_array(windows)
    if n_clusters < 1:
        raise ConfigError("n_clusters must be >= 1")
    if x_np.ndim != 2 or x_np.shape[0] < 10 * n_clusters:
        raise DataError(f"need at least {10 * n_clusters} windows for {n_clusters} clusters, "
                        f"got {x_np.shape[0] if x_np.ndim == 2 else 0}")
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    x = torch.as_tensor(x_np, dtype=torch.float32)
    model = VadeModel(x.shape[1], n_clusters, config.latent_dim, config.hidden)
    initial = model.reconstruction_mse(x)

    ae_params = [p for n, p in model.named_parameters() if not n.startswith(("pi_", "means", "log_vars"))]
    opt = torch.optim.Adam(ae_params, lr=config.lr)
    model.train()
    for _ in range(config.pretrain_epochs):
        for idx in _batches(len(x), config.batch_size, gen):
            xb = x[idx]
            loss = ((model.decode(model.encode(xb)[0]) - xb) ** 2).mean()
            _check_finite(loss, "pretraining")
            opt.zero_grad()
            loss.backward()
            opt.step()
    pretrained = model.reconstruction_mse(x)

    z = model.latent_means(x)
    if n_clusters == 1:
        var = z.var(axis=0) + 1e-6
        model.set_gmm([1.0], z.mean(axis=0, keepdims=True), var[None, :])
    else:
        gmm = GaussianMixture(n_clusters, covariance_type="diag", n_init=config.em_restarts,
                              random_state=config.seed, reg_covar=1e-6)
        gmm.fit(z)
        w = np.clip(gmm.weights_, 1e-12, None)
        model.set_gmm(w / w.sum(), gmm.means_, gmm.covariances_)

    if config.joint and config.finetune_epochs > 0:
        # start q(z|x) as narrow as the fitted components; the untrained head gives unit variance
        with torch.no_grad():
            model.logvar_head.weight.zero_()
            model.logvar_head.bias.copy_(model.log_vars.mean(0).float())
        opt = torch.optim.Adam(model.parameters(), lr=config.finetune_lr)
        model.train()
        for _ in range(config.finetune_epochs):
            for idx in _batches(len(x), config.batch_size, gen):
                loss = _elbo_loss(model, x[idx], gen, config.obs_var)
                _check_finite(loss, "fine-tuning")
                opt.zero_grad()
                loss.backward()
                opt.step()
    model.eval()
    final = model.reconstruction_mse(x)
    if not math.isfinite(final):
        raise TrainingDiverged("non-finite reconstruction after training")
    model.history = {"initial_recon_mse": initial, "pretrained_recon_mse": pretrained,
                     "final_recon_mse": final, "config": config.to_dict()}
    return model


@dataclass
class PoolSizeSelection:
    best: int
    bic: dict
    models: dict = field(repr=False, default_factory=dict)


def elbow_choice(bics, tolerance=0.01, range_tolerance=0.05):
    """Smallest P whose BIC is close enough to the best (lowest) BIC.

    Close enough means within ``tolerance * |min BIC|`` or within
    ``range_tolerance`` of the spread between the worst and best candidate.
    The absolute BIC level moves with the scale of the learned latent space,
    the spread does not.
    """
    if not bics:
        raise ConfigError("no candidate pool sizes")
    best, worst = min(bics.values()), max(bics.values())
    slack = max(tolerance * abs(best), range_tolerance * (worst - best))
    return min(p for p, b in bics.items() if b <= best + slack)


def select_pool_size(windows, candidate_Ps, config: VadeConfig | None = None, tolerance=0.01,
                     range_tolerance=0.05):
    candidates = list(candidate_Ps)
    if not candidates:
        raise ConfigError("candidate_Ps is empty")
    if candidates != sorted(set(candidates)):
        raise ConfigError("candidate_Ps must be strictly ascending")
    bics, models = {}, {}
    for p in candidates:
        model = train_vade(windows, p, config)
        bics[p] = compute_bic(model, windows)
        models[p] = model
    return PoolSizeSelection(elbow_choice(bics, tolerance, range_tolerance), bics, models)


@dataclass
class GlobalPool:
    pools: np.ndarray  # P x T2
    member_counts: np.ndarray
    provenance: dict = field(default_factory=dict)
    period: int = 24

    def __post_init__(self):
        self.pools = np.asarray(self.pools, dtype=np.float64)
        self.member_counts = np.asarray(self.member_counts, dtype=np.int64)
        if self.pools.ndim != 2 or self.pools.shape[0] != self.member_counts.size:
            raise DataError("pools and member_counts disagree")
        if np.any(self.member_counts < 1):
            raise DataError("every pool needs at least one member")

    @property
    def P(self):
        return self.pools.shape[0]

    @property
    def T2(self):
        return self.pools.shape[1]

    def to_dict(self):
        return {"version": POOL_FORMAT_VERSION, "period": self.period, "T2": self.T2, "P": self.P,
                "pools": self.pools.tolist(), "member_counts": self.member_counts.tolist(),
                "provenance": self.provenance}

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != POOL_FORMAT_VERSION:
            raise DataError(f"unsupported pool version {d.get('version')}")
        pool = cls(np.array(d["pools"], dtype=np.float64).reshape(d["P"], d["T2"]),
                   d["member_counts"], d.get("provenance", {}), d.get("period", 24))
        return pool

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)
        return path

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def digest(self):
        """Hash of pool content and lineage; creation time is left out."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.pools).tobytes())
        h.update(np.ascontiguousarray(self.member_counts).tobytes())
        lineage = {k: v for k, v in self.provenance.items() if k != "created"}
        h.update(json.dumps([self.period, lineage], sort_keys=True).encode())
        return h.hexdigest()


def build_global_pool(windows, assignment: ClusterAssignment, provenance=None, period=24) -> GlobalPool:
    """Mean of the member windows of every non-empty cluster."""
    x = _as_array(windows)
    labels = np.asarray(assignment.labels)
    if labels.shape[0] != x.shape[0]:
        raise DataError("assignment does not cover every window")
    n_clusters = assignment.responsibilities.shape[1] if assignment.responsibilities is not None \
        else int(labels.max()) + 1
    rows, counts = [], []
    for c in range(n_clusters):
        members = x[labels == c]
        if members.shape[0] == 0:
            continue
        rows.append(members.mean(axis=0))
        counts.append(members.shape[0])
    if not rows:
        raise DataError("all clusters are empty")
    if len(rows) < n_clusters:
        warnings.warn(f"dropped {n_clusters - len(rows)} empty clusters; P={len(rows)}", stacklevel=2)
    prov = dict(provenance or {})
    prov.setdefault("created", datetime.now(timezone.utc).isoformat())
    return GlobalPool(np.stack(rows), counts, prov, period)


def pool_provenance(train_split: Split, vade_config: VadeConfig, n_clusters, stride, T2):
    return {"train_split_digest": split_digest(train_split), "vade_digest": vade_config.digest(),
            "n_clusters": int(n_clusters), "window_stride": int(stride), "T2": int(T2)}


def pool_from_split(train_split: Split, normalizers, n_clusters, config: VadeConfig | None = None,
                    T2=48, stride=4, period=24, stl_params: STLParams | None = None):
    """Seasonal windows of the training split -> VaDE -> mean-pooled global pool.

    Returns the pool and the trained VaDE model.
    """
    config = config or VadeConfig()
    sw = seasonal_windows(train_split, normalizers, T2, stride, period, stl_params)
    model = train_vade(sw, n_clusters, config)
    assignment = assign_clusters(model, sw)
    prov = pool_provenance(train_split, config, n_clusters, stride, T2)
    return build_global_pool(sw, assignment, prov, period), model
