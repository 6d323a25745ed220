"""Encoder-decoder transformer with global-pool merging and static-context attention.

Encoder: input embedding + sinusoidal positions -> SA layer -> ``n`` blocks of
(full-attention encoder layer, GP layer). Decoder: the same input layer over
the start token, marks and synchronous padding -> SA layer -> ``m`` decoder
layers (causal self-attention, cross-attention on the encoder output) ->
linear head.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, DimensionError, StateError

PADDING_MODES = ("sync", "zero")


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_gp_blocks: int = 2
    m_decoder_layers: int = 1
    feedforward_dim: int | None = None
    dropout: float = 0.1
    T: int = 48
    L: int = 24
    L_token: int = 12
    d_t: int = 3
    d_s: int = 6
    n_pools: int = 0
    use_gp: bool = True
    use_sa: bool = True
    padding_mode: str = "sync"
    share_sa: bool = False

    def __post_init__(self):
        if self.d_model < 2 or self.d_model % 2:
            raise ConfigError(f"d_model must be even, got {self.d_model}")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_gp_blocks < 1:
            raise ConfigError("n_gp_blocks must be >= 1")
        if self.m_decoder_layers < 1:
            raise ConfigError("m_decoder_layers must be >= 1")
        if self.padding_mode not in PADDING_MODES:
            raise ConfigError(f"padding_mode must be one of {PADDING_MODES}")
        if self.padding_mode == "sync" and not self.use_gp:
            raise ConfigError("synchronous padding needs the GP layers (use_gp)")
        if self.use_gp and self.n_pools < 1:
            raise ConfigError("use_gp requires n_pools >= 1")
        if self.use_sa and self.d_s < 1:
            raise ConfigError("use_sa requires static attributes (d_s >= 1)")
        if not 0 <= self.L_token <= self.T:
            raise ConfigError(f"L_token={self.L_token} must lie in [0, T={self.T}]")
        if self.d_t < 2:
            raise ConfigError("d_t must count the value column plus at least one mark")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def ff_dim(self):
        return self.feedforward_dim or 4 * self.d_model

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)

    def variant(self, **changes):
        return dataclasses.replace(self, **changes)


def sinusoidal_encoding(length, d_model):
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    div = torch.pow(10000.0, torch.arange(0, d_model, 2, dtype=torch.float64) / d_model)
    pe = torch.zeros(length, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos / div)
    pe[:, 1::2] = torch.cos(pos / div)
    return pe


class InputEmbedding(nn.Module):
    def __init__(self, d_in, d_model, max_len, dropout):
        super().__init__()
        self.d_in = d_in
        self.proj = nn.Linear(d_in, d_model)
        self.register_buffer("pe", sinusoidal_encoding(max_len, d_model).float(), persistent=False)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"expected {self.d_in} input features, got {x.shape[-1]}")
        if x.shape[1] > self.pe.shape[0]:
            raise DimensionError(f"sequence of {x.shape[1]} exceeds positional table {self.pe.shape[0]}")
        return self.dropout(self.proj(x) + self.pe[:x.shape[1]])


class SALayer(nn.Module):
    """Per-time-step attention over static attributes, added residually.

    Each attribute ``j`` becomes a value token ``s_j * a_j + c_j`` in model
    space; the sequence embedding scores the ``d_s`` tokens at every step.
    """

    def __init__(self, d_model, d_s, dropout):
        super().__init__()
        self.d_s = d_s
        self.query = nn.Linear(d_model, d_s)
        self.attr_weight = nn.Parameter(torch.randn(d_s, d_model) / math.sqrt(d_model))
        self.attr_bias = nn.Parameter(torch.zeros(d_s, d_model))
        self.dropout = nn.Dropout(dropout)
        self.norm = nn.LayerNorm(d_model)

    def forward(self, V, S):
        if S.ndim != 2 or S.shape[-1] != self.d_s:
            raise DimensionError(f"expected static matrix b x {self.d_s}, got {tuple(S.shape)}")
        alpha = torch.softmax(self.query(V), dim=-1)
        values = S[:, :, None] * self.attr_weight[None] + self.attr_bias[None]
        return self.norm(V + self.dropout(alpha @ values)), alpha


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x, memory, causal=False):
        b, t, d = x.shape
        s = memory.shape[1]
        h = self.n_heads
        q = self.q(x).view(b, t, h, -1).transpose(1, 2)
        k = self.k(memory).view(b, s, h, -1).transpose(1, 2)
        v = self.v(memory).view(b, s, h, -1).transpose(1, 2)
        o = F.scaled_dot_product_attention(q, k, v, is_causal=causal)
        return self.out(o.transpose(1, 2).reshape(b, t, d))


def _feedforward(d_model, ff_dim, dropout):
    return nn.Sequential(nn.Linear(d_model, ff_dim), nn.GELU(), nn.Dropout(dropout),
                         nn.Linear(ff_dim, d_model))


class EncoderLayer(nn.Module):
    def __init__(self, d_model, n_heads, ff_dim, dropout):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.ff = _feedforward(d_model, ff_dim, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        x = self.norm1(x + self.dropout(self.attn(x, x)))
        return self.norm2(x + self.dropout(self.ff(x)))


class DecoderLayer(nn.Module):
    def __init__(self, d_model, n_heads, ff_dim, dropout):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.ff = _feedforward(d_model, ff_dim, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.norm3 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, memory):
        x = self.norm1(x + self.dropout(self.self_attn(x, x, causal=True)))
        x = self.norm2(x + self.dropout(self.cross_attn(x, memory)))
        return self.norm3(x + self.dropout(self.ff(x)))


class GPLayer(nn.Module):
    """Merge the global pool into the second half of the feature dimensions.

    The second half of ``E`` (flattened over time) scores the ``P`` pools;
    each pool series is scaled by its weight and the per-step vector of
    weighted pool values is projected back to ``d_model / 2`` features. The
    first half of ``E`` passes through untouched.
    """

    def __init__(self, T, d_model, n_pools):
        super().__init__()
        self.T = T
        self.half = d_model // 2
        self.n_pools = n_pools
        self.weight_proj = nn.Linear(T * self.half, n_pools)
        self.pool_proj = nn.Linear(n_pools, self.half)

    def merge_weights(self, E):
        return torch.softmax(self.weight_proj(E[:, :, self.half:].flatten(1)), dim=-1)

    def forward(self, E, pool):
        if pool.shape != (self.n_pools, self.T):
            raise DimensionError(f"pool must be {self.n_pools} x {self.T}, got {tuple(pool.shape)}")
        if E.shape[1] != self.T:
            raise DimensionError(f"encoder sequence of {E.shape[1]} steps, GP layer expects {self.T}")
        W = self.merge_weights(E)
        merged = W[:, None, :] * pool.transpose(0, 1)[None]  # b x T x P
        return torch.cat([E[:, :, :self.half], self.pool_proj(merged)], dim=-1), W


def build_decoder_input(start_token, decoder_marks, merge_weights, pool, padding_mode, L):
    """Decoder input ``b x (L_token + L) x d_t``.

    Column 0 holds the start token followed by the padding (the merged pool
    series' last ``L`` steps in sync mode, zeros otherwise); the remaining
    columns are the time marks of all rows.
    """
    b = start_token.shape[0]
    if padding_mode == "sync":
        if merge_weights is None or pool is None:
            raise StateError("synchronous padding needs merge weights and the pool")
        if L > pool.shape[1]:
            raise DimensionError(f"pool length {pool.shape[1]} shorter than horizon {L}")
        padding = (merge_weights @ pool)[:, -L:]
    elif padding_mode == "zero":
        padding = start_token.new_zeros(b, L)
    else:
        raise ConfigError(f"unknown padding mode {padding_mode!r}")
    if decoder_marks.shape[1] != start_token.shape[1] + L:
        raise DimensionError("decoder marks must cover L_token + L rows")
    value = torch.cat([start_token, padding], dim=1)
    return torch.cat([value[..., None], decoder_marks], dim=-1)


@dataclass
class ModelBatch:
    encoder_input: Tensor  # b x T x d_t
    start_token: Tensor  # b x L_token
    decoder_marks: Tensor  # b x (L_token + L) x (d_t - 1)
    static: Tensor  # b x d_s

    def __len__(self):
        return self.encoder_input.shape[0]


@dataclass
class ForwardTrace:
    encoder_blocks: list = field(default_factory=list)
    merge_weights: list = field(default_factory=list)
    encoder_alpha: Tensor | None = None
    decoder_alpha: Tensor | None = None
    decoder_input: Tensor | None = None
    prediction: Tensor | None = None

    @property
    def final_weights(self):
        return self.merge_weights[-1] if self.merge_weights else None


class DynEformer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        c = self.config = config
        self.enc_embed = InputEmbedding(c.d_t, c.d_model, c.T, c.dropout)
        self.dec_embed = InputEmbedding(c.d_t, c.d_model, c.L_token + c.L, c.dropout)
        self.enc_sa = SALayer(c.d_model, c.d_s, c.dropout) if c.use_sa else None
        if c.use_sa and not c.share_sa:
            self.dec_sa = SALayer(c.d_model, c.d_s, c.dropout)
        else:
            self.dec_sa = self.enc_sa
        self.encoder_layers = nn.ModuleList(
            EncoderLayer(c.d_model, c.n_heads, c.ff_dim, c.dropout) for _ in range(c.n_gp_blocks))
        self.gp_layers = nn.ModuleList(
            GPLayer(c.T, c.d_model, c.n_pools) for _ in range(c.n_gp_blocks)) if c.use_gp else None
        self.decoder_layers = nn.ModuleList(
            DecoderLayer(c.d_model, c.n_heads, c.ff_dim, c.dropout) for _ in range(c.m_decoder_layers))
        self.head = nn.Linear(c.d_model, 1)

    def _pool_tensor(self, pool):
        if pool is None:
            return None
        p = getattr(pool, "pools", pool)
        ref = self.head.weight
        return torch.as_tensor(p).to(dtype=ref.dtype)

    def embed_and_position(self, encoder_input):
        return self.enc_embed(encoder_input)

    def encode(self, batch: ModelBatch, pool, trace: ForwardTrace):
        c = self.config
        if batch.encoder_input.shape[1:] != (c.T, c.d_t):
            raise DimensionError(f"encoder input must be b x {c.T} x {c.d_t}, "
                                 f"got {tuple(batch.encoder_input.shape)}")
        v = self.embed_and_position(batch.encoder_input)
        if self.enc_sa is not None:
            v, trace.encoder_alpha = self.enc_sa(v, batch.static)
        for i, layer in enumerate(self.encoder_layers):
            e = layer(v)
            trace.encoder_blocks.append(e)
            if self.gp_layers is not None:
                v, w = self.gp_layers[i](e, pool)
                trace.merge_weights.append(w)
            else:
                v = e
        return v

    def forward(self, batch: ModelBatch, pool=None):
        c = self.config
        pool = self._pool_tensor(pool)
        if c.use_gp and pool is None:
            raise StateError("model uses the global pool but none was supplied")
        trace = ForwardTrace()
        memory = self.encode(batch, pool, trace)
        dec_in = build_decoder_input(batch.start_token, batch.decoder_marks, trace.final_weights,
                                     pool, c.padding_mode, c.L)
        trace.decoder_input = dec_in
        h = self.dec_embed(dec_in)
        if self.dec_sa is not None:
            h, trace.decoder_alpha = self.dec_sa(h, batch.static)
        for layer in self.decoder_layers:
            h = layer(h, memory)
        pred = self.head(h)[:, -c.L:, :]
        trace.prediction = pred
        return pred, trace
