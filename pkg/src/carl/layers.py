"""Attention building blocks shared by the encoder, slot transformer and decoders."""

import math

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

RENORM_EPS = 1e-8


def positional_encoding(grid, d):
    """Fixed 2-D sinusoidal encoding, shape (n_t * n_f, d), rows row-major over (time, freq).

    The first ``d / 2`` channels encode the time index and the rest the
    frequency index, each as interleaved sin/cos pairs at geometric wavelengths.
    """
    if d % 4:
        raise ValueError(f"positional encoding width {d} must be divisible by 4")
    n_t, n_f = grid
    half = d // 2
    inv_freq = 1.0 / (10000.0 ** (np.arange(half // 2) * 2.0 / half))

    def axis(n):
        ang = np.arange(n)[:, None] * inv_freq[None, :]
        enc = np.empty((n, half))
        enc[:, 0::2] = np.sin(ang)
        enc[:, 1::2] = np.cos(ang)
        return enc

    time_enc = np.repeat(axis(n_t), n_f, axis=0)
    freq_enc = np.tile(axis(n_f), (n_t, 1))
    return torch.from_numpy(np.concatenate([time_enc, freq_enc], axis=1))


def attention_weights(logits, kind="standard", mask=None, eps=RENORM_EPS):
    """Normalize attention logits (..., q, n).

    ``standard``: softmax over the key axis.
    ``inverted``: softmax over the query axis (queries compete for each key),
    then each query row is renormalized over keys into a weighted mean.
    """
    if mask is not None:
        logits = logits.masked_fill(mask, float("-inf"))
    if kind == "standard":
        return logits.softmax(dim=-1)
    if kind == "inverted":
        attn = logits.softmax(dim=-2)
        return attn / attn.sum(dim=-1, keepdim=True).clamp_min(eps)
    raise ValueError(f"unknown attention kind {kind!r}")


class MultiHeadAttention(nn.Module):
    def __init__(self, d, heads, d_kv=None, kind="standard"):
        super().__init__()
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        d_kv = d if d_kv is None else d_kv
        self.heads = heads
        self.kind = kind
        self.layer_index = 0
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d_kv, d)
        self.v = nn.Linear(d_kv, d)
        self.out = nn.Linear(d, d)

    def _split(self, x):
        b, n, d = x.shape
        return x.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x, context=None, causal=False):
        context = x if context is None else context
        q, k, v = self._split(self.q(x)), self._split(self.k(context)), self._split(self.v(context))
        logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if not torch.isfinite(logits).all():
            bad = (~torch.isfinite(logits)).flatten(2).any(-1).any(0).nonzero()
            raise FloatingPointError(
                f"non-finite attention logits at layer {self.layer_index} head {int(bad[0])}"
            )
        mask = None
        if causal:
            n_q, n_k = logits.shape[-2:]
            mask = torch.ones(n_q, n_k, dtype=torch.bool, device=x.device).triu(1)
        w = attention_weights(logits, self.kind, mask)
        y = (w @ v).transpose(1, 2).reshape(x.shape[0], x.shape[1], -1)
        return self.out(y)


class FeedForward(nn.Module):
    def __init__(self, d, mult=2):
        super().__init__()
        self.fc1 = nn.Linear(d, mult * d)
        self.fc2 = nn.Linear(mult * d, d)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderLayer(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, d, heads, mult=2):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.ff = FeedForward(d, mult)

    def forward(self, x, causal=False):
        x = x + self.attn(self.norm1(x), causal=causal)
        return x + self.ff(self.norm2(x))


class DecoderLayer(nn.Module):
    """Pre-norm block: self-attention, cross-attention to a context, feed-forward."""

    def __init__(self, d, heads, d_ctx=None, cross_kind="standard", mult=2):
        super().__init__()
        d_ctx = d if d_ctx is None else d_ctx
        self.norm_self = nn.LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads)
        self.norm_cross = nn.LayerNorm(d)
        self.norm_ctx = nn.LayerNorm(d_ctx)
        self.cross_attn = MultiHeadAttention(d, heads, d_kv=d_ctx, kind=cross_kind)
        self.norm_ff = nn.LayerNorm(d)
        self.ff = FeedForward(d, mult)

    def forward(self, x, context, causal=False):
        x = x + self.self_attn(self.norm_self(x), causal=causal)
        x = x + self.cross_attn(self.norm_cross(x), self.norm_ctx(context))
        return x + self.ff(self.norm_ff(x))
