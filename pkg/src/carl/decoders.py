"""Reconstruction decoders: MLP / CNN spatial broadcast and autoregressive transformer."""

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn
from torch.nn import functional as F

from .layers import DecoderLayer, positional_encoding

LOG_CLAMP = 20.0


@dataclass
class SlotReconstruction:
    composite: torch.Tensor  # (B, n, d_p) or (B, t, f)
    per_slot: Optional[torch.Tensor] = None  # (B, k, n, d_p) or (B, k, t, f)
    alpha_raw: Optional[torch.Tensor] = None  # (B, k, n, 1) or (B, k, t, f)
    n_clamped: int = 0

    @property
    def alpha(self):
        """Alpha masks after the slot-axis softmax."""
        return None if self.alpha_raw is None else self.alpha_raw.softmax(dim=1)


def composite_features(per_slot, alpha_raw=None):
    """Alpha-weighted sum over slots, or a plain sum without alpha."""
    if alpha_raw is None:
        return per_slot.sum(dim=1)
    return (alpha_raw.softmax(dim=1) * per_slot).sum(dim=1)


def composite_log_spectrogram(per_slot_log, alpha_raw=None, clamp=LOG_CLAMP):
    """Composite log-domain slot outputs in the linear domain, return log.

    ``log(sum_i a_i * exp(x_i))`` with softmax alphas, or ``log(sum_i exp(x_i))``
    without; slot outputs are clamped to ``clamp`` before exponentiation.
    Returns (composite, number of clamped entries).
    """
    n_clamped = int((per_slot_log.detach() > clamp).sum())
    x = per_slot_log.clamp(max=clamp)
    if alpha_raw is not None:
        x = x + alpha_raw.log_softmax(dim=1)
    return torch.logsumexp(x, dim=1), n_clamped


class MLPBroadcastDecoder(nn.Module):
    """Broadcast each slot to every patch position, add positions, decode with a shared MLP."""

    def __init__(self, d_s, d_p, grid, hidden=512, layers=3, alpha=False):
        super().__init__()
        self.use_alpha = alpha
        self.d_p = d_p
        self.register_buffer("pe", positional_encoding(grid, d_s).float())
        self.first = nn.Linear(d_s, hidden)
        self.hidden = nn.ModuleList(nn.Linear(hidden, hidden) for _ in range(layers - 1))
        self.out = nn.Linear(hidden, d_p + int(alpha))

    def forward(self, slots):
        # first(s + pe) split into a per-slot and a per-position term
        pe = self.pe.to(slots.dtype)
        h = self.first(slots)[:, :, None, :] + F.linear(pe, self.first.weight)[None, None]
        h = F.relu(h)
        for lin in self.hidden:
            h = F.relu(lin(h))
        y = self.out(h)
        if self.use_alpha:
            per_slot, alpha_raw = y[..., : self.d_p], y[..., self.d_p:]
        else:
            per_slot, alpha_raw = y, None
        return SlotReconstruction(composite_features(per_slot, alpha_raw), per_slot, alpha_raw)


class CNNBroadcastDecoder(nn.Module):
    """Broadcast slots to a coarse (t/8, f/8) grid with coordinate channels, upsample x8."""

    def __init__(self, d_s, t, f, channels=32, alpha=False, stages=3):
        super().__init__()
        scale = 2 ** stages
        if t % scale or f % scale:
            raise ValueError(f"spectrogram ({t}, {f}) not divisible by {scale}")
        self.use_alpha = alpha
        self.coarse = (t // scale, f // scale)
        ys = torch.linspace(-1.0, 1.0, self.coarse[0])
        xs = torch.linspace(-1.0, 1.0, self.coarse[1])
        self.register_buffer("coords", torch.stack(torch.meshgrid(ys, xs, indexing="ij")))
        self.proj = nn.Conv2d(d_s + 2, channels, 1)
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(channels, channels, 4, stride=2, padding=1) for _ in range(stages)
        )
        self.head = nn.Conv2d(channels, 1 + int(alpha), 3, padding=1)

    def forward(self, slots):
        b, k, d = slots.shape
        g_t, g_f = self.coarse
        x = slots.reshape(b * k, d, 1, 1).expand(-1, -1, g_t, g_f)
        coords = self.coords.to(slots.dtype)[None].expand(b * k, -1, -1, -1)
        h = F.relu(self.proj(torch.cat([x, coords], dim=1)))
        for up in self.up:
            h = F.relu(up(h))
        y = self.head(h).reshape(b, k, -1, g_t * 2 ** len(self.up), g_f * 2 ** len(self.up))
        per_slot = y[:, :, 0]
        alpha_raw = y[:, :, 1] if self.use_alpha else None
        composite, n_clamped = composite_log_spectrogram(per_slot, alpha_raw)
        return SlotReconstruction(composite, per_slot, alpha_raw, n_clamped)


class AutoregressiveDecoder(nn.Module):
    """Causal transformer predicting feature i from features < i and the slot set."""

    def __init__(self, d_s, d_p, grid, width=128, layers=4, heads=4):
        super().__init__()
        self.bos = nn.Parameter(torch.randn(d_p) * 0.02)
        self.in_proj = nn.Linear(d_p, width)
        self.register_buffer("pe", positional_encoding(grid, width).float())
        self.layers = nn.ModuleList(DecoderLayer(width, heads, d_ctx=d_s) for _ in range(layers))
        for i, layer in enumerate(self.layers):
            layer.self_attn.layer_index = i
            layer.cross_attn.layer_index = i
        self.norm = nn.LayerNorm(width)
        self.out = nn.Linear(width, d_p)

    def forward(self, slots, target):
        """Teacher-forced predictions (B, n, d_p) for ``target`` (B, n, d_p)."""
        b = target.shape[0]
        inp = torch.cat([self.bos.to(target.dtype).expand(b, 1, -1), target[:, :-1]], dim=1)
        h = self.in_proj(inp) + self.pe.to(target.dtype)
        for layer in self.layers:
            h = layer(h, slots, causal=True)
        return SlotReconstruction(self.out(self.norm(h)))

    @torch.no_grad()
    def generate(self, slots):
        """Greedy free-running decode of all n positions."""
        b, n = slots.shape[0], self.pe.shape[0]
        seq = torch.zeros(b, n, self.out.out_features, dtype=slots.dtype)
        for i in range(n):
            seq[:, i] = self.forward(slots, seq).composite[:, i]
        return seq


def reconstruction_loss(recon, target):
    recon = recon.composite if isinstance(recon, SlotReconstruction) else recon
    if recon.shape != target.shape:
        raise ValueError(f"reconstruction {tuple(recon.shape)} vs target {tuple(target.shape)}")
    return ((recon - target) ** 2).mean()


def build_decoder(dec_cfg, d_s, d_p, grid, spec_shape):
    kind = dec_cfg["kind"]
    if kind == "mlp":
        return MLPBroadcastDecoder(d_s, d_p, grid, dec_cfg["hidden"], dec_cfg["mlp_layers"], dec_cfg["alpha"])
    if kind == "cnn":
        return CNNBroadcastDecoder(d_s, spec_shape[0], spec_shape[1], dec_cfg["cnn_channels"], dec_cfg["alpha"])
    if kind == "transformer":
        return AutoregressiveDecoder(d_s, d_p, grid, dec_cfg["ar_width"], dec_cfg["ar_layers"], dec_cfg["ar_heads"])
    raise ValueError(f"unknown decoder kind {kind!r}")
